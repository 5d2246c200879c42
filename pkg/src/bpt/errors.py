"""Exception hierarchy shared by every module."""


class BptError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(BptError, ValueError):
    pass


class ShapeError(BptError, ValueError):
    pass


class ConfigError(BptError, ValueError):
    pass


class VocabularyError(BptError, KeyError):
    pass


class TrainingError(BptError, ArithmeticError):
    pass


class DataError(BptError, ValueError):
    pass


class SplitAccessError(BptError, PermissionError):
    """Raised when a training path touches the held-out test split."""
