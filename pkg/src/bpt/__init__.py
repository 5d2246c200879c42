"""Binary-partition sparse attention at desk scale."""

from bpt.errors import (
    BptError,
    ConfigError,
    DataError,
    InvalidInputError,
    ShapeError,
    SplitAccessError,
    TrainingError,
    VocabularyError,
)
from bpt.graph import BpGraph, Relation, TreeShape, build_graph, build_tree

__version__ = "0.1.0"

__all__ = [
    "BpGraph",
    "BptError",
    "ConfigError",
    "DataError",
    "InvalidInputError",
    "Relation",
    "ShapeError",
    "SplitAccessError",
    "TrainingError",
    "TreeShape",
    "VocabularyError",
    "build_graph",
    "build_tree",
]
