"""Run configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from bpt.errors import ConfigError, InvalidInputError
from bpt.graph import BIDIRECTIONAL, CAUSAL, n_relations, normalize_mode

PRECISIONS = ("verify", "fast")


@dataclass
class RunConfig:
    # model
    n_max: int = 128
    k: int = 4
    layers: int = 2
    d: int = 64
    heads: int = 4
    d_ff: int = 256
    mode: str = CAUSAL
    vocab: int = 0
    n_classes: int = 2
    # dropout: embeddings, hidden, attention weights, before classifier
    p_i: float = 0.1
    p_h: float = 0.1
    p_a: float = 0.1
    p_c: float = 0.1
    # run
    seed: int = 0
    precision: str = "fast"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup: int = 400
    steps: int = 2000
    batch: int = 8
    log_every: int = 50
    eval_every: int = 200

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.n_max < 1:
            raise ConfigError("n_max must be >= 1")
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide d ({self.d})")
        if self.d_ff < 1:
            raise ConfigError("d_ff must be >= 1")
        try:
            self.mode = normalize_mode(self.mode)
        except InvalidInputError:
            raise ConfigError(f"mode {self.mode!r} is not causal or bidirectional") from None
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}")
        for name in ("p_i", "p_h", "p_a", "p_c"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if self.steps < 0 or self.batch < 1 or self.log_every < 1 or self.eval_every < 1:
            raise ConfigError("steps, batch, log_every and eval_every must be positive")

    @property
    def n_padded(self) -> int:
        return 1 << (self.n_max - 1).bit_length()

    @property
    def levels(self) -> int:
        return self.n_padded.bit_length()

    @property
    def n_relations(self) -> int:
        return n_relations(self.levels, self.k)

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    @property
    def verify(self) -> bool:
        return self.precision == "verify"

    @property
    def dtype(self):
        return np.float64 if self.verify else np.float32

    def dropout_rates(self) -> tuple[float, float, float, float]:
        """Effective rates; verification mode turns dropout off."""
        if self.verify:
            return 0.0, 0.0, 0.0, 0.0
        return self.p_i, self.p_h, self.p_a, self.p_c

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def default_config(task: str = "lm") -> RunConfig:
    """Desk-scale defaults; character LM uses a denser graph than word-level tasks."""
    if task == "lm":
        return RunConfig(mode=CAUSAL, k=16, n_max=128)
    if task == "cls":
        # small word-level sets overfit fast; drop embeddings and attention hard
        return RunConfig(mode=BIDIRECTIONAL, k=4, n_max=64, p_i=0.4, p_h=0.1, p_a=0.3, p_c=0.4)
    raise ConfigError(f"unknown task {task!r}")


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str, lineno: int):
    kind = _TYPES[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse {raw!r} for {name}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = dataclasses.asdict(base or RunConfig())
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, lineno)
        seen[key] = lineno
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        lines = [f"line {n}" for key, n in seen.items() if key in str(exc).replace("(", " ").split()]
        where = ", ".join(lines) + ": " if lines else ""
        raise ConfigError(f"{where}{exc}") from None


def load_config(path: str | Path | None, task: str = "lm") -> RunConfig:
    base = default_config(task)
    if path is None:
        return base
    return parse_config(Path(path).read_text(), base)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(config.to_text())
