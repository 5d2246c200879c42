"""Dense kernels with hand-written backward passes.

Every ``foo`` that has a gradient comes with a ``foo_grad`` taking the
upstream gradient plus whatever ``foo`` returned as its cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse

from bpt.errors import InvalidInputError, ShapeError, TrainingError

LN_EPS = 1e-5


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_grad(a: np.ndarray, b: np.ndarray, dc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``a @ b``; ``a`` may carry leading batch axes, ``b`` is 2-D."""
    da = dc @ b.T
    db = a.reshape(-1, a.shape[-1]).T @ dc.reshape(-1, dc.shape[-1])
    return da, db


class Scatter:
    """Sum rows of an ``(m, ...)`` array into ``n_out`` buckets given by ``index``.

    Backed by a sparse incidence matrix, so each output row is a fixed-order
    sum over exactly the inputs routed to it.
    """

    def __init__(self, index, n_out: int):
        index = np.asarray(index, dtype=np.intp)
        self.index = index
        self.n_out = n_out
        self._mats: dict = {}

    def _matrix(self, dtype):
        mat = self._mats.get(dtype)
        if mat is None:
            m = len(self.index)
            mat = sparse.csr_matrix(
                (np.ones(m, dtype=dtype), (self.index, np.arange(m))), shape=(self.n_out, m)
            )
            self._mats[dtype] = mat
        return mat

    def sum(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != len(self.index):
            raise ShapeError(f"{x.shape[0]} rows for a scatter of {len(self.index)}")
        flat = x.reshape(x.shape[0], -1)
        out = self._matrix(x.dtype) @ flat
        return np.asarray(out).reshape((self.n_out,) + x.shape[1:])


class Segments(Scatter):
    """Contiguous non-empty segments along axis 0, described by CSR-style offsets."""

    def __init__(self, offsets):
        offsets = np.asarray(offsets, dtype=np.intp)
        if offsets.ndim != 1 or len(offsets) < 2 or offsets[0] != 0:
            raise InvalidInputError("offsets must start at 0 and describe at least one segment")
        counts = np.diff(offsets)
        if np.any(counts <= 0):
            raise InvalidInputError("segments must be non-empty")
        self.offsets = offsets
        self.starts = offsets[:-1]
        self.counts = counts
        super().__init__(np.repeat(np.arange(len(counts)), counts), len(counts))

    @property
    def ids(self) -> np.ndarray:
        return self.index

    def __len__(self) -> int:
        return len(self.counts)

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def max(self, x: np.ndarray) -> np.ndarray:
        flat = x.reshape(x.shape[0], -1)
        return np.maximum.reduceat(flat, self.starts, axis=0).reshape((len(self),) + x.shape[1:])

    def expand(self, per_segment: np.ndarray) -> np.ndarray:
        return per_segment[self.index]


def segment_softmax(logits: np.ndarray, segments: Segments) -> tuple[np.ndarray, np.ndarray]:
    """Softmax within each segment along axis 0; returns (probs, logsumexp)."""
    if logits.shape[0] != segments.size:
        raise ShapeError(f"{logits.shape[0]} values for segments covering {segments.size}")
    m = segments.max(logits)
    ex = np.exp(logits - segments.expand(m))
    s = segments.sum(ex)
    return ex / segments.expand(s), m + np.log(s)


def segment_softmax_grad(probs: np.ndarray, dprobs: np.ndarray, segments: Segments) -> np.ndarray:
    inner = segments.sum(probs * dprobs)
    return probs * (dprobs - segments.expand(inner))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd, gain)


def layer_norm_grad(dy: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, rstd, gain = cache
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=axes)
    dbias = dy.sum(axis=axes)
    dxhat = dy * gain
    dx = rstd * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def ffn(x: np.ndarray, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray):
    """Position-wise feed-forward: relu(x w1 + b1) w2 + b2."""
    if w1.shape[1] != w2.shape[0] or x.shape[-1] != w1.shape[0]:
        raise ShapeError(f"ffn widths disagree: x {x.shape}, w1 {w1.shape}, w2 {w2.shape}")
    pre = matmul(x, w1) + b1
    hidden = np.maximum(pre, 0.0)
    return matmul(hidden, w2) + b2, (x, pre, hidden, w1, w2)


def ffn_grad(dy: np.ndarray, cache):
    x, pre, hidden, w1, w2 = cache
    dhidden, dw2 = matmul_grad(hidden, w2, dy)
    db2 = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dpre = dhidden * (pre > 0)
    dx, dw1 = matmul_grad(x, w1, dpre)
    db1 = dpre.reshape(-1, dpre.shape[-1]).sum(axis=0)
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray | None = None):
    """Mean negative log-likelihood in nats over unmasked positions.

    ``mask`` is true where a position counts. Returns ``(loss, dlogits)``.
    """
    vocab = logits.shape[-1]
    flat = logits.reshape(-1, vocab)
    tgt = np.asarray(targets).reshape(-1)
    keep = np.ones(len(tgt), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if len(tgt) != len(flat) or len(keep) != len(flat):
        raise ShapeError("logits, targets and mask disagree in length")
    n = int(keep.sum())
    if n == 0:
        raise InvalidInputError("every position is masked")
    if np.any(tgt[keep] < 0) or np.any(tgt[keep] >= vocab):
        raise InvalidInputError("target id outside the vocabulary")
    tgt = np.where(keep, tgt, 0)
    shifted = flat - flat.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(len(tgt))
    loss = -(logp[rows, tgt] * keep).sum() / n
    dlogits = np.exp(logp)
    dlogits[rows, tgt] -= 1.0
    dlogits *= keep[:, None] / n
    return float(loss), dlogits.reshape(logits.shape)


def dropout(x: np.ndarray, p: float, rng: np.random.Generator | None):
    """Inverted dropout; returns (y, scale) where scale is None when inactive."""
    if p <= 0.0 or rng is None:
        return x, None
    scale = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * scale, scale


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(spec, seed: int, dtype=np.float64) -> dict[str, np.ndarray]:
    """Draw parameters for ``spec``, a sequence of ``(name, shape, kind)``.

    ``kind`` is ``weight`` (Glorot uniform), ``zeros`` or ``ones``. Draw order
    follows ``spec`` so the result is a pure function of ``seed``.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in spec:
        if kind == "weight":
            value = glorot_uniform(rng, shape)
        elif kind == "zeros":
            value = np.zeros(shape)
        elif kind == "ones":
            value = np.ones(shape)
        else:
            raise InvalidInputError(f"unknown init kind {kind!r}")
        params[name] = value.astype(dtype)
    return params


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup: int = 400
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        """Learning rate for the step about to be taken (linear warmup)."""
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, (self.step + 1) / self.warmup)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected adaptive-moment update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
    lr = state.current_lr()
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` is perturbed in place and restored. With ``indices`` (flat
    positions) only those coordinates are estimated; the rest stay zero.
    """
    if h <= 0:
        raise InvalidInputError("step must be positive")
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-based relative error; 0 when both are exactly zero."""
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)
