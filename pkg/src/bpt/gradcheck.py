"""Finite-difference checks of every hand-written backward pass (64-bit, dropout off)."""

from __future__ import annotations

import numpy as np

from bpt import numeric as nc
from bpt.attention import gsa_backward, gsa_forward
from bpt.config import RunConfig
from bpt.graph import build_graph
from bpt.errors import InvalidInputError
from bpt.model import Batch, forward, init_params, lm_targets, loss_and_grads

MODEL_TOL = 1e-4
KERNEL_TOL = 1e-6
# central differences are meaningless when a step crosses a ReLU kink, so
# instances with a pre-activation this close to zero are redrawn
KINK_MARGIN = 1e-3
MAX_DRAWS = 50


def _randomized_params(config: RunConfig, rng: np.random.Generator) -> dict:
    # zero-initialized groups (relations, biases) would hide wrong gradients
    params = init_params(config, int(rng.integers(1 << 31)))
    return {name: p + 0.1 * rng.standard_normal(p.shape) for name, p in params.items()}


def _relu_margin(batch: Batch, params: dict, graph, config: RunConfig) -> float:
    _, cache = forward(batch.tokens, params, graph, config)
    return min(float(np.abs(layer[3][1]).min()) for layer in cache.layers)


def model_grad_check(seed: int = 0, mode: str = "causal", n: int = 8, k: int = 1) -> dict[str, float]:
    """Relative error of the analytic gradient per parameter group of the full model."""
    config = RunConfig(
        n_max=n, k=k, layers=2, d=16, heads=2, d_ff=32, mode=mode, vocab=9, n_classes=3, precision="verify"
    )
    rng = np.random.default_rng(seed)
    graph = build_graph(n, k, config.mode)
    for _ in range(MAX_DRAWS):
        params = _randomized_params(config, rng)
        tokens = rng.integers(3, config.vocab, size=(2, n))
        if config.mode == "causal":
            targets, mask = lm_targets(tokens)
            batch = Batch(tokens, targets, mask)
        else:
            batch = Batch(tokens, labels=rng.integers(0, config.n_classes, size=2))
        if _relu_margin(batch, params, graph, config) > KINK_MARGIN:
            break
    else:
        raise InvalidInputError(f"no kink-free draw in {MAX_DRAWS} attempts")
    _, grads = loss_and_grads(batch, params, graph, config)

    def loss(_):
        return loss_and_grads(batch, params, graph, config, need_grads=False)[0]

    return {name: nc.relative_error(grads[name], nc.finite_diff(loss, p)) for name, p in params.items()}


def kernel_grad_checks(seed: int = 0) -> dict[str, float]:
    """Relative errors of the isolated kernels, keyed ``kernel/argument``."""
    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}

    def check(name, f, x, analytic):
        out[name] = nc.relative_error(analytic, nc.finite_diff(f, x))

    # matmul, projected onto a random direction so the scalar is generic
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    w = rng.standard_normal((5, 3))
    da, db = nc.matmul_grad(a, b, w)
    check("matmul/a", lambda _: float((nc.matmul(a, b) * w).sum()), a, da)
    check("matmul/b", lambda _: float((nc.matmul(a, b) * w).sum()), b, db)

    seg = nc.Segments([0, 1, 4, 9, 11])
    x = rng.standard_normal((11, 2))
    w = rng.standard_normal((11, 2))
    p, _ = nc.segment_softmax(x, seg)
    check("segment_softmax/x", lambda _: float((nc.segment_softmax(x, seg)[0] * w).sum()), x, nc.segment_softmax_grad(p, w, seg))

    x = rng.standard_normal((3, 6))
    g, bias = 1 + 0.1 * rng.standard_normal(6), 0.1 * rng.standard_normal(6)
    w = rng.standard_normal((3, 6))
    y, cache = nc.layer_norm(x, g, bias)
    dx, dg, dbias = nc.layer_norm_grad(w, cache)

    def ln(_):
        return float((nc.layer_norm(x, g, bias)[0] * w).sum())

    check("layer_norm/x", ln, x, dx)
    check("layer_norm/gain", ln, g, dg)
    check("layer_norm/bias", ln, bias, dbias)

    while True:
        x = rng.standard_normal((4, 5))
        w1, b1 = rng.standard_normal((5, 7)), rng.standard_normal(7)
        if np.abs(x @ w1 + b1).min() > KINK_MARGIN:
            break
    w2, b2 = rng.standard_normal((7, 5)), rng.standard_normal(5)
    w = rng.standard_normal((4, 5))
    _, cache = nc.ffn(x, w1, b1, w2, b2)
    dx, fg = nc.ffn_grad(w, cache)

    def ff(_):
        return float((nc.ffn(x, w1, b1, w2, b2)[0] * w).sum())

    for name, arr, grad in (("x", x, dx), ("w1", w1, fg["w1"]), ("b1", b1, fg["b1"]), ("w2", w2, fg["w2"]), ("b2", b2, fg["b2"])):
        check(f"ffn/{name}", ff, arr, grad)

    logits = rng.standard_normal((6, 5))
    targets = rng.integers(0, 5, size=6)
    mask = np.array([1, 1, 0, 1, 0, 1], dtype=bool)
    _, dl = nc.cross_entropy(logits, targets, mask)
    check("cross_entropy/logits", lambda _: nc.cross_entropy(logits, targets, mask)[0], logits, dl)

    # one graph self-attention layer: n_tokens=8, d=16, h=2, k=1
    graph = build_graph(8, 1, "bidirectional")
    d, heads = 16, 2
    h = rng.standard_normal((2, graph.n_nodes, d))
    lp = {name: 0.3 * rng.standard_normal((d, d)) for name in ("wq", "wk", "wv", "wo")}
    lp["rel"] = 0.3 * rng.standard_normal((graph.relation_indices(graph.shape.levels, 1).max() + 1, d // heads))
    w = rng.standard_normal(h.shape)
    _, trace = gsa_forward(graph, h, lp, heads)
    dh, ag = gsa_backward(trace, w)

    def gsa(_):
        return float((gsa_forward(graph, h, lp, heads)[0] * w).sum())

    check("gsa/h", gsa, h, dh)
    for name in ("wq", "wk", "wv", "wo", "rel"):
        check(f"gsa/{name}", gsa, lp[name], ag[name])
    return out
