import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpt.attention import attention_degree, gsa_backward, gsa_forward
from bpt.errors import InvalidInputError, ShapeError
from bpt.graph import CAUSAL, build_graph, n_relations, relation_index


def make_params(graph, d, heads, seed=0, rel_scale=0.5):
    rng = np.random.default_rng(seed)
    p = {name: rng.standard_normal((d, d)) / math.sqrt(d) for name in ("wq", "wk", "wv", "wo")}
    p["rel"] = rel_scale * rng.standard_normal((n_relations(graph.shape.levels, graph.k), d // heads))
    return p


def naive_gsa(graph, h, p, heads):
    """Node-by-node attention straight from the predecessor lists."""
    levels, k = graph.shape.levels, graph.k
    d = h.shape[-1]
    dh = d // heads
    q, key, v = h @ p["wq"], h @ p["wk"], h @ p["wv"]
    out = np.zeros_like(h)
    for u in range(graph.n_nodes):
        preds = graph.preds(u)
        concat = []
        for i in range(heads):
            cols = slice(i * dh, (i + 1) * dh)
            scores = []
            for src, rel in preds:
                r = p["rel"][relation_index(rel, levels, k)]
                scores.append(float(q[u, cols] @ (key[src, cols] + r)) / math.sqrt(dh))
            top = max(scores)
            w = [math.exp(s - top) for s in scores]
            total = sum(w)
            concat.append(sum(wi / total * v[src, cols] for wi, (src, _) in zip(w, preds)))
        out[u] = np.concatenate(concat) @ p["wo"]
    return out


@settings(deadline=None, max_examples=15)
@given(st.integers(1, 12), st.integers(1, 4), st.sampled_from(["bidirectional", "causal"]), st.integers(0, 99))
def test_matches_naive_loop(n, k, mode, seed):
    graph = build_graph(n, k, mode)
    d, heads = 8, 2
    p = make_params(graph, d, heads, seed)
    h = np.random.default_rng(seed + 1).standard_normal((graph.n_nodes, d))
    out, _ = gsa_forward(graph, h, p, heads)
    assert np.allclose(out, naive_gsa(graph, h, p, heads), atol=1e-12, rtol=0)


@settings(deadline=None, max_examples=20)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 999))
def test_weights_normalize_per_destination_and_head(n, k, seed):
    graph = build_graph(n, k)
    p = make_params(graph, 12, 3, seed)
    h = 3.0 * np.random.default_rng(seed).standard_normal((2, graph.n_nodes, 12))
    _, trace = gsa_forward(graph, h, p, 3)
    sums = np.add.reduceat(trace.weights, graph.offsets[:-1], axis=0)
    assert np.abs(sums - 1.0).max() < 1e-12


def test_predecessor_order_does_not_matter():
    graph = build_graph(16, 2)
    p = make_params(graph, 8, 2)
    h = np.random.default_rng(1).standard_normal((3, graph.n_nodes, 8))
    a, _ = gsa_forward(graph, h, p, 2)
    b, _ = gsa_forward(graph.permuted(np.random.default_rng(2)), h, p, 2)
    assert np.allclose(a, b, atol=1e-12)


def test_relations_shift_keys_only():
    graph = build_graph(8, 1)
    p = make_params(graph, 8, 2)
    h = np.random.default_rng(0).standard_normal((graph.n_nodes, 8))
    zero = dict(p, rel=np.zeros_like(p["rel"]))
    a, _ = gsa_forward(graph, h, p, 2)
    b, _ = gsa_forward(graph, h, zero, 2)
    assert not np.allclose(a, b)
    # a constant relation vector adds the same score to every edge of a segment
    const = dict(p, rel=np.tile(p["rel"][:1], (len(p["rel"]), 1)))
    c, _ = gsa_forward(graph, h, const, 2)
    d_, _ = gsa_forward(graph, h, zero, 2)
    assert np.allclose(c, d_, atol=1e-12)


def test_batch_rows_are_independent():
    graph = build_graph(8, 2, CAUSAL)
    p = make_params(graph, 8, 2)
    h = np.random.default_rng(0).standard_normal((3, graph.n_nodes, 8))
    full, _ = gsa_forward(graph, h, p, 2)
    one, _ = gsa_forward(graph, h[1], p, 2)
    assert np.allclose(full[1], one, atol=1e-13)


def test_float32_stays_float32():
    graph = build_graph(8, 2)
    p = {k: v.astype(np.float32) for k, v in make_params(graph, 8, 2).items()}
    h = np.random.default_rng(0).standard_normal((2, graph.n_nodes, 8)).astype(np.float32)
    out, trace = gsa_forward(graph, h, p, 2)
    assert out.dtype == np.float32
    dh, grads = gsa_backward(trace, np.ones_like(out))
    assert dh.dtype == np.float32
    assert all(g.dtype == np.float32 for g in grads.values())


def test_attention_dropout_needs_rng():
    graph = build_graph(8, 2)
    p = make_params(graph, 8, 2)
    h = np.random.default_rng(0).standard_normal((graph.n_nodes, 8))
    a, _ = gsa_forward(graph, h, p, 2)
    b, _ = gsa_forward(graph, h, p, 2, p_attn=0.5)
    c, trace = gsa_forward(graph, h, p, 2, p_attn=0.5, rng=np.random.default_rng(0))
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)
    assert trace.drop_scale is not None


def test_shape_errors():
    graph = build_graph(8, 1)
    p = make_params(graph, 8, 2)
    with pytest.raises(ShapeError):
        gsa_forward(graph, np.zeros((graph.n_nodes + 1, 8)), p, 2)
    with pytest.raises(ShapeError):
        gsa_forward(graph, np.zeros((graph.n_nodes, 8)), p, 3)
    with pytest.raises(ShapeError):
        gsa_forward(graph, np.zeros((graph.n_nodes, 8)), dict(p, rel=np.zeros((2, 4))), 2)
    _, trace = gsa_forward(graph, np.zeros((graph.n_nodes, 8)), p, 2)
    with pytest.raises(InvalidInputError):
        gsa_backward(trace, np.zeros((graph.n_nodes, 4)))


def test_trace_json():
    graph = build_graph(2, 1)
    p = make_params(graph, 4, 2)
    _, trace = gsa_forward(graph, np.ones((graph.n_nodes, 4)), p, 2)
    doc = trace.to_json()
    assert len(doc) == graph.n_edges
    assert all(len(w) == 2 for w in doc.values())


def test_attention_degree():
    assert attention_degree(build_graph(128, 4, CAUSAL)) == {"min": 1, "mean": 16.890625, "max": 24}
