import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpt.config import RunConfig
from bpt.errors import ConfigError, InvalidInputError, VocabularyError
from bpt.gradcheck import MODEL_TOL, model_grad_check
from bpt.graph import BIDIRECTIONAL, CAUSAL, build_graph, build_tree
from bpt.model import (
    EOS_ID,
    PAD_ID,
    Batch,
    cls_logits,
    dense_reference_forward,
    forward,
    init_params,
    init_states,
    lm_logits,
    lm_targets,
    loss_and_grads,
    param_count,
    param_spec,
)


def small_config(**kw):
    base = dict(n_max=16, k=2, layers=2, d=8, heads=2, d_ff=16, vocab=11, n_classes=3, precision="verify")
    base.update(kw)
    return RunConfig(**base)


def plain_dense_stack(tokens, params, layers, heads):
    """Vanilla post-norm encoder written without the package's kernels."""
    h = params["emb"][tokens].copy()
    h[tokens == PAD_ID] = 0.0
    n, d = h.shape
    dh = d // heads

    def norm(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    for i in range(layers):
        p = {k.split(".", 1)[1]: v for k, v in params.items() if k.startswith(f"layer{i}.")}
        q, k, v = h @ p["wq"], h @ p["wk"], h @ p["wv"]
        heads_out = []
        for j in range(heads):
            c = slice(j * dh, (j + 1) * dh)
            s = q[:, c] @ k[:, c].T / math.sqrt(dh)
            w = np.exp(s - s.max(1, keepdims=True))
            heads_out.append((w / w.sum(1, keepdims=True)) @ v[:, c])
        z = norm(h + np.concatenate(heads_out, 1) @ p["wo"], p["ln1_g"], p["ln1_b"])
        f = np.maximum(z @ p["w1"] + p["b1"], 0.0) @ p["w2"] + p["b2"]
        h = norm(z + f, p["ln2_g"], p["ln2_b"])
    return h


@pytest.mark.parametrize("layers", [1, 2])
def test_degenerates_to_dense_attention(layers):
    cfg = small_config(k=16, layers=layers, mode=BIDIRECTIONAL)
    params = init_params(cfg, seed=5)
    tokens = np.random.default_rng(0).integers(3, cfg.vocab, size=(2, 16))
    states, _ = forward(tokens, params, build_graph(16, 16), cfg)
    dense = dense_reference_forward(tokens, params, cfg)
    assert np.abs(states[:, :16] - dense).max() < 1e-10
    for b in range(2):
        assert np.abs(states[b, :16] - plain_dense_stack(tokens[b], params, layers, cfg.heads)).max() < 1e-10


def test_relations_break_degeneration():
    cfg = small_config(k=16, layers=1, mode=BIDIRECTIONAL)
    params = init_params(cfg, seed=5)
    params["layer0.rel"] = np.random.default_rng(0).standard_normal(params["layer0.rel"].shape)
    tokens = np.random.default_rng(0).integers(3, cfg.vocab, size=(1, 16))
    states, _ = forward(tokens, params, build_graph(16, 16), cfg)
    assert np.abs(states[:, :16] - dense_reference_forward(tokens, params, cfg)).max() > 1e-3


@settings(deadline=None, max_examples=10)
@given(st.integers(2, 16), st.integers(1, 4), st.integers(0, 10_000))
def test_causal_logits_ignore_the_future(n, k, seed):
    cfg = small_config(n_max=n, k=k, mode=CAUSAL)
    params = init_params(cfg, seed=seed)
    graph = build_graph(n, k, CAUSAL)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(3, cfg.vocab, size=(1, n))
    t = int(rng.integers(1, n))
    other = tokens.copy()
    other[0, t] = 3 + (tokens[0, t] - 2) % (cfg.vocab - 3)
    a = lm_logits(forward(tokens, params, graph, cfg)[0], params, graph)
    b = lm_logits(forward(other, params, graph, cfg)[0], params, graph)
    assert np.array_equal(a[:, :t], b[:, :t])
    assert not np.array_equal(a[:, t], b[:, t])


def test_init_states():
    shape = build_tree(5)
    emb = np.arange(12, dtype=float).reshape(4, 3)
    h = init_states(np.array([[3, 0, 2]]), emb, shape)
    assert h.shape == (1, shape.n_nodes, 3)
    assert h[0, 0].tolist() == [9, 10, 11]
    assert not h[0, 1].any()
    assert not h[0, 3:].any()
    with pytest.raises(VocabularyError):
        init_states(np.array([[4]]), emb, shape)
    with pytest.raises(InvalidInputError):
        init_states(np.zeros((1, 9), dtype=int), emb, shape)


def test_single_token_tree():
    h = init_states(np.array([[1]]), np.eye(2), build_tree(1))
    assert h.tolist() == [[[0.0, 1.0]]]


@pytest.mark.parametrize("mode", [CAUSAL, BIDIRECTIONAL])
def test_param_count_closed_form(mode):
    cfg = small_config(mode=mode)
    params = init_params(cfg)
    assert param_count(cfg) == sum(p.size for p in params.values())
    assert [name for name, _, _ in param_spec(cfg)] == list(params)


def test_param_init_rules():
    params = init_params(small_config())
    assert not params["layer0.rel"].any()
    assert np.all(params["layer1.ln2_g"] == 1)
    assert not params["lm_b"].any()
    assert params["emb"].std() > 0


def test_precision_sets_dtype():
    assert init_params(small_config(precision="fast"))["emb"].dtype == np.float32
    assert init_params(small_config())["emb"].dtype == np.float64


def test_vocab_must_be_set():
    with pytest.raises(ConfigError):
        init_params(small_config(vocab=0))


def test_lm_targets():
    targets, mask = lm_targets(np.array([[5, 6, 7, 0]]))
    assert targets.tolist() == [[6, 7, EOS_ID, EOS_ID]]
    assert mask.tolist() == [[True, True, True, False]]
    targets, _ = lm_targets(np.array([[5, 6]]), np.array([9]))
    assert targets.tolist() == [[6, 9]]


def test_heads_check_mode():
    lm = small_config(mode=CAUSAL)
    cls = small_config(mode=BIDIRECTIONAL)
    g_lm, g_cls = build_graph(16, 2, CAUSAL), build_graph(16, 2, BIDIRECTIONAL)
    states = np.zeros((1, g_lm.n_nodes, 8))
    with pytest.raises(ConfigError):
        lm_logits(states, init_params(cls), g_cls)
    with pytest.raises(ConfigError):
        cls_logits(states, init_params(lm), g_lm)
    with pytest.raises(ConfigError):
        forward(np.ones((1, 4), dtype=int), init_params(lm), g_cls, lm)


def test_classifier_reads_the_root():
    cfg = small_config(mode=BIDIRECTIONAL)
    params = init_params(cfg)
    graph = build_graph(16, 2)
    states = np.zeros((2, graph.n_nodes, 8))
    states[:, graph.shape.root] = 1.0
    logits, root, scale = cls_logits(states, params, graph)
    assert scale is None
    assert np.allclose(logits, params["cls_w"].sum(0) + params["cls_b"])


def test_padding_positions_carry_no_loss():
    cfg = small_config(mode=CAUSAL)
    params = init_params(cfg)
    graph = build_graph(16, 2, CAUSAL)
    tokens = np.array([[4, 5, 6, 0, 0, 0, 0, 0]])
    targets, mask = lm_targets(tokens)
    loss, grads = loss_and_grads(Batch(tokens, targets, mask), params, graph, cfg)
    assert np.isfinite(loss)
    assert not grads["emb"][PAD_ID].any()


@pytest.mark.parametrize("mode", [CAUSAL, BIDIRECTIONAL])
def test_full_model_gradients(mode):
    errors = model_grad_check(seed=1, mode=mode, n=4, k=1)
    assert max(errors.values()) < MODEL_TOL, errors
