"""Stacked BPT network: parameters, layer loop, task heads and full backward.

Parameters live in a flat ordered ``dict`` (``"emb"``, ``"layer0.wq"``, ...)
so that the optimizer, checkpoint format and gradient checks can treat them
uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from bpt import numeric as nc
from bpt.attention import LAYER_KEYS, gsa_backward, gsa_forward
from bpt.config import RunConfig
from bpt.errors import ConfigError, InvalidInputError, TrainingError, VocabularyError
from bpt.graph import BIDIRECTIONAL, CAUSAL, BpGraph, TreeShape

PAD_ID = 0
UNK_ID = 1
EOS_ID = 2
N_SPECIAL = 3


def param_spec(config: RunConfig) -> list[tuple[str, tuple[int, ...], str]]:
    if config.vocab < 1:
        raise ConfigError("vocab size must be set before building parameters")
    d, dff = config.d, config.d_ff
    spec = [("emb", (config.vocab, d), "weight")]
    for i in range(config.layers):
        p = f"layer{i}."
        spec += [
            (p + "wq", (d, d), "weight"),
            (p + "wk", (d, d), "weight"),
            (p + "wv", (d, d), "weight"),
            (p + "wo", (d, d), "weight"),
            (p + "rel", (config.n_relations, config.d_head), "zeros"),
            (p + "ln1_g", (d,), "ones"),
            (p + "ln1_b", (d,), "zeros"),
            (p + "w1", (d, dff), "weight"),
            (p + "b1", (dff,), "zeros"),
            (p + "w2", (dff, d), "weight"),
            (p + "b2", (d,), "zeros"),
            (p + "ln2_g", (d,), "ones"),
            (p + "ln2_b", (d,), "zeros"),
        ]
    if config.mode == CAUSAL:
        spec += [("lm_w", (d, config.vocab), "weight"), ("lm_b", (config.vocab,), "zeros")]
    else:
        spec += [("cls_w", (d, config.n_classes), "weight"), ("cls_b", (config.n_classes,), "zeros")]
    return spec


def param_count(config: RunConfig) -> int:
    """Closed-form parameter count."""
    d, dff, v = config.d, config.d_ff, config.vocab
    per_layer = 4 * d * d + config.n_relations * config.d_head + 2 * d * dff + dff + d + 4 * d
    out = v if config.mode == CAUSAL else config.n_classes
    return v * d + config.layers * per_layer + d * out + out


def init_params(config: RunConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    return nc.init_params(param_spec(config), config.seed if seed is None else seed, config.dtype)


def layer_params(params: dict, i: int) -> dict:
    p = f"layer{i}."
    return {key[len(p):]: val for key, val in params.items() if key.startswith(p)}


def _check_graph(graph: BpGraph, config: RunConfig) -> None:
    if graph.mode != config.mode:
        raise ConfigError(f"graph mode {graph.mode} does not match config mode {config.mode}")
    if graph.shape.n_padded > config.n_padded or graph.k > config.k:
        raise ConfigError("graph is larger than the configured n_max / k allow")


def init_states(tokens: np.ndarray, emb: np.ndarray, shape: TreeShape) -> np.ndarray:
    """Initial node states: token rows from ``emb`` (PAD is zero), span rows zero."""
    tokens = np.atleast_2d(np.asarray(tokens))
    batch, n = tokens.shape
    if n > shape.n_padded:
        raise InvalidInputError(f"{n} tokens do not fit a tree of {shape.n_padded} leaves")
    if np.any(tokens < 0) or np.any(tokens >= emb.shape[0]):
        raise VocabularyError("token id outside the embedding table")
    h = np.zeros((batch, shape.n_nodes, emb.shape[1]), dtype=emb.dtype)
    h[:, :n] = emb[tokens]
    h[:, :n][tokens == PAD_ID] = 0.0
    return h


def pad_tokens(tokens: np.ndarray, n_padded: int) -> np.ndarray:
    tokens = np.atleast_2d(np.asarray(tokens))
    if tokens.shape[1] > n_padded:
        raise InvalidInputError("sequence longer than the tree")
    out = np.full((tokens.shape[0], n_padded), PAD_ID, dtype=np.int64)
    out[:, : tokens.shape[1]] = tokens
    return out


@dataclass
class ForwardCache:
    tokens: np.ndarray
    emb_scale: np.ndarray | None
    layers: list


def forward(
    tokens: np.ndarray,
    params: dict,
    graph: BpGraph,
    config: RunConfig,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run every layer over all nodes; dropout is active only when ``rng`` is given."""
    _check_graph(graph, config)
    p_i, p_h, p_a, _ = config.dropout_rates()
    tokens = pad_tokens(tokens, graph.shape.n_padded)
    h = init_states(tokens, params["emb"], graph.shape)
    h, emb_scale = nc.dropout(h, p_i, rng)
    layers = []
    for i in range(config.layers):
        lp = layer_params(params, i)
        attn, trace = gsa_forward(
            graph, h, {k: lp[k] for k in LAYER_KEYS}, config.heads, config.levels, config.k, p_a, rng
        )
        attn, s1 = nc.dropout(attn, p_h, rng)
        z, ln1 = nc.layer_norm(h + attn, lp["ln1_g"], lp["ln1_b"])
        f, ffn_cache = nc.ffn(z, lp["w1"], lp["b1"], lp["w2"], lp["b2"])
        f, s2 = nc.dropout(f, p_h, rng)
        h, ln2 = nc.layer_norm(z + f, lp["ln2_g"], lp["ln2_b"])
        layers.append((trace, s1, ln1, ffn_cache, s2, ln2))
    return h, ForwardCache(tokens, emb_scale, layers)


def backward(dh: np.ndarray, params: dict, cache: ForwardCache, config: RunConfig) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(config.layers)):
        trace, s1, ln1, ffn_cache, s2, ln2 = cache.layers[i]
        p = f"layer{i}."
        dsum, grads[p + "ln2_g"], grads[p + "ln2_b"] = nc.layer_norm_grad(dh, ln2)
        df = dsum if s2 is None else dsum * s2
        dz, fg = nc.ffn_grad(df, ffn_cache)
        for key, val in fg.items():
            grads[p + key] = val
        dz = dz + dsum
        dsum, grads[p + "ln1_g"], grads[p + "ln1_b"] = nc.layer_norm_grad(dz, ln1)
        da = dsum if s1 is None else dsum * s1
        dprev, ag = gsa_backward(trace, da)
        for key, val in ag.items():
            grads[p + key] = val
        dh = dprev + dsum
    if cache.emb_scale is not None:
        dh = dh * cache.emb_scale
    tokens = cache.tokens
    n = tokens.shape[1]
    dtok = dh[:, :n].reshape(-1, dh.shape[-1])
    flat = tokens.reshape(-1)
    keep = flat != PAD_ID
    demb = np.zeros_like(params["emb"])
    np.add.at(demb, flat[keep], dtok[keep])
    grads["emb"] = demb
    return {name: grads[name] for name in params if name in grads}


def lm_logits(states: np.ndarray, params: dict, graph: BpGraph) -> np.ndarray:
    """Per-position vocabulary logits; position t scores the token at t+1."""
    if graph.mode != CAUSAL or "lm_w" not in params:
        raise ConfigError("language-model logits need a causal graph and an LM head")
    return states[:, : graph.shape.n_padded] @ params["lm_w"] + params["lm_b"]


def cls_logits(
    states: np.ndarray,
    params: dict,
    graph: BpGraph,
    p_c: float = 0.0,
    rng: np.random.Generator | None = None,
):
    """Class logits from the root node; returns ``(logits, root_features, dropout_scale)``."""
    if graph.mode != BIDIRECTIONAL or "cls_w" not in params:
        raise ConfigError("classification logits need a bidirectional graph and a classifier head")
    root, scale = nc.dropout(states[:, graph.shape.root], p_c, rng)
    return root @ params["cls_w"] + params["cls_b"], root, scale


def lm_targets(tokens: np.ndarray, next_tokens: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Shift-by-one targets and loss mask for a batch of token rows.

    ``next_tokens`` gives the token following each row (end-of-sequence when
    absent). Targets at PAD positions are masked out.
    """
    tokens = np.atleast_2d(np.asarray(tokens))
    targets = np.empty_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    targets[:, -1] = EOS_ID if next_tokens is None else next_tokens
    targets = np.where(targets == PAD_ID, EOS_ID, targets)
    # the element after the last real token is end-of-sequence
    mask = tokens != PAD_ID
    return targets, mask


@dataclass
class Batch:
    tokens: np.ndarray
    targets: np.ndarray | None = None
    mask: np.ndarray | None = None
    labels: np.ndarray | None = None


def loss_and_grads(
    batch: Batch,
    params: dict,
    graph: BpGraph,
    config: RunConfig,
    rng: np.random.Generator | None = None,
    need_grads: bool = True,
):
    """Mean loss in nats and gradients for every parameter."""
    states, cache = forward(batch.tokens, params, graph, config, rng)
    dstates = np.zeros_like(states)
    grads: dict[str, np.ndarray] = {}
    if config.mode == CAUSAL:
        n = graph.shape.n_padded
        logits = lm_logits(states, params, graph)
        targets = pad_tokens(batch.targets, n)
        mask = np.zeros(targets.shape, dtype=bool)
        mask[:, : batch.mask.shape[1]] = batch.mask
        loss, dlogits = nc.cross_entropy(logits, targets, mask)
        if need_grads:
            dtok, grads["lm_w"] = nc.matmul_grad(states[:, :n], params["lm_w"], dlogits)
            grads["lm_b"] = dlogits.reshape(-1, dlogits.shape[-1]).sum(axis=0)
            dstates[:, :n] = dtok
    else:
        p_c = config.dropout_rates()[3]
        logits, root, scale = cls_logits(states, params, graph, p_c, rng)
        loss, dlogits = nc.cross_entropy(logits, batch.labels)
        if need_grads:
            droot, grads["cls_w"] = nc.matmul_grad(root, params["cls_w"], dlogits)
            grads["cls_b"] = dlogits.sum(axis=0)
            dstates[:, graph.shape.root] = droot if scale is None else droot * scale
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    if not need_grads:
        return loss, None
    grads.update(backward(dstates, params, cache, config))
    return loss, {name: grads[name] for name in params}


def dense_reference_forward(tokens: np.ndarray, params: dict, config: RunConfig) -> np.ndarray:
    """Vanilla Transformer stack over tokens only, with full attention and no relation terms.

    Uses the same per-layer weights as the graph model, so it serves as an
    equivalence and throughput oracle.
    """
    tokens = np.atleast_2d(np.asarray(tokens))
    emb = params["emb"]
    h = emb[tokens]
    h[tokens == PAD_ID] = 0.0
    batch, n, d = h.shape
    nh, dh = config.heads, config.d_head
    for i in range(config.layers):
        lp = layer_params(params, i)
        q = nc.matmul(h, lp["wq"]).reshape(batch, n, nh, dh).transpose(0, 2, 1, 3)
        k = nc.matmul(h, lp["wk"]).reshape(batch, n, nh, dh).transpose(0, 2, 1, 3)
        v = nc.matmul(h, lp["wv"]).reshape(batch, n, nh, dh).transpose(0, 2, 1, 3)
        probs = nc.softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh), axis=-1)
        heads = (probs @ v).transpose(0, 2, 1, 3).reshape(batch, n, d)
        z, _ = nc.layer_norm(h + nc.matmul(heads, lp["wo"]), lp["ln1_g"], lp["ln1_b"])
        f, _ = nc.ffn(z, lp["w1"], lp["b1"], lp["w2"], lp["b2"])
        h, _ = nc.layer_norm(z + f, lp["ln2_g"], lp["ln2_b"])
    return h
