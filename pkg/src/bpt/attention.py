"""Multi-head graph self-attention over a :class:`~bpt.graph.BpGraph`.

Node states arrive as ``(batch, nodes, d)``. Internally everything is kept
node-major, ``(nodes, batch, ...)``, so per-edge gathers and per-destination
reductions work on axis 0 of the CSR edge arrays.

Logit for edge ``v -> u`` in head ``i``::

    q_i(u) . (k_i(v) + r[rel(v, u)]) / sqrt(d / h)

The relation vector has the per-head width and is shared by every head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from bpt.errors import InvalidInputError, ShapeError
from bpt.graph import BpGraph
from bpt.numeric import Scatter, Segments, dropout, segment_softmax, segment_softmax_grad

LAYER_KEYS = ("wq", "wk", "wv", "wo", "rel")


@dataclass
class AttentionTrace:
    """Per-edge weights ``(edges, batch, heads)`` plus what backward needs."""

    weights: np.ndarray
    lse: np.ndarray
    graph: BpGraph
    n_heads: int
    h_in: np.ndarray
    q_e: np.ndarray
    kr_e: np.ndarray
    v_e: np.ndarray
    rel_idx: np.ndarray
    heads: np.ndarray
    drop_scale: np.ndarray | None
    params: dict

    def to_json(self, batch: int = 0) -> dict:
        """Edge id -> per-head weight, for inspection."""
        return {str(e): self.weights[e, batch].tolist() for e in range(self.weights.shape[0])}


def _segments(graph: BpGraph) -> Segments:
    seg = graph._cache.get("segments")
    if seg is None:
        seg = graph._cache["segments"] = Segments(graph.offsets)
    return seg


def _by_source(graph: BpGraph) -> Scatter:
    sc = graph._cache.get("by_source")
    if sc is None:
        sc = graph._cache["by_source"] = Scatter(graph.src, graph.n_nodes)
    return sc


def gsa_forward(
    graph: BpGraph,
    h: np.ndarray,
    params: dict,
    n_heads: int,
    table_levels: int | None = None,
    table_k: int | None = None,
    p_attn: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, AttentionTrace]:
    """Graph self-attention; returns ``(out, trace)`` with ``out`` shaped like ``h``.

    ``table_levels``/``table_k`` describe how the relation table in
    ``params["rel"]`` was sized; they default to the graph's own values.
    """
    squeeze = h.ndim == 2
    if squeeze:
        h = h[None]
    batch, n_nodes, d = h.shape
    if n_nodes != graph.n_nodes:
        raise ShapeError(f"state has {n_nodes} rows, graph has {graph.n_nodes} nodes")
    if d % n_heads:
        raise ShapeError(f"model width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    rel_idx = graph.relation_indices(table_levels or graph.shape.levels, table_k or graph.k)
    rel = params["rel"]
    if rel.shape[1] != dh or (len(rel_idx) and rel_idx.max() >= rel.shape[0]):
        raise ShapeError(f"relation table {rel.shape} does not match head width {dh}")
    seg = _segments(graph)

    hn = np.ascontiguousarray(h.transpose(1, 0, 2))
    q = (hn @ params["wq"]).reshape(n_nodes, batch, n_heads, dh)
    k = (hn @ params["wk"]).reshape(n_nodes, batch, n_heads, dh)
    v = (hn @ params["wv"]).reshape(n_nodes, batch, n_heads, dh)

    q_e = q[graph.dst]
    kr_e = k[graph.src] + rel[rel_idx][:, None, None, :]
    v_e = v[graph.src]
    logits = np.einsum("ebhc,ebhc->ebh", q_e, kr_e) / math.sqrt(dh)
    weights, lse = segment_softmax(logits, seg)
    used, scale = dropout(weights, p_attn, rng)
    heads = seg.sum(used[..., None] * v_e).reshape(n_nodes, batch, d)
    out = (heads @ params["wo"]).transpose(1, 0, 2)
    trace = AttentionTrace(weights, lse, graph, n_heads, hn, q_e, kr_e, v_e, rel_idx, heads, scale, params)
    return (out[0] if squeeze else out), trace


def gsa_backward(trace: AttentionTrace, dout: np.ndarray) -> tuple[np.ndarray, dict]:
    """Gradients of the forward map recorded in ``trace``; returns ``(dh, dparams)``."""
    squeeze = dout.ndim == 2
    if squeeze:
        dout = dout[None]
    graph, params = trace.graph, trace.params
    n_nodes, batch, d = trace.h_in.shape
    if dout.shape != (batch, n_nodes, d):
        raise InvalidInputError(f"upstream gradient {dout.shape} does not match trace {(batch, n_nodes, d)}")
    n_heads = trace.n_heads
    dh = d // n_heads
    seg = _segments(graph)

    dn = dout.transpose(1, 0, 2)
    dwo = trace.heads.reshape(-1, d).T @ dn.reshape(-1, d)
    dheads = (dn @ params["wo"].T).reshape(n_nodes, batch, n_heads, dh)

    dheads_e = dheads[graph.dst]
    dw = np.einsum("ebhc,ebhc->ebh", dheads_e, trace.v_e)
    used = trace.weights if trace.drop_scale is None else trace.weights * trace.drop_scale
    dv_e = used[..., None] * dheads_e
    if trace.drop_scale is not None:
        dw = dw * trace.drop_scale
    dlogits = segment_softmax_grad(trace.weights, dw, seg) / math.sqrt(dh)

    dq = seg.sum(dlogits[..., None] * trace.kr_e)
    dkr_e = dlogits[..., None] * trace.q_e
    by_src = _by_source(graph)
    dk = by_src.sum(dkr_e)
    dv = by_src.sum(dv_e)
    drel = Scatter(trace.rel_idx, params["rel"].shape[0]).sum(dkr_e.sum(axis=(1, 2)))

    dq = dq.reshape(n_nodes, batch, d)
    dk = dk.reshape(n_nodes, batch, d)
    dv = dv.reshape(n_nodes, batch, d)
    hflat = trace.h_in.reshape(-1, d)
    grads = {
        "wq": hflat.T @ dq.reshape(-1, d),
        "wk": hflat.T @ dk.reshape(-1, d),
        "wv": hflat.T @ dv.reshape(-1, d),
        "wo": dwo,
        "rel": drel,
    }
    dhn = dq @ params["wq"].T + dk @ params["wk"].T + dv @ params["wv"].T
    dh_out = dhn.transpose(1, 0, 2)
    return (dh_out[0] if squeeze else dh_out), grads


def attention_degree(graph: BpGraph) -> dict[str, float]:
    """Min/mean/max in-degree over token nodes."""
    tok = graph.in_degree()[: graph.shape.n_padded]
    return {"min": int(tok.min()), "mean": float(tok.mean()), "max": int(tok.max())}
