"""Throughput and edge-count comparison of the sparse graph model against dense attention."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from bpt.config import RunConfig
from bpt.graph import BIDIRECTIONAL, build_graph
from bpt.model import N_SPECIAL, dense_reference_forward, forward, init_params

COLUMNS = ("length", "edges", "dense_edges", "sparse_tok_s", "dense_tok_s")


@dataclass
class BenchRow:
    length: int
    edges: int
    dense_edges: int
    sparse_tok_s: float | None
    dense_tok_s: float | None

    def tsv(self) -> str:
        def rate(x):
            return "NA" if x is None else f"{x:.1f}"

        return f"{self.length}\t{self.edges}\t{self.dense_edges}\t{rate(self.sparse_tok_s)}\t{rate(self.dense_tok_s)}"


def _best_time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(
    config: RunConfig,
    lengths: list[int],
    token_budget: int = 4096,
    repeats: int = 3,
    timed: bool = True,
) -> list[BenchRow]:
    """One row per length: graph edges, dense n^2, and forward tokens/sec for both paths.

    Every length runs with ``token_budget // length`` sequences per batch. A
    length that exhausts memory is reported with ``NA`` rates.
    """
    for n in lengths:
        if n < 1 or n & (n - 1):
            raise ValueError(f"bench lengths must be powers of two, got {n}")
    cfg = config.replace(mode=BIDIRECTIONAL, n_max=max(lengths), vocab=max(config.vocab, N_SPECIAL + 61))
    params = init_params(cfg)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for n in lengths:
        graph = build_graph(n, cfg.k, BIDIRECTIONAL)
        sparse_rate = dense_rate = None
        if timed:
            batch = max(1, token_budget // n)
            tokens = rng.integers(N_SPECIAL, cfg.vocab, size=(batch, n))
            try:
                t = _best_time(lambda: forward(tokens, params, graph, cfg), repeats)
                sparse_rate = batch * n / t
            except MemoryError:
                pass
            try:
                t = _best_time(lambda: dense_reference_forward(tokens, params, cfg), repeats)
                dense_rate = batch * n / t
            except MemoryError:
                pass
        rows.append(BenchRow(n, graph.n_edges, n * n, sparse_rate, dense_rate))
    return rows


def bench_tsv(rows: list[BenchRow]) -> str:
    return "\n".join(["\t".join(COLUMNS)] + [r.tsv() for r in rows]) + "\n"
