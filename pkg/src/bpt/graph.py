"""Binary-partition tree and the directed attention graph built over it.

Nodes are numbered level by level: the ``n_padded`` token leaves first
(ids ``0 .. n_padded-1``), then level 1, and so on up to the root, whose id
is ``2 * n_padded - 2``. Node ``(l, m)`` spans tokens ``[m * 2**l, (m+1) * 2**l)``.

Edges are stored destination-major (CSR): ``src[offsets[u]:offsets[u+1]]``
are the predecessors of node ``u``, each tagged with a :class:`Relation`.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from bpt.errors import ConfigError, InvalidInputError

CAUSAL = "causal"
BIDIRECTIONAL = "bidirectional"
_MODE_ALIASES = {
    "causal": CAUSAL,
    "lm": CAUSAL,
    "bi": BIDIRECTIONAL,
    "bidir": BIDIRECTIONAL,
    "bidirectional": BIDIRECTIONAL,
}

LEFT = "left"
RIGHT = "right"


def normalize_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode]
    except KeyError:
        raise InvalidInputError(f"unknown graph mode {mode!r}") from None


class Relation(NamedTuple):
    """Symbolic edge label.

    ``kind`` is one of ``self``, ``left``, ``right`` or ``anc``. Context labels
    carry the level they were collected at and their 1-based join order at
    that level; ancestor labels carry the level of the span node.
    """

    kind: str
    level: int = 0
    join: int = 0

    def __str__(self) -> str:
        if self.kind == "self":
            return "self"
        if self.kind == "anc":
            return f"anc:{self.level}"
        return f"{self.kind}:{self.level}:{self.join}"

    @classmethod
    def parse(cls, text: str) -> "Relation":
        parts = text.split(":")
        try:
            if parts == ["self"]:
                return SELF
            if parts[0] == "anc" and len(parts) == 2:
                return anc(int(parts[1]))
            if parts[0] in (LEFT, RIGHT) and len(parts) == 3:
                return ctx(parts[0], int(parts[1]), int(parts[2]))
        except ValueError:
            pass
        raise InvalidInputError(f"malformed relation label {text!r}")


SELF = Relation("self")


def ctx(side: str, level: int, join: int) -> Relation:
    return Relation(side, level, join)


def anc(level: int) -> Relation:
    return Relation("anc", level)


def n_relations(levels: int, k: int) -> int:
    """Size of the relation table for a tree with ``levels`` levels and density ``k``."""
    return 1 + 2 * (k + 1) * (levels - 1) + (levels - 1)


def relation_index(rel: Relation, levels: int, k: int) -> int:
    """Row of ``rel`` in a relation table sized by :func:`n_relations`."""
    n_ctx = levels - 1
    if rel.kind == "self":
        return 0
    if rel.kind in (LEFT, RIGHT):
        if not (0 <= rel.level < n_ctx and 1 <= rel.join <= k + 1):
            raise ConfigError(f"relation {rel} does not fit a table for levels={levels}, k={k}")
        side_offset = 0 if rel.kind == LEFT else n_ctx * (k + 1)
        return 1 + side_offset + rel.level * (k + 1) + rel.join - 1
    if rel.kind == "anc":
        if not 1 <= rel.level < levels:
            raise ConfigError(f"relation {rel} does not fit a table for levels={levels}")
        return 1 + 2 * n_ctx * (k + 1) + rel.level - 1
    raise ConfigError(f"unknown relation kind {rel.kind!r}")


@dataclass(frozen=True)
class TreeShape:
    """Perfect binary tree over a sequence right-padded to a power of two."""

    n_tokens: int
    n_padded: int

    @property
    def levels(self) -> int:
        return self.n_padded.bit_length()

    @property
    def n_nodes(self) -> int:
        return 2 * self.n_padded - 1

    @property
    def root(self) -> int:
        return self.n_nodes - 1

    @property
    def n_pad(self) -> int:
        return self.n_padded - self.n_tokens

    def level_size(self, level: int) -> int:
        if not 0 <= level < self.levels:
            raise InvalidInputError(f"level {level} outside [0, {self.levels})")
        return self.n_padded >> level

    def level_offset(self, level: int) -> int:
        return 2 * self.n_padded - 2 * (self.n_padded >> level)

    def node_id(self, level: int, index: int) -> int:
        if not 0 <= index < self.level_size(level):
            raise InvalidInputError(f"node ({level}, {index}) not in tree of {self.n_padded} leaves")
        return self.level_offset(level) + index

    def node_at(self, node_id: int) -> tuple[int, int]:
        if not 0 <= node_id < self.n_nodes:
            raise InvalidInputError(f"node id {node_id} not in [0, {self.n_nodes})")
        level = 0
        while node_id >= self.level_offset(level + 1) and level + 1 < self.levels:
            level += 1
        return level, node_id - self.level_offset(level)

    def is_pad(self, node_id: int) -> bool:
        return node_id < self.n_padded and node_id >= self.n_tokens

    def parent(self, node: tuple[int, int]) -> tuple[int, int] | None:
        level, index = node
        self.node_id(level, index)
        if level == self.levels - 1:
            return None
        return level + 1, index // 2

    def span_range(self, node: tuple[int, int]) -> range:
        level, index = node
        self.node_id(level, index)
        return range(index << level, (index + 1) << level)


def build_tree(n_tokens: int) -> TreeShape:
    if n_tokens < 1:
        raise InvalidInputError("n_tokens must be >= 1")
    n_padded = 1 << (n_tokens - 1).bit_length()
    return TreeShape(n_tokens, n_padded)


def parent(node: tuple[int, int], shape: TreeShape) -> tuple[int, int] | None:
    return shape.parent(node)


def span_range(node: tuple[int, int], shape: TreeShape) -> range:
    return shape.span_range(node)


def contextual_nodes(i: int, k: int, shape: TreeShape, side: str) -> list[tuple[tuple[int, int], Relation]]:
    """Fine-to-coarse context of token ``i`` on one side, in join order.

    At each level up to ``k`` neighbours are taken; if the first uncovered
    index is then misaligned with its parent boundary, one extra node closes
    the gap so the next level starts on a whole parent.
    """
    if not 0 <= i < shape.n_padded:
        raise InvalidInputError(f"token index {i} not in [0, {shape.n_padded})")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    out: list[tuple[tuple[int, int], Relation]] = []
    if side == RIGHT:
        p = i + 1
        for level in range(shape.levels):
            width = shape.n_padded >> level
            if p >= width:
                break
            stop = min(p + k, width)
            nxt = stop
            if nxt % 2 == 1 and nxt < width:
                nxt += 1
            for join, m in enumerate(range(p, nxt), start=1):
                out.append(((level, m), ctx(RIGHT, level, join)))
            p = nxt // 2
    elif side == LEFT:
        q = i - 1
        for level in range(shape.levels):
            if q < 0:
                break
            leftmost = max(q - k + 1, 0)
            if leftmost % 2 == 1:
                leftmost -= 1
            for join, m in enumerate(range(q, leftmost - 1, -1), start=1):
                out.append(((level, m), ctx(LEFT, level, join)))
            q = leftmost // 2 - 1
    else:
        raise InvalidInputError(f"side must be 'left' or 'right', got {side!r}")
    return out


@dataclass(frozen=True, eq=False)
class BpGraph:
    """Immutable CSR attention graph; see the module docstring for layout."""

    shape: TreeShape
    k: int
    mode: str
    src: np.ndarray
    dst: np.ndarray
    relations: tuple[Relation, ...]
    offsets: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        for arr in (self.src, self.dst, self.offsets):
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.shape.n_nodes

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def preds(self, node: int) -> list[tuple[int, Relation]]:
        lo, hi = self.offsets[node], self.offsets[node + 1]
        return [(int(self.src[e]), self.relations[e]) for e in range(lo, hi)]

    def in_degree(self) -> np.ndarray:
        return np.diff(self.offsets)

    def edge_counts(self) -> dict[str, int]:
        counts = {"self": 0, "anc": 0, "left": 0, "right": 0}
        for rel in self.relations:
            counts[rel.kind] += 1
        return counts

    def degree_stats(self) -> dict[str, float]:
        tok = self.in_degree()[: self.shape.n_padded]
        return {
            "min": int(tok.min()),
            "mean": float(tok.mean()),
            "max": int(tok.max()),
            "edges": self.n_edges,
        }

    def relation_indices(self, levels: int, k: int) -> np.ndarray:
        """Relation table rows per edge, for a table sized by ``(levels, k)``."""
        key = ("rel", levels, k)
        if key not in self._cache:
            idx = np.array([relation_index(r, levels, k) for r in self.relations], dtype=np.intp)
            idx.setflags(write=False)
            self._cache[key] = idx
        return self._cache[key]

    def segment_starts(self) -> np.ndarray:
        return self.offsets[:-1]

    def edges(self) -> Iterator[tuple[int, int, Relation]]:
        for s, d, r in zip(self.src.tolist(), self.dst.tolist(), self.relations):
            yield s, d, r

    def permuted(self, rng: np.random.Generator) -> "BpGraph":
        """Same graph with predecessor order shuffled inside every destination segment."""
        perm = np.concatenate(
            [lo + rng.permutation(hi - lo) for lo, hi in zip(self.offsets[:-1], self.offsets[1:])]
        )
        return BpGraph(
            self.shape,
            self.k,
            self.mode,
            self.src[perm].copy(),
            self.dst[perm].copy(),
            tuple(self.relations[e] for e in perm),
            self.offsets.copy(),
        )

    def same_as(self, other: "BpGraph") -> bool:
        return (
            self.shape == other.shape
            and self.k == other.k
            and self.mode == other.mode
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.offsets, other.offsets)
            and self.relations == other.relations
        )


def _from_pred_lists(shape: TreeShape, k: int, mode: str, preds: list[list[tuple[int, Relation]]]) -> BpGraph:
    src = np.fromiter((s for p in preds for s, _ in p), dtype=np.intp)
    dst = np.repeat(np.arange(len(preds), dtype=np.intp), [len(p) for p in preds])
    rels = tuple(r for p in preds for _, r in p)
    offsets = np.concatenate([[0], np.cumsum([len(p) for p in preds])]).astype(np.intp)
    return BpGraph(shape, k, mode, src, dst, rels, offsets)


@functools.lru_cache(maxsize=64)
def build_graph(n_tokens: int, k: int, mode: str = BIDIRECTIONAL) -> BpGraph:
    """Build the attention graph. Results are cached; graphs are immutable."""
    mode = normalize_mode(mode)
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    shape = build_tree(n_tokens)
    n = shape.n_padded
    preds: list[list[tuple[int, Relation]]] = []
    for i in range(n):
        plist = [(i, SELF)]
        sides = (LEFT, RIGHT) if mode == BIDIRECTIONAL else (LEFT,)
        for side in sides:
            for (level, m), rel in contextual_nodes(i, k, shape, side):
                plist.append((shape.node_id(level, m), rel))
        preds.append(plist)
    for level in range(1, shape.levels):
        for m in range(shape.level_size(level)):
            node = shape.node_id(level, m)
            plist = [(node, SELF)]
            plist.extend((t, anc(level)) for t in range(m << level, (m + 1) << level))
            preds.append(plist)
    return _from_pred_lists(shape, k, mode, preds)


# --- independent walk used to cross-check build_graph -------------------------
#
# Nodes are addressed heap-style here: root = 1, children of x are 2x and 2x+1,
# leaves are n_padded .. 2*n_padded-1. Moving left/right is +-1 within a level.


def _walk_side(leaf: int, n: int, k: int, step: int) -> list[tuple[int, int, int]]:
    """Pointer walk from one leaf; returns (heap id, level, join order)."""
    found = []
    level = 0
    x = leaf + step
    while True:
        lo, hi = n >> level, 2 * (n >> level)
        if not lo <= x < hi:
            break
        join = 0
        for _ in range(k):
            if not lo <= x < hi:
                break
            join += 1
            found.append((x, level, join))
            x += step
        # an odd boundary would make the parent overlap what is already covered
        misaligned = (x % 2 == 1) if step > 0 else (x % 2 == 0)
        if lo <= x < hi and misaligned:
            join += 1
            found.append((x, level, join))
            x += step
        x //= 2
        level += 1
    return found


def oracle_edges(n_tokens: int, k: int, mode: str = BIDIRECTIONAL) -> set[tuple[int, int, Relation]]:
    """Edge set by brute-force enumeration, independent of :func:`build_graph`."""
    mode = normalize_mode(mode)
    n = 1
    while n < n_tokens:
        n *= 2

    def flat(heap_id: int) -> int:
        level = n.bit_length() - heap_id.bit_length()
        first = n >> level
        return (2 * n - 2 * first) + heap_id - first

    edges = set()
    for x in range(1, 2 * n):
        edges.add((flat(x), flat(x), SELF))
    for t in range(n):
        leaf = n + t
        x, level = leaf // 2, 1
        while x >= 1:
            edges.add((t, flat(x), anc(level)))
            x //= 2
            level += 1
        sides = [(LEFT, -1), (RIGHT, 1)] if mode == BIDIRECTIONAL else [(LEFT, -1)]
        for side, step in sides:
            for x, level, join in _walk_side(leaf, n, k, step):
                edges.add((flat(x), t, ctx(side, level, join)))
    return edges


def count_edges_oracle(n_tokens: int, k: int, mode: str = BIDIRECTIONAL) -> dict[str, int]:
    counts = {"self": 0, "anc": 0, "left": 0, "right": 0}
    for _, _, rel in oracle_edges(n_tokens, k, mode):
        counts[rel.kind] += 1
    return counts


# --- serialization -------------------------------------------------------------


def export_graph(graph: BpGraph, fmt: str) -> bytes:
    if fmt == "json":
        shape = graph.shape
        nodes = []
        for node_id in range(shape.n_nodes):
            level, index = shape.node_at(node_id)
            nodes.append({"id": node_id, "level": level, "index": index, "is_pad": shape.is_pad(node_id)})
        doc = {
            "n_tokens": shape.n_tokens,
            "n_padded": shape.n_padded,
            "k": graph.k,
            "mode": graph.mode,
            "nodes": nodes,
            "edges": [{"src": s, "dst": d, "relation": str(r)} for s, d, r in graph.edges()],
        }
        return (json.dumps(doc, indent=1) + "\n").encode("utf-8")
    if fmt == "dot":
        lines = [f"digraph bpt {{  // n={graph.shape.n_padded} k={graph.k} mode={graph.mode}"]
        for node_id in range(graph.n_nodes):
            level, index = graph.shape.node_at(node_id)
            pad = ", style=dashed" if graph.shape.is_pad(node_id) else ""
            lines.append(f'  n{node_id} [label="{level},{index}"{pad}];')
        for s, d, r in graph.edges():
            lines.append(f'  n{s} -> n{d} [label="{r}"];')
        lines.append("}")
        return ("\n".join(lines) + "\n").encode("utf-8")
    raise InvalidInputError(f"unknown export format {fmt!r} (expected json or dot)")


def import_graph(data: bytes | str) -> BpGraph:
    """Rebuild a graph from its JSON export."""
    doc = json.loads(data)
    shape = TreeShape(doc["n_tokens"], doc["n_padded"])
    if len(doc["nodes"]) != shape.n_nodes:
        raise InvalidInputError("node count does not match n_padded")
    preds: list[list[tuple[int, Relation]]] = [[] for _ in range(shape.n_nodes)]
    last_dst = -1
    for e in doc["edges"]:
        if e["dst"] < last_dst:
            raise InvalidInputError("edges must be grouped by destination")
        last_dst = e["dst"]
        preds[e["dst"]].append((e["src"], Relation.parse(e["relation"])))
    return _from_pred_lists(shape, doc["k"], normalize_mode(doc["mode"]), preds)
