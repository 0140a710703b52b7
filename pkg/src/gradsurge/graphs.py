"""Synthetic node-typed graphs, motif labels, dataset splits and batching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, UsageError

N_NODE_TYPES = 4
MASK_TYPE = 4  # reserved input id for masked nodes
DEFAULT_FRACTIONS = (0.60, 0.15, 0.10, 0.15)


def adjacency_matrix(n_nodes: int, edges: Sequence[tuple[int, int]]) -> np.ndarray:
    adj = np.zeros((n_nodes, n_nodes), dtype=bool)
    for u, v in edges:
        adj[u, v] = adj[v, u] = True
    return adj


def has_triangle(adj: np.ndarray) -> bool:
    a = adj.astype(np.int64)
    return bool(((a @ a) * a).any())


def has_chordless_4cycle(adj: np.ndarray) -> bool:
    """True iff some 4 nodes induce exactly the cycle a-b-c-d-a.

    Such a cycle exists iff two non-adjacent nodes a, c have two common
    neighbours b, d that are themselves non-adjacent.
    """
    n = adj.shape[0]
    for a in range(n):
        for c in range(a + 1, n):
            if adj[a, c]:
                continue
            common = np.flatnonzero(adj[a] & adj[c])
            if common.size < 2:
                continue
            sub = adj[np.ix_(common, common)]
            # any off-diagonal zero means a non-adjacent pair (b, d)
            if (~sub).sum() > common.size:
                return True
    return False


def majority_type(node_types: Sequence[int]) -> int:
    """Most frequent node type; ties go to the smallest type id."""
    return int(np.bincount(np.asarray(node_types, dtype=np.int64), minlength=N_NODE_TYPES).argmax())


def label_rule(triangle: bool, node_types: Sequence[int]) -> int:
    """Planted target: (contains a triangle) XOR (majority node type is 0)."""
    return int(bool(triangle) != (majority_type(node_types) == 0))


@dataclass(frozen=True)
class SyntheticGraph:
    node_types: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    target_label: int
    motifs: tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        n = len(self.node_types)
        if any(t < 0 or t >= N_NODE_TYPES for t in self.node_types):
            raise UsageError(f"node types must lie in [0, {N_NODE_TYPES})")
        seen = set()
        for u, v in self.edges:
            if u == v:
                raise UsageError(f"self-loop at node {u}")
            if not (0 <= u < n and 0 <= v < n):
                raise UsageError(f"edge ({u}, {v}) out of range for {n} nodes")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise UsageError(f"duplicate edge {key}")
            seen.add(key)
        if self.target_label not in (0, 1):
            raise UsageError("target_label must be 0 or 1")

    @classmethod
    def build(cls, node_types: Sequence[int], edges: Iterable[Sequence[int]], target_label: int | None = None):
        """Create a graph, computing motif labels and (by default) the planted target label."""
        types = tuple(int(t) for t in node_types)
        es = tuple(sorted((min(int(u), int(v)), max(int(u), int(v))) for u, v in edges))
        adj = adjacency_matrix(len(types), es)
        tri = has_triangle(adj)
        motifs = (int(tri), int(has_chordless_4cycle(adj)))
        if target_label is None:
            target_label = label_rule(tri, types)
        return cls(types, es, int(target_label), motifs)

    @property
    def n_nodes(self) -> int:
        return len(self.node_types)

    def adjacency(self) -> np.ndarray:
        return adjacency_matrix(self.n_nodes, self.edges)

    def to_json(self) -> dict:
        return {
            "nodes": list(self.node_types),
            "edges": [list(e) for e in self.edges],
            "y": self.target_label,
            "motifs": list(self.motifs),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticGraph":
        return cls(
            tuple(obj["nodes"]),
            tuple(tuple(e) for e in obj["edges"]),
            int(obj["y"]),
            tuple(obj["motifs"]),
        )


def gen_dataset(
    seed: int,
    n_graphs: int,
    n_nodes_range: tuple[int, int] = (6, 16),
    edge_prob: float = 0.1,
) -> list[SyntheticGraph]:
    """Random node-typed graphs, half of them with a planted triangle.

    Node types are drawn from a type-0-heavy or a type-0-light distribution
    (chosen per graph with probability 1/2) so both halves of the XOR label
    rule are balanced.
    """
    lo, hi = n_nodes_range
    if not (4 <= lo <= hi <= 40):
        raise UsageError(f"n_nodes_range {n_nodes_range} must satisfy 4 <= lo <= hi <= 40")
    if not (0.0 < edge_prob < 1.0):
        raise UsageError(f"edge_prob {edge_prob} must lie in (0, 1)")
    if n_graphs < 1:
        raise UsageError("n_graphs must be positive")
    rng = np.random.default_rng(seed)
    heavy = np.array([0.55, 0.15, 0.15, 0.15])
    light = np.array([0.10, 0.30, 0.30, 0.30])
    graphs = []
    for _ in range(n_graphs):
        n = int(rng.integers(lo, hi + 1))
        types = rng.choice(N_NODE_TYPES, size=n, p=heavy if rng.random() < 0.5 else light)
        upper = np.triu(rng.random((n, n)) < edge_prob, k=1)
        edges = set(zip(*np.nonzero(upper)))
        if rng.random() < 0.5:
            a, b, c = sorted(rng.choice(n, size=3, replace=False))
            edges |= {(a, b), (a, c), (b, c)}
        graphs.append(SyntheticGraph.build(types, sorted(edges)))
    return graphs


@dataclass
class DatasetSplit:
    train: list[SyntheticGraph]
    aux_heldout: list[SyntheticGraph]
    valid: list[SyntheticGraph]
    test: list[SyntheticGraph]

    def sizes(self) -> tuple[int, int, int, int]:
        return len(self.train), len(self.aux_heldout), len(self.valid), len(self.test)


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [n * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(
    graphs: Sequence[SyntheticGraph], seed: int, fractions: Sequence[float] = DEFAULT_FRACTIONS
) -> DatasetSplit:
    """Seeded shuffle, then contiguous train / aux-heldout / valid / test slices.

    The default fractions make the aux-heldout split 20% of the
    train + aux-heldout pool.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 4 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise UsageError(f"fractions {fractions} must be four non-negative values summing to 1")
    order = np.random.default_rng(seed).permutation(len(graphs))
    counts = _largest_remainder(len(graphs), fractions)
    bounds = np.cumsum([0] + counts)
    parts = [[graphs[i] for i in order[bounds[j] : bounds[j + 1]]] for j in range(4)]
    return DatasetSplit(*parts)


class GraphBatch:
    """Disjoint union of a list of graphs, ready for the encoder."""

    def __init__(self, graphs: Sequence[SyntheticGraph]):
        if not graphs:
            raise UsageError("empty batch")
        if any(g.n_nodes == 0 for g in graphs):
            raise UsageError("graph with no nodes")
        self.graphs = list(graphs)
        sizes = np.array([g.n_nodes for g in graphs])
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.n_nodes = int(self.offsets[-1])
        self.node_types = np.concatenate([np.asarray(g.node_types, dtype=np.int64) for g in graphs])
        self.graph_of_node = np.repeat(np.arange(len(graphs)), sizes)
        rows, cols = [], []
        for g, off in zip(graphs, self.offsets):
            for u, v in g.edges:
                rows += [u + off, v + off]
                cols += [v + off, u + off]
        self.adjacency = sp.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(self.n_nodes, self.n_nodes)
        )
        self.pool = sp.csr_matrix(
            (1.0 / sizes[self.graph_of_node], (self.graph_of_node, np.arange(self.n_nodes))),
            shape=(len(graphs), self.n_nodes),
        )
        self.labels = np.array([g.target_label for g in graphs], dtype=np.float64)
        self.motifs = np.array([g.motifs for g in graphs], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.graphs)


def save_jsonl(graphs: Iterable[SyntheticGraph], path: str | Path) -> None:
    with open(path, "w") as fh:
        for g in graphs:
            fh.write(json.dumps(g.to_json(), separators=(",", ":")) + "\n")


def load_jsonl(path: str | Path) -> list[SyntheticGraph]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(SyntheticGraph.from_json(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ConfigError(f"{path}:{lineno}: malformed graph record ({exc})") from exc
    return out
