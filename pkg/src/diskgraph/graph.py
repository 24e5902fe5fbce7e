"""Proximity graph construction and the sampled in-memory navigation graph.

The builder makes two refinement passes (alpha = 1, then the configured
alpha) of greedy-search-then-prune over a seeded random node order, with
reverse-edge insertion and overflow pruning. Connectivity from the entry
node is verified afterwards and repaired by linking stranded components.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .dataio import VectorDataset
from .errors import IndexCorruptionError

DEFAULT_ALPHA = 1.2
DEFAULT_L_BUILD = 128
FILE_SENTINEL = 0xFFFFFFFF


@dataclass
class ProximityGraph:
    """Fixed-stride adjacency (R slots per node, -1 sentinel) plus entry node."""

    adjacency: np.ndarray  # (N, R) int32
    degrees: np.ndarray    # (N,) int32
    R: int
    entry_id: int
    L_build: int = DEFAULT_L_BUILD
    alpha: float = DEFAULT_ALPHA
    seed: int = 0

    @property
    def count(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, node: int) -> np.ndarray:
        return self.adjacency[node, : self.degrees[node]]

    def validate(self) -> None:
        """Raise if any ProximityGraph invariant is broken."""
        n = self.count
        for node in range(n):
            nbrs = self.neighbors(node)
            if len(nbrs) > self.R:
                raise IndexCorruptionError(f"node {node} exceeds degree cap {self.R}")
            if np.any(nbrs == node):
                raise IndexCorruptionError(f"node {node} has a self-loop")
            if len(np.unique(nbrs)) != len(nbrs):
                raise IndexCorruptionError(f"node {node} has duplicate neighbors")
            if len(nbrs) and (nbrs.min() < 0 or nbrs.max() >= n):
                raise IndexCorruptionError(f"node {node} references an invalid id")


def medoid_id(data: np.ndarray) -> int:
    """Index of the vector nearest the dataset mean (ties -> lowest id)."""
    mean = data.mean(axis=0, dtype=np.float64)
    d2 = np.sum((data.astype(np.float64) - mean) ** 2, axis=1)
    return int(np.argmin(d2))


def reachable_from(graph: ProximityGraph, start: int) -> np.ndarray:
    """Boolean mask of nodes reachable from start via directed BFS."""
    n = graph.count
    seen = np.zeros(n, dtype=bool)
    seen[start] = True
    frontier = np.array([start], dtype=np.int32)
    while frontier.size:
        nbrs = graph.adjacency[frontier].ravel()
        nbrs = nbrs[nbrs >= 0]
        nbrs = np.unique(nbrs)
        new = nbrs[~seen[nbrs]]
        seen[new] = True
        frontier = new
    return seen


def bfs_depths(graph: ProximityGraph, start: int) -> np.ndarray:
    """BFS depth per node from start; unreachable nodes get count (max+1)."""
    n = graph.count
    depth = np.full(n, n, dtype=np.int64)
    depth[start] = 0
    frontier = np.array([start], dtype=np.int32)
    level = 0
    while frontier.size:
        level += 1
        nbrs = graph.adjacency[frontier].ravel()
        nbrs = nbrs[nbrs >= 0]
        nbrs = np.unique(nbrs)
        new = nbrs[depth[nbrs] == n]
        depth[new] = level
        frontier = new.astype(np.int32)
    return depth


def robust_prune(
    node: int,
    candidate_ids: np.ndarray,
    candidate_dists: np.ndarray,
    data: np.ndarray,
    R: int,
    alpha: float,
) -> np.ndarray:
    """Prune candidates for one node; see _kernels.robust_prune for the rule."""
    ids = np.ascontiguousarray(candidate_ids, dtype=np.int32)
    dists = np.ascontiguousarray(candidate_dists, dtype=np.float32)
    out = np.empty(R, dtype=np.int32)
    kept = _kernels.robust_prune(
        np.ascontiguousarray(data, dtype=np.float32), node, ids, dists, len(ids), R, alpha, out
    )
    return out[:kept].copy()


def _repair_connectivity(graph: ProximityGraph, data: np.ndarray) -> int:
    """Link unreachable components until the whole graph hangs off entry_id.

    Each round links the nearest reachable node to the medoid of the
    unreachable set, preferring nodes with spare degree and otherwise
    evicting their farthest unprotected neighbor. Repair edges are
    protected from later eviction, so rounds strictly consume edge slots
    and the loop terminates. Returns the number of links added.
    """
    added = 0
    protected: dict[int, set[int]] = {}
    max_rounds = graph.count * graph.R + 10
    for _ in range(max_rounds):
        seen = reachable_from(graph, graph.entry_id)
        missing = np.nonzero(~seen)[0]
        if missing.size == 0:
            return added
        target = int(missing[medoid_id(data[missing])])
        reach_ids = np.nonzero(seen)[0]
        d2 = np.sum((data[reach_ids].astype(np.float64) - data[target]) ** 2, axis=1)
        spare = graph.degrees[reach_ids] < graph.R
        pick = -1
        if spare.any():
            pick = int(reach_ids[spare][int(np.argmin(d2[spare]))])
            graph.adjacency[pick, graph.degrees[pick]] = target
            graph.degrees[pick] += 1
        else:
            for u in reach_ids[np.argsort(d2, kind="stable")]:
                u = int(u)
                keep = protected.get(u, set())
                slots = [t for t in range(graph.degrees[u]) if int(graph.adjacency[u, t]) not in keep]
                if not slots:
                    continue
                nd = [float(np.sum((data[graph.adjacency[u, t]].astype(np.float64) - data[u]) ** 2)) for t in slots]
                graph.adjacency[u, slots[int(np.argmax(nd))]] = target
                pick = u
                break
            if pick < 0:
                raise IndexCorruptionError("connectivity repair ran out of edge slots")
        protected.setdefault(pick, set()).add(target)
        added += 1
    raise IndexCorruptionError("connectivity repair did not converge")


def build_graph(
    dataset: VectorDataset | np.ndarray,
    R: int,
    L_build: int = DEFAULT_L_BUILD,
    alpha: float = DEFAULT_ALPHA,
    seed: int = 0,
    repair: bool = True,
) -> ProximityGraph:
    """Two-pass graph build over a seeded random order.

    Requires R >= 2 and L_build >= R. The entry node is the medoid. For
    n <= R + 1 the result is the complete digraph minus self-loops.
    """
    data = dataset.data if isinstance(dataset, VectorDataset) else np.asarray(dataset, dtype=np.float32)
    data = np.ascontiguousarray(data, dtype=np.float32)
    n = data.shape[0]
    if n == 0:
        raise ValueError("cannot build a graph over an empty dataset")
    if R < 2:
        raise ValueError(f"R must be >= 2, got {R}")
    if L_build < R:
        raise ValueError(f"L_build ({L_build}) must be >= R ({R})")
    entry = medoid_id(data)
    adj = np.full((n, R), _kernels.SENTINEL, dtype=np.int32)
    deg = np.zeros(n, dtype=np.int32)
    graph = ProximityGraph(adj, deg, R, entry, L_build, alpha, seed)
    if n <= R + 1:
        for i in range(n):
            others = np.array([j for j in range(n) if j != i], dtype=np.int32)
            adj[i, : len(others)] = others
            deg[i] = len(others)
        return graph
    rng = np.random.default_rng(seed)
    order = rng.permutation(n).astype(np.int32)
    stamp = np.zeros(n, dtype=np.int64)
    stamp_val = _kernels.build_pass(data, adj, deg, order, entry, L_build, R, 1.0, stamp, 1)
    _kernels.build_pass(data, adj, deg, order, entry, L_build, R, float(alpha), stamp, stamp_val + 1)
    if repair:
        _repair_connectivity(graph, data)
    return graph


def greedy_search_graph(
    graph: ProximityGraph, data: np.ndarray, query: np.ndarray, L: int
) -> tuple[np.ndarray, np.ndarray]:
    """In-memory greedy search over a ProximityGraph; returns (ids, sq dists)."""
    q = np.ascontiguousarray(query, dtype=np.float32)
    stamp = np.zeros(graph.count, dtype=np.int64)
    return _kernels.search_topk(
        np.ascontiguousarray(data, dtype=np.float32),
        graph.adjacency, graph.degrees, graph.entry_id, q, L, stamp, 1
    )


@dataclass
class NavGraph:
    """Sampled in-memory entry graph used for traversal seeding."""

    node_ids: np.ndarray   # (S,) int32, global ids of sampled nodes
    vectors: np.ndarray    # (S, d) float32
    graph: ProximityGraph  # adjacency over sample-local ids
    rate: float

    def descend(self, query: np.ndarray, L_nav: int = 10) -> tuple[np.ndarray, np.ndarray]:
        """Greedy descent; returns the best L_nav (global ids, sq dists)."""
        local_ids, dists = greedy_search_graph(self.graph, self.vectors, query, max(L_nav, 1))
        take = min(L_nav, len(local_ids))
        return self.node_ids[local_ids[:take]], dists[:take]


def sample_entry_graph(
    graph: ProximityGraph,
    dataset: VectorDataset | np.ndarray,
    rate: float,
    seed: int = 0,
) -> NavGraph:
    """Sample ceil(rate * N) nodes and build a navigation graph over them."""
    if not (0 < rate <= 1):
        raise ValueError(f"sampling rate must be in (0, 1], got {rate}")
    data = dataset.data if isinstance(dataset, VectorDataset) else np.asarray(dataset, dtype=np.float32)
    n = data.shape[0]
    s = int(np.ceil(rate * n))
    rng = np.random.default_rng(seed)
    ids = np.sort(rng.choice(n, size=s, replace=False)).astype(np.int32)
    vecs = np.ascontiguousarray(data[ids], dtype=np.float32)
    if s == 1:
        sub = ProximityGraph(
            np.full((1, 1), _kernels.SENTINEL, dtype=np.int32),
            np.zeros(1, dtype=np.int32), 1, 0, graph.L_build, graph.alpha, seed,
        )
        return NavGraph(ids, vecs, sub, rate)
    r_nav = min(graph.R, s - 1)
    sub = build_graph(vecs, max(r_nav, 2), max(graph.L_build, max(r_nav, 2)), graph.alpha, seed)
    return NavGraph(ids, vecs, sub, rate)


def save_graph(path: str | Path, graph: ProximityGraph) -> None:
    """Header [u32 N][u32 R][u32 entry] + per node [u32 degree][R slot ids]."""
    n = graph.count
    with open(path, "wb") as f:
        np.array([n, graph.R, graph.entry_id], dtype="<u4").tofile(f)
        rec = np.empty((n, 1 + graph.R), dtype="<u4")
        rec[:, 0] = graph.degrees
        slots = graph.adjacency.astype("<i4").view("<u4")
        rec[:, 1:] = np.where(graph.adjacency >= 0, slots, FILE_SENTINEL)
        rec.tofile(f)


def load_graph(path: str | Path) -> ProximityGraph:
    raw = Path(path).read_bytes()
    n, R, entry = (int(v) for v in np.frombuffer(raw, dtype="<u4", count=3))
    rec = np.frombuffer(raw, dtype="<u4", offset=12).reshape(n, 1 + R)
    deg = rec[:, 0].astype(np.int32)
    adj = rec[:, 1:].copy()
    out = np.where(adj == FILE_SENTINEL, np.int64(_kernels.SENTINEL), adj.astype(np.int64)).astype(np.int32)
    return ProximityGraph(np.ascontiguousarray(out), deg, R, entry)
