"""Insertions and deletions: in-place page edits vs an in-memory delta.

In-place mode edits the page file directly (new entry write plus
read-modify-write of each back-edge neighbor page) and defers structural
cleanup of deletions to batched maintenance. Out-of-place mode absorbs
inserts into a memory-resident graph overlay that queries see immediately
and merges it into a freshly serialized base in one atomic swap.

Both modes serve searches through the regular page-based engine; deleted
ids are filtered from results from the moment the delete is acknowledged.
The update engine assumes a coupled layout and memory-resident pq codes.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .advisor import AdvisorInput
from .dataio import VectorDataset
from .errors import IndexCorruptionError
from .graph import ProximityGraph, build_graph, medoid_id
from .layout import FILE_SENTINEL, PAGE_HEADER, LayoutPlan, make_plan, serialize_pages
from .pq import PQCodebook, train_pq
from .search import SearchIndex, SearchParams, SearchResult, search
from .storage import BlockStore, LatencyModel, make_storage_plan

DEAD_ID = 0xFFFFFFFE


@dataclass
class UpdateConfig:
    R: int = 32
    L_build: int = 64
    alpha: float = 1.2
    page_size: int = 4096
    local_kind: str = "id"
    pq_m: int = 8
    pq_iters: int = 10
    merge_threshold: float = 0.10   # delta fraction of base that triggers a merge
    cleanup_batch: int = 1000       # queued deletions that trigger cleanup
    seed: int = 0


@dataclass
class MergeReport:
    duration_s: float
    pages_written: int
    merged_inserts: int
    removed_deletes: int


def _grow(arr: np.ndarray, rows: int) -> np.ndarray:
    out = np.zeros((rows,) + arr.shape[1:], dtype=arr.dtype)
    out[: len(arr)] = arr
    return out


class _Scratch:
    """Reusable numba buffers sized for one insert."""

    def __init__(self, L: int, R: int):
        cap = 4 * L + R + 8
        self.pool_ids = np.empty(L, dtype=np.int32)
        self.pool_dists = np.empty(L, dtype=np.float32)
        self.pool_exp = np.empty(L, dtype=np.bool_)
        self.exp_ids = np.empty(cap, dtype=np.int32)
        self.exp_dists = np.empty(cap, dtype=np.float32)
        self.cand_ids = np.empty(cap + R + 1, dtype=np.int32)
        self.cand_dists = np.empty(cap + R + 1, dtype=np.float32)
        self.out_ids = np.empty(R, dtype=np.int32)


class _GraphArrays:
    """Growable vector/adjacency mirror with a reverse-edge sidecar."""

    def __init__(self, vectors: np.ndarray, adjacency: np.ndarray, degrees: np.ndarray,
                 R: int, track_reverse: bool):
        self.n = len(vectors)
        self.R = R
        cap = max(self.n, 16)
        self.vectors = _grow(np.ascontiguousarray(vectors, dtype=np.float32), cap)
        self.adj = _grow(adjacency, cap)
        if self.n:
            self.adj[: self.n][adjacency < 0] = _kernels.SENTINEL
        self.deg = _grow(degrees, cap)
        self.stamp = np.zeros(cap, dtype=np.int64)
        self.stamp_val = 0
        self.in_nbrs: dict[int, set[int]] | None = None
        if track_reverse:
            self.in_nbrs = {}
            for u in range(self.n):
                for v in self.adj[u, : self.deg[u]]:
                    self.in_nbrs.setdefault(int(v), set()).add(u)

    def ensure(self, rows: int) -> None:
        if rows <= len(self.vectors):
            return
        cap = max(rows, 2 * len(self.vectors))
        self.vectors = _grow(self.vectors, cap)
        self.adj = _grow(self.adj, cap)
        self.deg = _grow(self.deg, cap)
        self.stamp = _grow(self.stamp, cap)

    def neighbors(self, node: int) -> np.ndarray:
        return self.adj[node, : self.deg[node]]

    def set_neighbors(self, node: int, nbrs: np.ndarray) -> None:
        if self.in_nbrs is not None:
            for v in self.neighbors(node):
                s = self.in_nbrs.get(int(v))
                if s is not None:
                    s.discard(node)
        k = len(nbrs)
        self.adj[node, :k] = nbrs
        self.adj[node, k :] = _kernels.SENTINEL
        self.deg[node] = k
        if self.in_nbrs is not None:
            for v in nbrs:
                self.in_nbrs.setdefault(int(v), set()).add(node)

    def greedy_candidates(self, q: np.ndarray, entry: int, L: int,
                          scratch: _Scratch) -> tuple[np.ndarray, np.ndarray]:
        self.stamp_val += 1
        _, n_exp = _kernels.greedy_search(
            self.vectors[: max(self.n, 1)], self.adj, self.deg, entry, q, L,
            self.stamp, self.stamp_val,
            scratch.pool_ids, scratch.pool_dists, scratch.pool_exp,
            scratch.exp_ids, scratch.exp_dists,
        )
        return scratch.exp_ids[:n_exp], scratch.exp_dists[:n_exp]

    def prune(self, node: int, cand_ids: np.ndarray, cand_dists: np.ndarray,
              alpha: float, scratch: _Scratch) -> np.ndarray:
        n = len(cand_ids)
        scratch.cand_ids[:n] = cand_ids
        scratch.cand_dists[:n] = cand_dists
        kept = _kernels.robust_prune(
            self.vectors, node, scratch.cand_ids, scratch.cand_dists, n,
            self.R, alpha, scratch.out_ids,
        )
        return scratch.out_ids[:kept].copy()


class UpdatableIndex:
    """A searchable index that accepts inserts and deletes.

    mode "in_place": page file edited on the write path, deletions queued
    for batched cleanup. mode "out_of_place": inserts land in a memory
    delta merged into a fresh base when it outgrows the threshold.
    """

    def __init__(self, dataset: VectorDataset, mode: str, config: UpdateConfig,
                 latency: LatencyModel | None = None, in_memory: bool = True,
                 directory: str | Path | None = None, auto_maintenance: bool = True):
        if mode not in ("in_place", "out_of_place"):
            raise ValueError(f"unknown update mode {mode!r}")
        self.mode = mode
        self.config = config
        self.latency = latency
        self.in_memory = in_memory
        self.directory = Path(directory) if directory else None
        self.auto_maintenance = auto_maintenance
        self.lock = threading.RLock()
        self.scratch = _Scratch(config.L_build, config.R)
        cfg = config
        self.dim = dataset.dim
        self.elem_type = dataset.elem_type
        if dataset.count > 0:
            graph = build_graph(dataset, cfg.R, cfg.L_build, cfg.alpha, cfg.seed)
            self.pq = train_pq(dataset, cfg.pq_m, iters=cfg.pq_iters, algo="elkan", seed=cfg.seed)
            codes = self.pq.encode(dataset)
            plan = make_plan(graph, dataset, cfg.page_size, "coupled", cfg.local_kind, seed=cfg.seed)
            primary, _ = serialize_pages(plan, graph, dataset, codes=codes)
            self.plan = plan
            self.store = self._new_store(primary, generation=0)
            self.base = _GraphArrays(dataset.data, graph.adjacency, graph.degrees,
                                     cfg.R, track_reverse=(mode == "in_place"))
            self.codes = _grow(codes, len(self.base.vectors))
            self.entry_id = graph.entry_id
        else:
            from .layout import entry_stride

            self.pq = None
            stride = entry_stride(self.dim, 4, cfg.R)
            self.plan = LayoutPlan(
                "coupled", cfg.local_kind, cfg.page_size,
                np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                0, cfg.R, self.dim, self.elem_type, 0,
                (cfg.page_size - PAGE_HEADER) // stride,
            )
            self.store = self._new_store(b"", generation=0)
            self.base = _GraphArrays(
                np.empty((0, self.dim), dtype=np.float32),
                np.empty((0, cfg.R), dtype=np.int32),
                np.empty(0, dtype=np.int32), cfg.R,
                track_reverse=(mode == "in_place"),
            )
            self.codes = np.zeros((len(self.base.vectors), cfg.pq_m), dtype=np.uint8)
            self.entry_id = -1
        self.tombstones: set[int] = set()
        self.delete_queue: list[int] = []
        self.free_slots: list[tuple[int, int]] = []
        self.generation = 0
        # delta overlay (out_of_place)
        self.delta: _GraphArrays | None = None
        self.delta_ids: list[int] = []
        if mode == "out_of_place":
            self.delta = _GraphArrays(
                np.empty((0, self.dim), dtype=np.float32),
                np.empty((0, cfg.R), dtype=np.int32),
                np.empty(0, dtype=np.int32), cfg.R, track_reverse=False,
            )
        self.storage = make_storage_plan(
            "major_in_disk", 16 << 30,
            AdvisorInput(n=dataset.count, d=self.dim, r=cfg.R, n_pq=cfg.pq_m, budget=16 << 30),
        )
        self.update_log: list[tuple[str, int, float]] = []
        self.merge_reports: list[MergeReport] = []
        self.cleanup_time_s = 0.0
        self._cleaned = 0
        self._retired_io_us = 0.0

    # -- store plumbing ----------------------------------------------------
    def _new_store(self, image: bytes, generation: int) -> BlockStore:
        if self.in_memory:
            return BlockStore.in_memory(self.config.page_size, image, latency=self.latency)
        path = self.directory / f"pages_gen{generation}.bin"
        return BlockStore.create(path, self.config.page_size, image, latency=self.latency)

    def _entry_bytes(self, node: int) -> bytes:
        deg = int(self.base.deg[node])
        parts = [
            np.array([node], dtype="<u4").tobytes(),
            np.array([deg], dtype="<u2").tobytes(),
        ]
        slots = np.full(self.config.R, FILE_SENTINEL, dtype="<u4")
        slots[:deg] = self.base.adj[node, :deg].astype("<u4")
        parts.append(slots.tobytes())
        parts.append(self.base.vectors[node].astype("<f4").tobytes())
        return b"".join(parts)

    def _write_entry(self, node: int) -> None:
        page_id, slot = self.plan.locate(node)
        while page_id >= self.store.page_count:
            self.store.extend()
        data, _ = self.store.read_page_raw(page_id)
        page = bytearray(data)
        stride = self.plan.entry_stride
        off = PAGE_HEADER + slot * stride
        rec = self._entry_bytes(node)
        page[off : off + len(rec)] = rec
        count = int.from_bytes(page[:2], "little")
        if slot + 1 > count:
            page[:2] = (slot + 1).to_bytes(2, "little")
        self.store.write_page(page_id, bytes(page))

    def _clear_entry(self, node: int) -> None:
        page_id, slot = self.plan.locate(node)
        data, _ = self.store.read_page_raw(page_id)
        page = bytearray(data)
        off = PAGE_HEADER + slot * self.plan.entry_stride
        page[off : off + 4] = np.array([DEAD_ID], dtype="<u4").tobytes()
        page[off + 4 : off + 6] = b"\x00\x00"
        self.store.write_page(page_id, bytes(page))

    def _allocate_slot(self, node: int) -> None:
        if self.free_slots:
            page_id, slot = self.free_slots.pop()
        else:
            page_id, slot = self._next_tail_slot()
        self._extend_plan(node, page_id, slot)

    def _next_tail_slot(self) -> tuple[int, int]:
        if self.plan.count == 0:
            return 0, 0
        pos = self.plan.node_page * self.plan.capacity + self.plan.node_slot
        best = int(pos.max())
        if best < 0:
            return 0, 0
        page_id, slot = divmod(best, self.plan.capacity)
        if slot + 1 < self.plan.capacity:
            return page_id, slot + 1
        return page_id + 1, 0

    def _extend_plan(self, node: int, page_id: int, slot: int) -> None:
        plan = self.plan
        if node >= plan.count:
            grown_page = np.full(node + 1, -1, dtype=np.int64)
            grown_page[: plan.count] = plan.node_page
            grown_slot = np.full(node + 1, -1, dtype=np.int64)
            grown_slot[: plan.count] = plan.node_slot
            plan.node_page = grown_page
            plan.node_slot = grown_slot
        plan.node_page[node] = page_id
        plan.node_slot[node] = slot
        plan.page_count = max(plan.page_count, page_id + 1)

    # -- views ---------------------------------------------------------------
    @property
    def total_ids(self) -> int:
        return self.base.n + (self.delta.n if self.delta is not None else 0)

    @property
    def live_count(self) -> int:
        # in_place keeps cleaned ids tombstoned; merge holes are counted once
        return self.total_ids - len(self.tombstones) - self._cleaned

    @property
    def io_time_us(self) -> float:
        """Simulated/measured io time across store generations."""
        return self._retired_io_us + self.store.io_time_us

    # -- queries ---------------------------------------------------------------
    def search(self, query: np.ndarray, k: int, L: int | None = None,
               W: int = 4) -> tuple[np.ndarray, np.ndarray]:
        """Top-k over base plus delta, excluding tombstoned ids."""
        L = L or max(2 * k, 32)
        with self.lock:
            store, plan, codes = self.store, self.plan, self.codes
            entry, base_n = self.entry_id, self.base.n
            tombstones = set(self.tombstones)
            delta = self.delta
        if self.live_count <= 0:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float32)
        merged: list[tuple[float, int]] = []
        if base_n:
            idx = SearchIndex(storage=self.storage, plan=plan, store=store, pq=self.pq,
                              codes=codes, entry_id=entry, count=base_n,
                              tolerate_new_ids=True)
            want = min(L, base_n)
            res = search(np.asarray(query, dtype=np.float32),
                         SearchParams(k=want, L=max(want, L), W=W), idx)
            for node, dist in zip(res.ids.tolist(), res.distances.tolist()):
                if node not in tombstones:
                    merged.append((dist, node))
        if delta is not None and delta.n:
            q = np.ascontiguousarray(query, dtype=np.float32)
            with self.lock:
                delta.stamp_val += 1
                ids, dists = _kernels.search_topk(
                    delta.vectors[: delta.n], delta.adj, delta.deg, 0, q,
                    min(L, delta.n), delta.stamp, delta.stamp_val,
                )
            for local, dist in zip(ids.tolist(), dists.tolist()):
                node = base_n + local
                if node not in tombstones:
                    merged.append((float(dist), node))
        merged.sort()
        top = merged[:k]
        return (np.array([n for _, n in top], dtype=np.int64),
                np.array([d for d, _ in top], dtype=np.float32))

    # -- inserts -----------------------------------------------------------------
    def insert(self, vector: np.ndarray) -> int:
        if self.mode == "in_place":
            return self.insert_in_place(vector)
        return self.insert_out_of_place(vector)

    def insert_in_place(self, vector: np.ndarray) -> int:
        """Write-path insert: new entry page write + neighbor page RMWs."""
        t0 = time.perf_counter()
        io_before = self.io_time_us
        with self.lock:
            cfg = self.config
            node = self.base.n
            self.base.ensure(node + 1)
            q = np.ascontiguousarray(vector, dtype=np.float32)
            self.base.vectors[node] = q
            if self.pq is None:
                self.pq = train_pq(q[None, :], min(cfg.pq_m, self.dim), iters=2,
                                   algo="lloyd", seed=cfg.seed)
            if node >= len(self.codes):
                self.codes = _grow(self.codes, max(2 * len(self.codes), 16))
            self.codes[node] = self.pq.encode(q[None, :])[0]
            if node == 0:
                self.base.n = 1
                self.base.deg[0] = 0
                self.entry_id = 0
                self._extend_plan(0, 0, 0)
                if self.store.page_count == 0:
                    self.store.extend()
                self._write_entry(0)
            else:
                cand_ids, cand_dists = self.base.greedy_candidates(
                    q, self.entry_id, cfg.L_build, self.scratch
                )
                live = [i for i, c in enumerate(cand_ids.tolist())
                        if c not in self.tombstones]
                cand_ids = cand_ids[live]
                cand_dists = cand_dists[live]
                self.base.n = node + 1
                nbrs = self.base.prune(node, cand_ids, cand_dists, cfg.alpha, self.scratch)
                self.base.set_neighbors(node, nbrs)
                self._allocate_slot(node)
                self._write_entry(node)
                for v in nbrs.tolist():
                    if node in self.base.neighbors(v):
                        continue
                    if self.base.deg[v] < cfg.R:
                        if self.base.in_nbrs is not None:
                            self.base.in_nbrs.setdefault(node, set()).add(v)
                        self.base.adj[v, self.base.deg[v]] = node
                        self.base.deg[v] += 1
                    else:
                        ids = np.append(self.base.neighbors(v), node).astype(np.int32)
                        diffs = self.base.vectors[ids] - self.base.vectors[v]
                        dists = np.einsum("ij,ij->i", diffs, diffs)
                        pruned = self.base.prune(v, ids, dists, cfg.alpha, self.scratch)
                        self.base.set_neighbors(v, pruned)
                    self._write_entry(v)
        latency = (time.perf_counter() - t0) * 1e6
        if self.latency is not None:
            latency += self.io_time_us - io_before
        self.update_log.append(("insert", node, latency))
        return node

    def insert_out_of_place(self, vector: np.ndarray) -> int:
        """Delta insert: memory only, immediately searchable, disk untouched."""
        t0 = time.perf_counter()
        with self.lock:
            cfg = self.config
            delta = self.delta
            local = delta.n
            delta.ensure(local + 1)
            q = np.ascontiguousarray(vector, dtype=np.float32)
            delta.vectors[local] = q
            if local == 0:
                delta.n = 1
                delta.deg[0] = 0
            else:
                cand_ids, cand_dists = delta.greedy_candidates(q, 0, cfg.L_build, self.scratch)
                delta.n = local + 1
                nbrs = delta.prune(local, cand_ids, cand_dists, cfg.alpha, self.scratch)
                delta.set_neighbors(local, nbrs)
                for v in nbrs.tolist():
                    if local in delta.neighbors(v):
                        continue
                    if delta.deg[v] < cfg.R:
                        delta.adj[v, delta.deg[v]] = local
                        delta.deg[v] += 1
                    else:
                        ids = np.append(delta.neighbors(v), local).astype(np.int32)
                        diffs = delta.vectors[ids] - delta.vectors[v]
                        dists = np.einsum("ij,ij->i", diffs, diffs)
                        pruned = delta.prune(v, ids, dists, cfg.alpha, self.scratch)
                        delta.set_neighbors(v, pruned)
            node = self.base.n + local
            self.delta_ids.append(node)
        latency = (time.perf_counter() - t0) * 1e6
        self.update_log.append(("insert", node, latency))
        if (self.auto_maintenance
                and self.delta.n >= self.config.merge_threshold * max(self.base.n, 1)):
            self.merge()
        return node

    # -- deletes -----------------------------------------------------------------
    def delete(self, node: int) -> None:
        """Tombstone a node; excluded from results from this call onward."""
        t0 = time.perf_counter()
        with self.lock:
            if node < 0 or node >= self.total_ids:
                raise ValueError(f"unknown id {node}")
            if node in self.tombstones:
                raise ValueError(f"id {node} is already deleted")
            self.tombstones.add(node)
            if self.mode == "in_place":
                self.delete_queue.append(node)
            if node == self.entry_id:
                self._reelect_entry()
        self.update_log.append(("delete", node, (time.perf_counter() - t0) * 1e6))
        if (self.auto_maintenance and self.mode == "in_place"
                and len(self.delete_queue) >= self.config.cleanup_batch):
            self.cleanup()

    def _reelect_entry(self) -> None:
        live = [i for i in range(self.base.n)
                if i not in self.tombstones and not self._is_cleaned(i)]
        if not live:
            self.entry_id = -1
            return
        vecs = self.base.vectors[live]
        self.entry_id = int(live[medoid_id(vecs)])

    def _is_cleaned(self, node: int) -> bool:
        return node < self.plan.count and self.plan.node_page[node] < 0

    # -- maintenance ----------------------------------------------------------------
    def cleanup(self, batch: int | None = None) -> int:
        """Structural removal for queued deletions; returns pages rewritten.

        For each deleted node D and in-neighbor U, U's list becomes
        robust_prune(U.list minus D, plus D's live neighbors).
        """
        if self.mode != "in_place":
            raise ValueError("cleanup applies to in_place indexes")
        t0 = time.perf_counter()
        rewritten = set()
        with self.lock:
            todo = self.delete_queue[: batch or len(self.delete_queue)]
            self.delete_queue = self.delete_queue[len(todo) :]
            for dead in todo:
                donees = set(self.base.in_nbrs.get(dead, set()))
                dead_nbrs = [v for v in self.base.neighbors(dead).tolist()
                             if v not in self.tombstones]
                for u in donees:
                    if self._is_cleaned(u):
                        continue
                    keep = [v for v in self.base.neighbors(u).tolist() if v != dead]
                    if u in self.tombstones:
                        # dying node: keep it routable but drop the dead edge
                        self.base.set_neighbors(u, np.array(keep, dtype=np.int32))
                        self._write_entry(u)
                        rewritten.add(self.plan.locate(u)[0])
                        continue
                    cands = sorted(set(keep) | set(dead_nbrs) - {u})
                    if cands:
                        ids = np.array(cands, dtype=np.int32)
                        diffs = self.base.vectors[ids] - self.base.vectors[u]
                        dists = np.einsum("ij,ij->i", diffs, diffs)
                        pruned = self.base.prune(u, ids, dists, self.config.alpha, self.scratch)
                    else:
                        pruned = np.empty(0, dtype=np.int32)
                    self.base.set_neighbors(u, pruned)
                    self._write_entry(u)
                    rewritten.add(self.plan.locate(u)[0])
                self.base.set_neighbors(dead, np.empty(0, dtype=np.int32))
                self.base.in_nbrs.pop(dead, None)
                page_id, slot = self.plan.locate(dead)
                self._clear_entry(dead)
                rewritten.add(page_id)
                self.free_slots.append((page_id, slot))
                self.plan.node_page[dead] = -1
                self.plan.node_slot[dead] = -1
        self.cleanup_time_s += time.perf_counter() - t0
        return len(rewritten)

    def merge(self) -> MergeReport:
        """Fold tombstones and the delta into a freshly serialized base.

        The new page file is written before any visible state changes;
        readers of the old store/plan stay consistent until the swap.
        """
        if self.mode != "out_of_place":
            raise ValueError("merge applies to out_of_place indexes")
        t0 = time.perf_counter()
        with self.lock:
            cfg = self.config
            base_n = self.base.n
            delta = self.delta
            tombs = set(self.tombstones)
            # survivors keep their ids; the merged mirror spans base + delta
            total = base_n + delta.n
            merged = _GraphArrays(
                np.vstack([self.base.vectors[:base_n], delta.vectors[: delta.n]])
                if delta.n else self.base.vectors[:base_n].copy(),
                _grow(self.base.adj[:base_n], total),
                _grow(self.base.deg[:base_n], total),
                cfg.R, track_reverse=False,
            )
            merged.n = base_n
            # reconnection around tombstoned base nodes
            in_nbrs: dict[int, set[int]] = {}
            for u in range(base_n):
                for v in merged.neighbors(u):
                    in_nbrs.setdefault(int(v), set()).add(u)
            for dead in sorted(t for t in tombs if t < base_n):
                dead_nbrs = [v for v in merged.neighbors(dead).tolist() if v not in tombs]
                for u in in_nbrs.get(dead, set()):
                    if u in tombs:
                        continue
                    keep = [v for v in merged.neighbors(u).tolist() if v != dead]
                    cands = sorted(set(keep) | set(dead_nbrs) - {u})
                    if cands:
                        ids = np.array(cands, dtype=np.int32)
                        diffs = merged.vectors[ids] - merged.vectors[u]
                        dists = np.einsum("ij,ij->i", diffs, diffs)
                        pruned = merged.prune(u, ids, dists, cfg.alpha, self.scratch)
                    else:
                        pruned = np.empty(0, dtype=np.int32)
                    merged.set_neighbors(u, pruned)
                merged.set_neighbors(dead, np.empty(0, dtype=np.int32))
            # insert surviving delta nodes through the write path
            entry = self.entry_id if self.entry_id not in tombs else -1
            if entry < 0:
                live_base = [i for i in range(base_n) if i not in tombs]
                entry = live_base[0] if live_base else base_n
            merged.n = total
            for local in range(delta.n):
                node = base_n + local
                merged.deg[node] = 0
                if node in tombs:
                    continue
                q = merged.vectors[node]
                if merged.deg[entry] == 0 and entry == node:
                    continue
                cand_ids, cand_dists = merged.greedy_candidates(q, entry, cfg.L_build, self.scratch)
                live = [i for i, c in enumerate(cand_ids.tolist())
                        if c not in tombs and c != node]
                nbrs = merged.prune(node, cand_ids[live], cand_dists[live], cfg.alpha, self.scratch)
                merged.set_neighbors(node, nbrs)
                for v in nbrs.tolist():
                    if node in merged.neighbors(v):
                        continue
                    if merged.deg[v] < cfg.R:
                        merged.adj[v, merged.deg[v]] = node
                        merged.deg[v] += 1
                    else:
                        ids = np.append(merged.neighbors(v), node).astype(np.int32)
                        diffs = merged.vectors[ids] - merged.vectors[v]
                        dists = np.einsum("ij,ij->i", diffs, diffs)
                        pruned = merged.prune(v, ids, dists, cfg.alpha, self.scratch)
                        merged.set_neighbors(v, pruned)
            # fresh serialization of live nodes under the configured layout
            live_ids = np.array([i for i in range(total) if i not in tombs], dtype=np.int64)
            new_plan, image = _serialize_live(
                merged, live_ids, total, cfg, self.elem_type, self.dim
            )
            new_store = self._new_store(image, self.generation + 1)
            new_codes = _grow(self.codes, len(merged.vectors))
            if delta.n:
                new_codes[base_n : base_n + delta.n] = self.pq.encode(delta.vectors[: delta.n])
            # atomic swap
            old_store = self.store
            self._retired_io_us += old_store.io_time_us
            self.base = merged
            self.codes = new_codes
            self.plan = new_plan
            self.store = new_store
            self.generation += 1
            self.tombstones = set()
            self._cleaned = total - len(live_ids)
            self.free_slots = []
            self.delta = _GraphArrays(
                np.empty((0, self.dim), dtype=np.float32),
                np.empty((0, cfg.R), dtype=np.int32),
                np.empty(0, dtype=np.int32), cfg.R, track_reverse=False,
            )
            merged_inserts = len(self.delta_ids)
            self.delta_ids = []
            if len(live_ids):
                if self.entry_id in tombs or self.entry_id >= total:
                    self._reelect_entry()
            if not self.in_memory:
                old_store.close()
        report = MergeReport(time.perf_counter() - t0, new_plan.page_count,
                             merged_inserts, len(tombs))
        self.merge_reports.append(report)
        return report


def _serialize_live(arrays: _GraphArrays, live_ids: np.ndarray, total: int,
                    cfg: UpdateConfig, elem_type: str, dim: int) -> tuple[LayoutPlan, bytes]:
    """Pack live nodes (original ids) into fresh pages under the id layout."""
    from .layout import entry_stride

    stride = entry_stride(dim, 4, cfg.R)
    capacity = (cfg.page_size - PAGE_HEADER) // stride
    n_live = len(live_ids)
    page_count = max(int(np.ceil(n_live / capacity)), 1)
    node_page = np.full(total, -1, dtype=np.int64)
    node_slot = np.full(total, -1, dtype=np.int64)
    image = np.zeros((page_count, cfg.page_size), dtype=np.uint8)
    counts = np.zeros(page_count, dtype="<u2")
    for pos, node in enumerate(live_ids.tolist()):
        page_id, slot = divmod(pos, capacity)
        node_page[node] = page_id
        node_slot[node] = slot
        deg = int(arrays.deg[node])
        rec = (
            np.array([node], dtype="<u4").tobytes()
            + np.array([deg], dtype="<u2").tobytes()
            + np.concatenate([
                arrays.adj[node, :deg].astype("<u4"),
                np.full(cfg.R - deg, FILE_SENTINEL, dtype="<u4"),
            ]).tobytes()
            + arrays.vectors[node].astype("<f4").tobytes()
        )
        off = PAGE_HEADER + slot * stride
        image[page_id, off : off + len(rec)] = np.frombuffer(rec, dtype=np.uint8)
        counts[page_id] = max(counts[page_id], slot + 1)
    image[:, :PAGE_HEADER] = counts[:, None].view(np.uint8).reshape(page_count, 2)
    plan = LayoutPlan(
        "coupled", cfg.local_kind, cfg.page_size, node_page, node_slot,
        page_count, cfg.R, dim, elem_type, 0, int(capacity),
    )
    return plan, image.tobytes()


@dataclass
class WorkloadReport:
    search_qps: float
    mean_insert_latency_us: float
    mean_delete_latency_us: float
    mean_search_latency_us: float
    qps_series: list[float]
    merge_time_s: float
    cleanup_time_s: float
    counts: dict[str, int] = field(default_factory=dict)


def run_mixed_workload(
    index: UpdatableIndex,
    ops: list[tuple],
    insert_threads: int = 1,
    delete_threads: int = 1,
    search_threads: int = 1,
    serial: bool = True,
    window: int = 200,
) -> WorkloadReport:
    """Drive an operation stream and report throughput and latency.

    Serial mode executes ops in stream order (deterministic); threaded
    mode partitions by kind across the configured thread counts. Search
    latency includes simulated io time when the store has a latency model.
    """
    lat: dict[str, list[float]] = {"insert": [], "delete": [], "search": []}
    qps_series: list[float] = []
    window_t: list[float] = []

    def one(op) -> None:
        kind = op[0]
        if kind == "insert":
            t0 = time.perf_counter()
            io0 = index.io_time_us if index.latency is not None else 0.0
            index.insert(op[1])
            us = (time.perf_counter() - t0) * 1e6
            if index.latency is not None:
                us += index.io_time_us - io0
            lat["insert"].append(us)
        elif kind == "delete":
            t0 = time.perf_counter()
            io0 = index.io_time_us if index.latency is not None else 0.0
            try:
                index.delete(op[1])
            except ValueError:
                return
            us = (time.perf_counter() - t0) * 1e6
            if index.latency is not None:
                us += index.io_time_us - io0
            lat["delete"].append(us)
        else:
            q, k, L = op[1], op[2], op[3]
            t0 = time.perf_counter()
            io0 = index.io_time_us if index.latency is not None else 0.0
            index.search(q, k, L)
            us = (time.perf_counter() - t0) * 1e6
            if index.latency is not None:
                us += index.io_time_us - io0
            lat["search"].append(us)
            window_t.append(us)
            if len(window_t) >= window:
                qps_series.append(1e6 * len(window_t) / sum(window_t))
                window_t.clear()

    if serial:
        for op in ops:
            one(op)
    else:
        import queue as _queue

        buckets = {"insert": _queue.Queue(), "delete": _queue.Queue(), "search": _queue.Queue()}
        for op in ops:
            buckets[op[0]].put(op)
        threads = []
        for kind, n in (("insert", insert_threads), ("delete", delete_threads),
                        ("search", search_threads)):
            for _ in range(max(n, 1) if not buckets[kind].empty() else 0):
                def worker(k=kind):
                    while True:
                        try:
                            op = buckets[k].get_nowait()
                        except _queue.Empty:
                            return
                        one(op)
                t = threading.Thread(target=worker)
                threads.append(t)
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if window_t:
        qps_series.append(1e6 * len(window_t) / sum(window_t))
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0
    search_total = sum(lat["search"]) or 1.0
    return WorkloadReport(
        search_qps=1e6 * len(lat["search"]) / search_total,
        mean_insert_latency_us=mean(lat["insert"]),
        mean_delete_latency_us=mean(lat["delete"]),
        mean_search_latency_us=mean(lat["search"]),
        qps_series=qps_series,
        merge_time_s=sum(r.duration_s for r in index.merge_reports),
        cleanup_time_s=index.cleanup_time_s,
        counts={k: len(v) for k, v in lat.items()},
    )
