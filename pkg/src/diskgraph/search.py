"""Beam search over the disk-resident graph with fine-grained metrics.

Execution modes share one traversal semantic and differ in I/O scheduling:
sync awaits each page read in turn, compute_driven issues the beam's reads
as one overlapped batch, and io_driven keeps up to W reads outstanding and
processes completions in arrival order. Whether a popped node's exact
distance is computed is decided when it enters the beam (estimated
distance against the worst result), so result sets are identical across
coupled/decoupled layouts and cache configurations.

Cache stats count one access per page-level block request plus node-level
record hits, which keeps pages_read == accesses - hits on every trace.
Useful-byte accounting charges only bytes served from pages this query
read from disk: the adjacency record of every expanded node plus the
vector of every exact-evaluated node.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass

import numpy as np

from .dataio import ELEM_DTYPES
from .errors import IndexCorruptionError
from .graph import NavGraph
from .layout import FILE_SENTINEL, PAGE_HEADER, LayoutPlan
from .pq import PQCodebook
from .storage import BlockStore, Cache, LatencyModel, StoragePlan

EXEC_MODES = ("sync", "compute_driven", "io_driven")
ENTRY_MODES = ("medoid", "nav_graph")


@dataclass
class SearchParams:
    k: int
    L: int
    W: int = 1
    exec_mode: str = "sync"
    entry_mode: str = "medoid"
    L_nav: int = 10
    arrival_order: str = "fifo"  # io_driven completion order: fifo | reversed

    def __post_init__(self):
        if self.k > self.L:
            raise ValueError(f"k={self.k} must not exceed L={self.L}")
        if self.W < 1:
            raise ValueError("beam width must be >= 1")
        if self.exec_mode not in EXEC_MODES:
            raise ValueError(f"unknown exec mode {self.exec_mode!r}")
        if self.entry_mode not in ENTRY_MODES:
            raise ValueError(f"unknown entry mode {self.entry_mode!r}")


@dataclass
class SearchMetrics:
    ios: int = 0
    bytes_read: int = 0
    bytes_useful: int = 0
    hops: int = 0
    est_dist_computations: int = 0
    exact_dist_computations: int = 0
    io_time_us: float = 0.0
    compute_time_us: float = 0.0
    wall_time_us: float = 0.0
    cache_accesses: int = 0
    cache_hits: int = 0


@dataclass
class SearchResult:
    ids: np.ndarray
    distances: np.ndarray  # squared euclidean
    metrics: SearchMetrics


def io_utilization(metrics: SearchMetrics) -> tuple[float, bool]:
    """(bytes_useful / bytes_read, defined). Zero reads report (1.0, False)."""
    if metrics.bytes_read == 0:
        return 1.0, False
    return metrics.bytes_useful / metrics.bytes_read, True


@dataclass
class SearchIndex:
    """Everything one query needs, built from the same dataset."""

    storage: StoragePlan
    plan: LayoutPlan
    store: BlockStore
    pq: PQCodebook
    codes: np.ndarray | None          # memory-resident codes (major-in-disk)
    entry_id: int
    count: int
    data_store: BlockStore | None = None
    cache: Cache | None = None
    nav: NavGraph | None = None
    # concurrent updates may surface ids newer than this snapshot; with this
    # flag they are skipped instead of treated as corruption
    tolerate_new_ids: bool = False

    def __post_init__(self):
        if self.storage.codes_on_pages:
            if self.plan.pq_m == 0:
                raise ValueError("all_in_disk storage needs a layout with pq space reserved")
            self.codes = None  # scale-growing codes must not stay resident
        if self.plan.global_kind == "decoupled" and self.data_store is None:
            raise ValueError("decoupled layout needs a data page store")

    @property
    def latency(self) -> LatencyModel | None:
        return self.store.latency


class _Record:
    """Decoded node record available to the current query."""

    __slots__ = ("neighbors", "vector_bytes", "neighbor_codes", "own_code", "from_disk")

    def __init__(self, neighbors, vector_bytes=None, neighbor_codes=None,
                 own_code=None, from_disk=False):
        self.neighbors = neighbors
        self.vector_bytes = vector_bytes
        self.neighbor_codes = neighbor_codes
        self.own_code = own_code
        self.from_disk = from_disk

    def complete_for(self, need_vector: bool) -> bool:
        return not need_vector or self.vector_bytes is not None


class _SearchRun:
    """One query execution; owns all counters for that query."""

    def __init__(self, index: SearchIndex, query: np.ndarray, params: SearchParams):
        self.index = index
        self.plan = index.plan
        self.params = params
        self.q = np.ascontiguousarray(query, dtype=np.float32)
        self.metrics = SearchMetrics()
        self.table = index.pq.distance_table(self.q)
        self.table_rows = np.arange(self.table.shape[0])
        self.elem_dtype = ELEM_DTYPES[self.plan.elem_type]
        self.visited: set[int] = set()
        self.enqueued: set[int] = set()
        self.cand: list[tuple[float, int]] = []
        self.results: list[tuple[float, int]] = []  # max-heap: (-exact, id)
        self.sim = index.latency
        # query-local buffers
        self.pages: dict[tuple, tuple[bytes, bool]] = {}      # key -> (bytes, from_disk)
        self.replica_at: dict[int, tuple[tuple, int]] = {}    # node -> (page key, slot)
        self.records: dict[int, _Record] = {}
        self.adj_counted: set[int] = set()
        self.vec_counted: set[int] = set()
        self.final_clock = 0.0

    # -- result queue ----------------------------------------------------
    def results_full(self) -> bool:
        return len(self.results) >= self.params.L

    def worst_exact(self) -> float:
        return -self.results[0][0] if self.results else np.inf

    def push_result(self, node: int, exact: float) -> None:
        heapq.heappush(self.results, (-exact, node))
        if len(self.results) > self.params.L:
            heapq.heappop(self.results)

    # -- page buffer ---------------------------------------------------------
    def _store_for(self, tag: str) -> BlockStore:
        return self.index.store if tag == "primary" else self.index.data_store

    def _register_page(self, key: tuple, data: bytes, from_disk: bool) -> None:
        self.pages[key] = (data, from_disk)
        if key[0] == "primary" and self.plan.local_kind == "graph_replicated":
            owners = self.plan.replicas.get(key[1])
            if owners is not None:
                for slot, owner in enumerate(owners):
                    owner = int(owner)
                    if owner not in self.replica_at:
                        self.replica_at[owner] = (key, slot)

    def _probe_page_cache(self, key: tuple, hop: int) -> bool:
        """One block request against the cache; registers the page on a hit."""
        cache = self.index.cache
        if cache is None:
            return False
        self.metrics.cache_accesses += 1
        data = cache.lookup_page(key)
        if data is not None:
            cache.record(hop, True)
            self.metrics.cache_hits += 1
            self._register_page(key, data, from_disk=False)
            return True
        cache.record(hop, False)
        return False

    def _read_now(self, key: tuple) -> None:
        """Charge one disk read and register the page."""
        tag, pid = key
        store = self._store_for(tag)
        data, elapsed = store.read_page_raw(pid)
        self.metrics.ios += 1
        self.metrics.bytes_read += store.page_size
        self.metrics.io_time_us += elapsed
        if self.index.cache is not None:
            self.index.cache.admit_page(key, data)
        self._register_page(key, data, from_disk=True)

    # -- record decoding ---------------------------------------------------
    def _decode_coupled(self, page: bytes, offset: int, with_vector: bool,
                        from_disk: bool) -> _Record:
        plan = self.plan
        deg = int.from_bytes(page[offset + 4 : offset + 6], "little")
        if deg > plan.R:
            raise IndexCorruptionError("entry degree exceeds R")
        nbrs = np.frombuffer(page, dtype="<u4", count=deg, offset=offset + 6).astype(np.int64)
        pos = offset + 6 + plan.R * 4
        own_code = nbr_codes = None
        if plan.pq_m:
            own_code = np.frombuffer(page, dtype=np.uint8, count=plan.pq_m, offset=pos)
            nbr_codes = np.frombuffer(
                page, dtype=np.uint8, count=plan.R * plan.pq_m, offset=pos + plan.pq_m
            ).reshape(plan.R, plan.pq_m)[:deg]
            pos += (1 + plan.R) * plan.pq_m
        vec = page[pos : pos + plan.data_stride] if with_vector else None
        return _Record(nbrs, vec, nbr_codes, own_code, from_disk)

    def _decode_index_record(self, page: bytes, offset: int, from_disk: bool) -> _Record:
        plan = self.plan
        slots = np.frombuffer(page, dtype="<u4", count=1 + plan.R, offset=offset)
        nbrs = slots[1:]
        nbrs = nbrs[nbrs != FILE_SENTINEL].astype(np.int64)
        own_code = nbr_codes = None
        if plan.pq_m:
            pos = offset + (1 + plan.R) * 4
            own_code = np.frombuffer(page, dtype=np.uint8, count=plan.pq_m, offset=pos)
            nbr_codes = np.frombuffer(
                page, dtype=np.uint8, count=plan.R * plan.pq_m, offset=pos + plan.pq_m
            ).reshape(plan.R, plan.pq_m)[: len(nbrs)]
        return _Record(nbrs, None, nbr_codes, own_code, from_disk)

    def _from_buffer(self, node: int, need_vector: bool) -> _Record | None:
        """Serve a node from already-buffered pages or replica slots."""
        rec = self.records.get(node)
        if rec is not None and rec.complete_for(need_vector):
            return rec
        plan = self.plan
        if plan.global_kind == "coupled":
            page_id, slot = plan.locate(node)
            hit = self.pages.get(("primary", page_id))
            if hit is not None:
                page, from_disk = hit
                off = PAGE_HEADER + slot * plan.entry_stride
                rec = self._decode_coupled(page, off, True, from_disk)
                self.records[node] = rec
                return rec
            if not need_vector:
                rep = self.replica_at.get(node)
                if rep is not None:
                    key, rslot = rep
                    page, from_disk = self.pages[key]
                    off = PAGE_HEADER + plan.entry_stride + rslot * plan.replica_stride
                    rec = self._decode_coupled(page, off, False, from_disk)
                    self.records[node] = rec
                    return rec
            return rec
        if rec is None:
            page_id, slot = plan.locate(node)
            hit = self.pages.get(("primary", page_id))
            if hit is None:
                return None
            page, from_disk = hit
            off = PAGE_HEADER + slot * plan.adjacency_record_stride
            rec = self._decode_index_record(page, off, from_disk)
            self.records[node] = rec
        if need_vector and rec.vector_bytes is None:
            dpage_id, dslot = plan.locate_data(node)
            hit = self.pages.get(("data", dpage_id))
            if hit is not None:
                page, from_disk = hit
                off = dslot * plan.data_stride
                rec.vector_bytes = page[off : off + plan.data_stride]
                rec.from_disk = rec.from_disk or from_disk
        return rec

    def preresolve(self, node: int, need_vector: bool, hop: int) -> list[tuple]:
        """Probe buffer and node-level cache; return page keys still needed.

        Node-level cache hits count as one served block request; misses are
        silent because the page-level probes that follow do the counting.
        """
        rec = self._from_buffer(node, need_vector)
        if rec is not None and rec.complete_for(need_vector):
            return []
        cache = self.index.cache
        if cache is not None:
            entry = cache.lookup_node(node, need_vector)
            if entry is not None:
                cache.record(hop, True)
                self.metrics.cache_accesses += 1
                self.metrics.cache_hits += 1
                vec = None
                if entry.vector is not None:
                    vec = np.ascontiguousarray(entry.vector.astype(self.elem_dtype)).tobytes()
                rec = _Record(np.asarray(entry.neighbors, dtype=np.int64), vec,
                              entry.neighbor_codes, entry.own_code, False)
                self.records[node] = rec
                return []
        plan = self.plan
        needs = []
        if plan.global_kind == "coupled":
            needs.append(("primary", plan.locate(node)[0]))
        else:
            if self.records.get(node) is None:
                needs.append(("primary", plan.locate(node)[0]))
            if need_vector and (rec is None or rec.vector_bytes is None):
                needs.append(("data", plan.locate_data(node)[0]))
        return needs

    def resolve_sync(self, node: int, need_vector: bool, hop: int) -> _Record | None:
        """Serve one node, reading each needed page immediately.

        Returns None when a concurrent mutation removed the node (tolerant
        indexes only); otherwise a missing record is corruption.
        """
        if self.is_gone(node):
            return None
        for key in self.preresolve(node, need_vector, hop):
            if key[1] < 0:
                return None if self.index.tolerate_new_ids else self._corrupt(node)
            if key in self.pages:
                continue
            if not self._probe_page_cache(key, hop):
                self._read_now(key)
        rec = self._from_buffer(node, need_vector)
        if rec is None or not rec.complete_for(need_vector):
            if self.index.tolerate_new_ids:
                return None
            self._corrupt(node)
        return rec

    def _corrupt(self, node: int):
        raise IndexCorruptionError(f"node {node} missing from its mapped page")

    # -- distance bookkeeping ----------------------------------------------
    def exact_distance(self, node: int, rec: _Record) -> float:
        vec = np.frombuffer(rec.vector_bytes, dtype=self.elem_dtype, count=self.plan.dim)
        diff = vec.astype(np.float32) - self.q
        self.metrics.exact_dist_computations += 1
        if rec.from_disk and node not in self.vec_counted:
            self.vec_counted.add(node)
            self.metrics.bytes_useful += self.plan.data_stride
        return float(np.dot(diff, diff))

    def estimate_one(self, node: int) -> float:
        self.metrics.est_dist_computations += 1
        code = self.index.codes[node].astype(np.intp)
        return float(self.table[self.table_rows, code].sum())

    def expand(self, node: int, rec: _Record) -> None:
        """Push unseen neighbors onto the candidate queue."""
        if rec.from_disk and node not in self.adj_counted:
            self.adj_counted.add(node)
            if self.plan.global_kind == "coupled":
                self.metrics.bytes_useful += self.plan.replica_stride
            else:
                self.metrics.bytes_useful += self.plan.adjacency_record_stride
        nbrs = rec.neighbors
        if len(nbrs) == 0:
            return
        fresh_pos = [i for i, nb in enumerate(nbrs.tolist()) if nb not in self.enqueued]
        if not fresh_pos:
            return
        fresh_pos = np.array(fresh_pos, dtype=np.intp)
        fresh = nbrs[fresh_pos]
        if fresh.max() >= self.index.count or fresh.min() < 0:
            if not self.index.tolerate_new_ids:
                raise IndexCorruptionError(f"node {node} references a dangling neighbor")
            ok = (fresh < self.index.count) & (fresh >= 0)
            fresh = fresh[ok]
            fresh_pos = fresh_pos[ok]
            if len(fresh) == 0:
                return
        if self.index.codes is not None:
            codes = self.index.codes[fresh]
        else:
            if rec.neighbor_codes is None:
                raise IndexCorruptionError("all-in-disk record lacks neighbor codes")
            codes = rec.neighbor_codes[fresh_pos]
        self.metrics.est_dist_computations += len(fresh)
        ests = self.table[self.table_rows, codes.astype(np.intp)].sum(axis=1)
        for nb, e in zip(fresh.tolist(), ests.tolist()):
            self.enqueued.add(nb)
            heapq.heappush(self.cand, (e, nb))

    def process(self, node: int, need_exact: bool, rec: _Record) -> None:
        self.visited.add(node)
        if need_exact:
            self.push_result(node, self.exact_distance(node, rec))
        self.expand(node, rec)

    # -- seeding -------------------------------------------------------------
    def seed(self) -> None:
        if self.params.entry_mode == "nav_graph" and self.index.nav is not None:
            ids, dists = self.index.nav.descend(self.q, self.params.L_nav)
            self.metrics.exact_dist_computations += len(ids)
            for node, d in zip(ids.tolist(), dists.tolist()):
                if node in self.enqueued:
                    continue
                est = self.estimate_one(node) if self.index.codes is not None else float(d)
                self.enqueued.add(node)
                heapq.heappush(self.cand, (est, node))
        else:
            entry = self.index.entry_id
            est = self.estimate_one(entry) if self.index.codes is not None else 0.0
            self.enqueued.add(entry)
            heapq.heappush(self.cand, (est, entry))

    def is_gone(self, node: int) -> bool:
        """Node structurally removed by a concurrent mutation."""
        return (self.index.tolerate_new_ids
                and (node >= self.plan.count or self.plan.node_page[node] < 0))

    # -- beam selection --------------------------------------------------------
    def next_beam(self) -> list[tuple[float, int, bool]]:
        """Up to W (est, node, need_exact) picks; empty means terminate."""
        beam = []
        while len(beam) < self.params.W and self.cand:
            est, node = self.cand[0]
            if self.results_full() and est > self.worst_exact():
                break
            heapq.heappop(self.cand)
            if node in self.visited:
                continue
            if self.is_gone(node):
                self.visited.add(node)
                continue
            need_exact = (not self.results_full()) or est < self.worst_exact()
            beam.append((est, node, need_exact))
        return beam

    def simulate_compute(self) -> float:
        if self.sim is None:
            return 0.0
        m = self.metrics
        return (
            m.est_dist_computations * self.sim.est_comp_ns
            + m.exact_dist_computations * self.plan.dim * self.sim.exact_comp_ns_per_dim
            + len(self.records) * self.sim.parse_ns_per_entry
        ) / 1000.0


def _run_sync(run: _SearchRun) -> None:
    hop = 0
    while True:
        beam = run.next_beam()
        if not beam:
            break
        for _, node, need_exact in beam:
            rec = run.resolve_sync(node, need_exact, hop)
            if rec is None:
                run.visited.add(node)
                continue
            run.process(node, need_exact, rec)
        hop += 1
    run.metrics.hops = hop


def _run_compute_driven(run: _SearchRun) -> None:
    """Same schedule as sync; the beam's reads are awaited as one batch."""
    hop = 0
    while True:
        beam = run.next_beam()
        if not beam:
            break
        reads: list[tuple] = []
        seen: set[tuple] = set()
        for _, node, need_exact in beam:
            for key in run.preresolve(node, need_exact, hop):
                if key in seen or key in run.pages:
                    continue
                seen.add(key)
                if not run._probe_page_cache(key, hop):
                    reads.append(key)
        if reads:
            elapsed = 0.0
            if run.sim is not None:
                elapsed = run.sim.batch_us(len(reads), run.index.store.page_size)
            for tag in ("primary", "data"):
                pids = [pid for t, pid in reads if t == tag]
                if not pids:
                    continue
                store = run._store_for(tag)
                pages, real = store.read_batch_raw(pids)
                if run.sim is None:
                    elapsed += real
                for pid, data in zip(pids, pages):
                    key = (tag, pid)
                    if run.index.cache is not None:
                        run.index.cache.admit_page(key, data)
                    run._register_page(key, data, from_disk=True)
                run.metrics.ios += len(pids)
                run.metrics.bytes_read += len(pids) * store.page_size
            run.metrics.io_time_us += elapsed
        for _, node, need_exact in beam:
            rec = run._from_buffer(node, need_exact)
            if rec is None or not rec.complete_for(need_exact):
                rec = run.resolve_sync(node, need_exact, hop)
            if rec is None:
                run.visited.add(node)
                continue
            run.process(node, need_exact, rec)
        hop += 1
    run.metrics.hops = hop


def _run_io_driven(run: _SearchRun) -> None:
    """Up to W outstanding reads; completions processed in arrival order.

    Arrivals are FIFO under the simulator's equal-latency channels
    (reversed in the adversarial test mode); in-flight page keys are
    deduplicated. Each completion counts as one hop.
    """
    W = run.params.W
    sim = run.sim
    clock = 0.0
    channels = [0.0] * (sim.parallel if sim is not None else 1)
    inflight: list[dict] = []
    inflight_keys: set[tuple] = set()
    hop = 0

    def issue_next() -> bool:
        nonlocal clock
        if not run.cand:
            return False
        est, _ = run.cand[0]
        if run.results_full() and est > run.worst_exact():
            return False
        est, node = heapq.heappop(run.cand)
        if node in run.visited:
            return True
        if run.is_gone(node):
            run.visited.add(node)
            return True
        need_exact = (not run.results_full()) or est < run.worst_exact()
        ready = clock
        keys = []
        for key in run.preresolve(node, need_exact, hop):
            if key in run.pages:
                continue
            if key in inflight_keys:
                keys.append(key)
                continue
            if run._probe_page_cache(key, hop):
                continue
            tag, pid = key
            store = run._store_for(tag)
            data, real = store.read_page_raw(pid)
            run.metrics.ios += 1
            run.metrics.bytes_read += store.page_size
            if run.index.cache is not None:
                run.index.cache.admit_page(key, data)
            run._register_page(key, data, from_disk=True)
            inflight_keys.add(key)
            keys.append(key)
            if sim is not None:
                ch = min(range(len(channels)), key=lambda c: channels[c])
                start = max(clock, channels[ch])
                channels[ch] = start + sim.read_us(store.page_size)
                ready = max(ready, channels[ch])
            else:
                run.metrics.io_time_us += real
        inflight.append({"ready": ready, "node": node, "need_exact": need_exact,
                         "keys": keys})
        return True

    while True:
        while len(inflight) < W and issue_next():
            pass
        if not inflight:
            break
        if run.params.arrival_order == "reversed":
            idx = len(inflight) - 1
        elif sim is not None:
            idx = min(range(len(inflight)), key=lambda i: (inflight[i]["ready"], i))
        else:
            idx = 0
        item = inflight.pop(idx)
        for key in item["keys"]:
            inflight_keys.discard(key)
        if sim is not None and item["ready"] > clock:
            run.metrics.io_time_us += item["ready"] - clock
            clock = item["ready"]
        node = item["node"]
        if node in run.visited:
            continue
        before = run.simulate_compute()
        rec = run.resolve_sync(node, item["need_exact"], hop)
        if rec is None:
            run.visited.add(node)
            continue
        run.process(node, item["need_exact"], rec)
        if sim is not None:
            clock += run.simulate_compute() - before
        hop += 1
    run.metrics.hops = hop
    run.final_clock = max(clock, run.metrics.io_time_us)


def search(query: np.ndarray, params: SearchParams, index: SearchIndex) -> SearchResult:
    """Top-k search; returns ids, squared distances, and per-query metrics."""
    if params.k > index.count:
        raise ValueError(f"k={params.k} exceeds index size {index.count}")
    t0 = time.perf_counter()
    run = _SearchRun(index, query, params)
    run.seed()
    if params.exec_mode == "sync":
        _run_sync(run)
    elif params.exec_mode == "compute_driven":
        _run_compute_driven(run)
    else:
        _run_io_driven(run)
    ordered = sorted((-d, node) for d, node in run.results)
    top = ordered[: params.k]
    ids = np.array([node for _, node in top], dtype=np.int64)
    dists = np.array([d for d, _ in top], dtype=np.float32)
    m = run.metrics
    wall = (time.perf_counter() - t0) * 1e6
    if index.latency is not None:
        m.compute_time_us = run.simulate_compute()
        if params.exec_mode == "io_driven":
            m.wall_time_us = max(run.final_clock, m.io_time_us + 0.0)
        else:
            m.wall_time_us = m.io_time_us + m.compute_time_us
    else:
        m.wall_time_us = wall
        m.compute_time_us = max(wall - m.io_time_us, 0.0)
    return SearchResult(ids, dists, m)


METRICS_CSV_COLUMNS = [
    "query_id", "recall", "ios", "bytes_read", "bytes_useful", "hops",
    "est_comps", "exact_comps", "io_time_us", "compute_time_us", "wall_us",
]


def metrics_csv_row(query_id: int, recall: float | None, m: SearchMetrics) -> list:
    return [
        query_id,
        -1.0 if recall is None else round(recall, 6),
        m.ios, m.bytes_read, m.bytes_useful, m.hops,
        m.est_dist_computations, m.exact_dist_computations,
        round(m.io_time_us, 3), round(m.compute_time_us, 3), round(m.wall_time_us, 3),
    ]
