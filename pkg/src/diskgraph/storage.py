"""Memory/disk placement, the page block store, and the cache families.

The block store serves fixed-size pages from a file or an in-memory
buffer. With a latency model attached, every read/write advances
deterministic simulated time instead of relying on wall clocks, which is
what the benchmark harness uses for timing-sensitive comparisons.
"""

from __future__ import annotations

import math
import os
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .advisor import AdvisorInput, memory_model
from .dataio import VectorDataset
from .errors import PlanInfeasibleError
from .graph import ProximityGraph, bfs_depths, greedy_search_graph
from .layout import LayoutPlan, PageEntry

COMPONENTS = ("pq_codes", "adjacency", "raw_vectors", "nav_graph", "cache")


@dataclass
class StoragePlan:
    """Where each index component lives."""

    strategy: str  # major_in_disk | all_in_disk
    placement: dict[str, str]
    memory_budget: int
    model_total: int = 0

    @property
    def codes_on_pages(self) -> bool:
        return self.strategy == "all_in_disk"


def make_storage_plan(strategy: str, memory_budget: int, model: AdvisorInput) -> StoragePlan:
    """Build a placement, rejecting major-in-disk plans that exceed budget.

    The infeasibility error carries the fallback recommendation
    ("all_in_disk"), mirroring the advisor's switch rule.
    """
    if memory_budget <= 0:
        raise ValueError("memory budget must be positive")
    if strategy not in ("major_in_disk", "all_in_disk"):
        raise ValueError(f"unknown storage strategy {strategy!r}")
    total = memory_model(model)["M_total"]
    if strategy == "major_in_disk":
        if total > memory_budget:
            raise PlanInfeasibleError(
                f"major_in_disk needs {total} bytes but budget is {memory_budget}; "
                "switch to all_in_disk",
                recommended="all_in_disk",
            )
        placement = {
            "pq_codes": "memory",
            "adjacency": "disk",
            "raw_vectors": "disk",
            "nav_graph": "memory",
            "cache": "memory",
        }
    else:
        placement = {
            "pq_codes": "disk",
            "adjacency": "disk",
            "raw_vectors": "disk",
            "nav_graph": "memory",
            "cache": "memory",
        }
    return StoragePlan(strategy, placement, memory_budget, total)


@dataclass
class LatencyModel:
    """Deterministic device model: latency = fixed + per_byte * bytes.

    ``parallel`` caps how many outstanding reads make progress at once
    (an SSD queue-depth stand-in); a batch of n equal reads costs
    ceil(n / parallel) serial rounds. The *_compute knobs price search
    arithmetic so simulated wall clocks stay hardware-independent.
    """

    fixed_us: float = 80.0
    per_byte_ns: float = 0.25
    parallel: int = 16
    est_comp_ns: float = 50.0
    exact_comp_ns_per_dim: float = 1.0
    parse_ns_per_entry: float = 100.0

    def read_us(self, nbytes: int) -> float:
        return self.fixed_us + self.per_byte_ns * nbytes / 1000.0

    def batch_us(self, n_reads: int, nbytes: int) -> float:
        if n_reads <= 0:
            return 0.0
        rounds = math.ceil(n_reads / self.parallel)
        return rounds * self.read_us(nbytes)


class BlockStore:
    """Fixed-size page file with io counters and optional simulated latency.

    Thread-safe: reads go through os.pread (file mode) or a bytearray
    snapshot under lock (memory mode); counters are lock-protected.
    """

    def __init__(
        self,
        page_size: int,
        path: str | Path | None = None,
        buffer: bytearray | None = None,
        latency: LatencyModel | None = None,
    ):
        if (path is None) == (buffer is None):
            raise ValueError("exactly one of path or buffer is required")
        self.page_size = page_size
        self.latency = latency
        self.path = Path(path) if path is not None else None
        self._buffer = buffer
        self._fd = os.open(self.path, os.O_RDWR) if self.path is not None else None
        self._lock = threading.Lock()
        self.pages_read = 0
        self.bytes_read = 0
        self.pages_written = 0
        self.bytes_written = 0
        self.io_time_us = 0.0

    # -- constructors -------------------------------------------------
    @classmethod
    def create(cls, path: str | Path, page_size: int, image: bytes,
               latency: LatencyModel | None = None) -> "BlockStore":
        Path(path).write_bytes(image)
        return cls(page_size, path=path, latency=latency)

    @classmethod
    def in_memory(cls, page_size: int, image: bytes = b"",
                  latency: LatencyModel | None = None) -> "BlockStore":
        return cls(page_size, buffer=bytearray(image), latency=latency)

    # -- geometry ------------------------------------------------------
    @property
    def page_count(self) -> int:
        if self._buffer is not None:
            return len(self._buffer) // self.page_size
        return os.fstat(self._fd).st_size // self.page_size

    def extend(self, n_pages: int = 1) -> None:
        blank = bytes(self.page_size * n_pages)
        with self._lock:
            if self._buffer is not None:
                self._buffer.extend(blank)
            else:
                end = os.lseek(self._fd, 0, os.SEEK_END)
                os.pwrite(self._fd, blank, end)

    # -- io ------------------------------------------------------------
    def _charge_read(self, n_pages: int, elapsed_us: float) -> None:
        with self._lock:
            self.pages_read += n_pages
            self.bytes_read += n_pages * self.page_size
            self.io_time_us += elapsed_us

    def read_page_raw(self, page_id: int) -> tuple[bytes, float]:
        """Uncached read; returns (bytes, elapsed_us) and charges counters."""
        if page_id < 0 or page_id >= self.page_count:
            raise ValueError(f"page {page_id} out of range (0..{self.page_count - 1})")
        if self._buffer is not None:
            with self._lock:
                data = bytes(self._buffer[page_id * self.page_size : (page_id + 1) * self.page_size])
            elapsed = self.latency.read_us(self.page_size) if self.latency else 0.0
        elif self.latency is not None:
            data = os.pread(self._fd, self.page_size, page_id * self.page_size)
            elapsed = self.latency.read_us(self.page_size)
        else:
            t0 = time.perf_counter()
            data = os.pread(self._fd, self.page_size, page_id * self.page_size)
            elapsed = (time.perf_counter() - t0) * 1e6
        self._charge_read(1, elapsed)
        return data, elapsed

    def read_batch_raw(self, page_ids: list[int]) -> tuple[list[bytes], float]:
        """Concurrent batch read; elapsed reflects overlap under the model."""
        if not page_ids:
            return [], 0.0
        pages = []
        t0 = time.perf_counter()
        for pid in page_ids:
            if pid < 0 or pid >= self.page_count:
                raise ValueError(f"page {pid} out of range")
            if self._buffer is not None:
                with self._lock:
                    pages.append(bytes(self._buffer[pid * self.page_size : (pid + 1) * self.page_size]))
            else:
                pages.append(os.pread(self._fd, self.page_size, pid * self.page_size))
        if self.latency is not None:
            elapsed = self.latency.batch_us(len(page_ids), self.page_size)
        else:
            elapsed = (time.perf_counter() - t0) * 1e6
        self._charge_read(len(page_ids), elapsed)
        return pages, elapsed

    def write_page(self, page_id: int, data: bytes) -> float:
        if len(data) != self.page_size:
            raise ValueError(f"page write must be exactly {self.page_size} bytes")
        while page_id >= self.page_count:
            self.extend()
        if self._buffer is not None:
            with self._lock:
                self._buffer[page_id * self.page_size : (page_id + 1) * self.page_size] = data
            elapsed = self.latency.read_us(self.page_size) if self.latency else 0.0
        elif self.latency is not None:
            os.pwrite(self._fd, data, page_id * self.page_size)
            elapsed = self.latency.read_us(self.page_size)
        else:
            t0 = time.perf_counter()
            os.pwrite(self._fd, data, page_id * self.page_size)
            elapsed = (time.perf_counter() - t0) * 1e6
        with self._lock:
            self.pages_written += 1
            self.bytes_written += self.page_size
            self.io_time_us += elapsed
        return elapsed

    def reset_counters(self) -> None:
        with self._lock:
            self.pages_read = self.bytes_read = 0
            self.pages_written = self.bytes_written = 0
            self.io_time_us = 0.0

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None


# ---------------------------------------------------------------------------
# caches
# ---------------------------------------------------------------------------


class Cache:
    """Common stats and the probe interface all cache kinds share.

    Page-level entries are keyed by (file_tag, page_id). Node-level
    entries (static pins) hold decoded PageEntry records; an adjacency-only
    pin can satisfy a lookup only when the caller does not need the vector.
    """

    kind = "none"

    def __init__(self, budget_bytes: int):
        self.budget_bytes = budget_bytes
        self._lock = threading.Lock()
        self.stats_accesses: dict[int, int] = {}
        self.stats_hits: dict[int, int] = {}

    # stats ------------------------------------------------------------
    def record(self, hop: int, hit: bool) -> None:
        with self._lock:
            self.stats_accesses[hop] = self.stats_accesses.get(hop, 0) + 1
            if hit:
                self.stats_hits[hop] = self.stats_hits.get(hop, 0) + 1

    def reset_stats(self) -> None:
        with self._lock:
            self.stats_accesses.clear()
            self.stats_hits.clear()

    @property
    def total_accesses(self) -> int:
        return sum(self.stats_accesses.values())

    @property
    def total_hits(self) -> int:
        return sum(self.stats_hits.values())

    # residency --------------------------------------------------------
    @property
    def resident_bytes(self) -> int:
        return 0

    # probes (overridden per kind) --------------------------------------
    def lookup_node(self, node: int, need_vector: bool) -> PageEntry | None:
        return None

    def lookup_page(self, key: tuple) -> bytes | None:
        return None

    def admit_page(self, key: tuple, data: bytes) -> None:
        pass


class StaticCache(Cache):
    """Pinned node records chosen ahead of time; never evicted."""

    def __init__(self, budget_bytes: int, mode: str):
        super().__init__(budget_bytes)
        if mode not in ("hot", "graph_prioritized"):
            raise ValueError(f"unknown static cache mode {mode!r}")
        self.kind = f"static_{mode}"
        self.mode = mode
        self.entries: dict[int, PageEntry] = {}
        self.pinned_pages: dict[tuple, bytes] = {}
        self._resident = 0

    def pin_node(self, entry: PageEntry, cost: int) -> bool:
        if self._resident + cost > self.budget_bytes:
            return False
        self.entries[entry.node_id] = entry
        self._resident += cost
        return True

    def pin_page(self, key: tuple, data: bytes) -> bool:
        if self._resident + len(data) > self.budget_bytes:
            return False
        self.pinned_pages[key] = data
        self._resident += len(data)
        return True

    @property
    def resident_bytes(self) -> int:
        return self._resident

    def lookup_node(self, node: int, need_vector: bool) -> PageEntry | None:
        e = self.entries.get(node)
        if e is None:
            return None
        if need_vector and e.vector is None:
            return None
        return e

    def lookup_page(self, key: tuple) -> bytes | None:
        return self.pinned_pages.get(key)


class DynamicCache(Cache):
    """Page-granularity replacement cache (LRU by default, LFU optional)."""

    def __init__(self, budget_bytes: int, page_size: int, policy: str = "lru"):
        super().__init__(budget_bytes)
        if policy not in ("lru", "lfu"):
            raise ValueError(f"unknown replacement policy {policy!r}")
        self.kind = f"dynamic_{policy}"
        self.policy = policy
        self.page_size = page_size
        self.capacity = budget_bytes // page_size
        self._pages: OrderedDict[tuple, bytes] = OrderedDict()
        self._freq: dict[tuple, int] = {}
        self._tick = 0
        self._last_use: dict[tuple, int] = {}

    @property
    def resident_bytes(self) -> int:
        return len(self._pages) * self.page_size

    def lookup_page(self, key: tuple) -> bytes | None:
        with self._lock:
            data = self._pages.get(key)
            if data is not None:
                self._tick += 1
                if self.policy == "lru":
                    self._pages.move_to_end(key)
                else:
                    self._freq[key] = self._freq.get(key, 0) + 1
                    self._last_use[key] = self._tick
            return data

    def admit_page(self, key: tuple, data: bytes) -> None:
        if self.capacity < 1:
            return
        with self._lock:
            if key in self._pages:
                if self.policy == "lru":
                    self._pages.move_to_end(key)
                return
            while len(self._pages) >= self.capacity:
                if self.policy == "lru":
                    self._pages.popitem(last=False)
                else:
                    victim = min(
                        self._pages, key=lambda k: (self._freq.get(k, 0), self._last_use.get(k, 0))
                    )
                    del self._pages[victim]
                    self._freq.pop(victim, None)
                    self._last_use.pop(victim, None)
            self._tick += 1
            self._pages[key] = data
            self._freq[key] = self._freq.get(key, 0) + 1
            self._last_use[key] = self._tick


class HybridCache(Cache):
    """Static region for pinned records plus a dynamic region for churn."""

    def __init__(self, budget_bytes: int, page_size: int, static_fraction: float = 0.5,
                 static_mode: str = "hot", policy: str = "lru"):
        super().__init__(budget_bytes)
        if not (0.0 <= static_fraction <= 1.0):
            raise ValueError("static_fraction must be in [0, 1]")
        self.kind = "hybrid"
        self.static = StaticCache(int(budget_bytes * static_fraction), static_mode)
        self.dynamic = DynamicCache(budget_bytes - self.static.budget_bytes, page_size, policy)

    @property
    def resident_bytes(self) -> int:
        return self.static.resident_bytes + self.dynamic.resident_bytes

    def lookup_node(self, node: int, need_vector: bool) -> PageEntry | None:
        return self.static.lookup_node(node, need_vector)

    def lookup_page(self, key: tuple) -> bytes | None:
        hit = self.static.lookup_page(key)
        if hit is not None:
            return hit
        return self.dynamic.lookup_page(key)

    def admit_page(self, key: tuple, data: bytes) -> None:
        self.dynamic.admit_page(key, data)

    def pin_node(self, entry: PageEntry, cost: int) -> bool:
        return self.static.pin_node(entry, cost)


def read_page(store: BlockStore, page_id: int, cache: Cache | None = None,
              hop: int = 0, file_tag: str = "primary") -> bytes:
    """Cache-aware page read: probe first, then hit the device and admit.

    A cache hit increments no io counter; a miss charges the store and
    (for dynamic/hybrid caches) admits the page with eviction as needed.
    """
    key = (file_tag, page_id)
    if cache is not None:
        data = cache.lookup_page(key)
        if data is not None:
            cache.record(hop, True)
            return data
    data, _ = store.read_page_raw(page_id)
    if cache is not None:
        cache.record(hop, False)
        cache.admit_page(key, data)
    return data


def per_hop_hit_rate(cache: Cache) -> list[float]:
    """hits[h] / accesses[h] for each hop with at least one access."""
    rates = []
    for hop in sorted(cache.stats_accesses):
        acc = cache.stats_accesses[hop]
        if acc == 0:
            continue
        rates.append(cache.stats_hits.get(hop, 0) / acc)
    return rates


def warmup_touch_counts(
    graph: ProximityGraph, dataset: VectorDataset, warmup_queries: np.ndarray, L: int = 100
) -> np.ndarray:
    """Per-node expansion counts from in-memory warm-up searches."""
    counts = np.zeros(graph.count, dtype=np.int64)
    for q in np.atleast_2d(warmup_queries):
        ids, _ = greedy_search_graph(graph, dataset.data, q, L)
        counts[ids] += 1
    return counts


def build_static_cache(
    graph: ProximityGraph,
    dataset: VectorDataset,
    plan: LayoutPlan,
    budget: int,
    mode: str,
    warmup_queries: np.ndarray | None = None,
    warmup_L: int = 100,
    codes: np.ndarray | None = None,
) -> StaticCache:
    """Pin records for the hottest nodes seen in a warm-up trace.

    hot mode pins whole entries (vector included) by descending touch
    frequency, ties toward the lower id. graph_prioritized pins
    adjacency-only records by descending frequency, then BFS depth from
    the entry node, covering several times more nodes per byte.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    cache = StaticCache(budget, mode)
    if budget == 0:
        return cache
    if warmup_queries is not None and len(warmup_queries):
        freq = warmup_touch_counts(graph, dataset, warmup_queries, warmup_L)
    else:
        freq = np.zeros(graph.count, dtype=np.int64)
    if mode == "hot":
        order = np.lexsort((np.arange(graph.count), -freq))
        cost = plan.entry_stride if plan.global_kind == "coupled" else \
            plan.adjacency_record_stride + plan.data_stride
    else:
        depths = bfs_depths(graph, graph.entry_id)
        order = np.lexsort((np.arange(graph.count), depths, -freq))
        cost = plan.replica_stride if plan.global_kind == "coupled" else plan.adjacency_record_stride
    data = dataset.data
    for node in order:
        node = int(node)
        nbrs = graph.neighbors(node).astype(np.int64)
        entry = PageEntry(
            node_id=node,
            neighbors=nbrs,
            vector=data[node].astype(np.float32) if mode == "hot" else None,
            own_code=None if codes is None else codes[node],
            neighbor_codes=None if codes is None else codes[nbrs],
        )
        if not cache.pin_node(entry, cost):
            break
    return cache


def make_cache(
    kind: str,
    budget: int,
    page_size: int,
    graph: ProximityGraph | None = None,
    dataset: VectorDataset | None = None,
    plan: LayoutPlan | None = None,
    warmup_queries: np.ndarray | None = None,
    static_fraction: float = 0.5,
    codes: np.ndarray | None = None,
) -> Cache | None:
    """Cache factory for the CLI / benchmark configs; kind "none" -> None."""
    if kind in ("none", "", None):
        return None
    if kind == "dynamic_lru":
        return DynamicCache(budget, page_size, "lru")
    if kind == "dynamic_lfu":
        return DynamicCache(budget, page_size, "lfu")
    if kind in ("static_hot", "static_graph"):
        mode = "hot" if kind == "static_hot" else "graph_prioritized"
        return build_static_cache(graph, dataset, plan, budget, mode, warmup_queries, codes=codes)
    if kind == "hybrid":
        hybrid = HybridCache(budget, page_size, static_fraction)
        if hybrid.static.budget_bytes > 0:
            pinned = build_static_cache(
                graph, dataset, plan, hybrid.static.budget_bytes, "hot", warmup_queries, codes=codes
            )
            hybrid.static.entries = pinned.entries
            hybrid.static._resident = pinned._resident
        return hybrid
    raise ValueError(f"unknown cache kind {kind!r}")
