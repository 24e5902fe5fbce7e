"""Node-to-page placement strategies and bit-exact page serialization.

Global layouts: coupled (vector + adjacency share a page entry) and
decoupled (adjacency in index pages, bare vectors in data pages). Local
layouts for coupled pages: id, heuristic (BFS neighbor packing),
clustering (balanced bisection), and graph_replicated (one owner per page
plus replicated neighbor adjacency lists).

Coupled entry encoding: [u32 node_id][u16 degree][R x u32 slots]
[(1+R) x m pq bytes, all-in-disk only][d x s_d vector]; replicas drop the
vector. Index records: [u32 node_id][R x u32 slots][pq bytes]. Data pages
are headerless vector slots resolved through the plan's table.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import ELEM_DTYPES, ELEM_SIZES, VectorDataset
from .errors import FormatError, IndexCorruptionError, LayoutInfeasibleError
from .graph import ProximityGraph
from .pq import kmeans

PAGE_HEADER = 2  # u16 entry count
ID_BYTES = 4     # s_i: node ids are uint32
FILE_SENTINEL = 0xFFFFFFFF


def bpf(page_size: int, d: int, s_d: int, R: int, s_i: int = ID_BYTES) -> float:
    """Block packing factor: page_size / (d*s_d + (1+R)*s_i)."""
    if min(page_size, d, s_d, R, s_i) <= 0:
        raise ValueError("all block packing factor arguments must be positive")
    return page_size / (d * s_d + (1 + R) * s_i)


def entry_stride(d: int, s_d: int, R: int, pq_m: int = 0) -> int:
    """On-page byte size of one full (owner) entry."""
    return 4 + 2 + R * ID_BYTES + (1 + R) * pq_m + d * s_d


def replica_stride(d: int, s_d: int, R: int, pq_m: int = 0) -> int:
    """Owner entry minus the vector payload."""
    return 4 + 2 + R * ID_BYTES + (1 + R) * pq_m


def adjacency_record_stride(R: int, pq_m: int = 0) -> int:
    """Decoupled index record: node id + R sentinel-padded slots (+ pq)."""
    return (1 + R) * ID_BYTES + (1 + R) * pq_m


@dataclass
class LayoutPlan:
    """Placement of every node's records onto fixed-size pages."""

    global_kind: str
    local_kind: str
    page_size: int
    node_page: np.ndarray          # (N,) int64: page of the primary record
    node_slot: np.ndarray          # (N,) int64: slot within that page
    page_count: int
    R: int
    dim: int
    elem_type: str
    pq_m: int = 0                  # >0 when pq codes ride on pages (all-in-disk)
    capacity: int = 0              # primary entries per page (coupled/index pages)
    data_page: np.ndarray | None = None   # decoupled only
    data_slot: np.ndarray | None = None
    data_page_count: int = 0
    data_capacity: int = 0
    replicas: dict[int, np.ndarray] = field(default_factory=dict)  # page -> owner ids replicated there

    @property
    def elem_size(self) -> int:
        return ELEM_SIZES[self.elem_type]

    @property
    def count(self) -> int:
        return len(self.node_page)

    @property
    def entry_stride(self) -> int:
        return entry_stride(self.dim, self.elem_size, self.R, self.pq_m)

    @property
    def replica_stride(self) -> int:
        return replica_stride(self.dim, self.elem_size, self.R, self.pq_m)

    @property
    def adjacency_record_stride(self) -> int:
        return adjacency_record_stride(self.R, self.pq_m)

    @property
    def data_stride(self) -> int:
        return self.dim * self.elem_size

    def locate(self, node: int) -> tuple[int, int]:
        return int(self.node_page[node]), int(self.node_slot[node])

    def locate_data(self, node: int) -> tuple[int, int]:
        return int(self.data_page[node]), int(self.data_slot[node])

    def total_bytes(self) -> int:
        return (self.page_count + self.data_page_count) * self.page_size

    def cross_page_edges(self, graph: ProximityGraph) -> int:
        """Directed edges whose endpoints sit on different primary pages."""
        total = 0
        for node in range(graph.count):
            nbrs = graph.neighbors(node)
            total += int(np.sum(self.node_page[nbrs] != self.node_page[node]))
        return total


def _coupled_capacity(page_size: int, d: int, s_d: int, R: int, pq_m: int) -> int:
    cap = (page_size - PAGE_HEADER) // entry_stride(d, s_d, R, pq_m)
    if cap < 1:
        raise LayoutInfeasibleError(
            f"page size {page_size} cannot fit one entry of "
            f"{entry_stride(d, s_d, R, pq_m)} bytes (d={d}, R={R})"
        )
    return int(cap)


def _fill_packed(order: np.ndarray, capacity: int) -> tuple[np.ndarray, np.ndarray, int]:
    n = len(order)
    node_page = np.empty(n, dtype=np.int64)
    node_slot = np.empty(n, dtype=np.int64)
    pos = np.arange(n, dtype=np.int64)
    node_page[order] = pos // capacity
    node_slot[order] = pos % capacity
    return node_page, node_slot, int(np.ceil(n / capacity))


def plan_local_id(
    graph: ProximityGraph, dataset: VectorDataset, page_size: int, pq_m: int = 0
) -> LayoutPlan:
    """Nodes packed consecutively by id, floor(capacity) per page."""
    cap = _coupled_capacity(page_size, dataset.dim, dataset.elem_size, graph.R, pq_m)
    order = np.arange(graph.count, dtype=np.int64)
    node_page, node_slot, pages = _fill_packed(order, cap)
    return LayoutPlan(
        "coupled", "id", page_size, node_page, node_slot, pages,
        graph.R, dataset.dim, dataset.elem_type, pq_m, cap,
    )


def bfs_order(graph: ProximityGraph) -> np.ndarray:
    """BFS order from entry_id; unreached nodes appended in id order."""
    n = graph.count
    seen = np.zeros(n, dtype=bool)
    order = np.empty(n, dtype=np.int64)
    k = 0
    queue = deque([graph.entry_id])
    seen[graph.entry_id] = True
    while queue:
        node = queue.popleft()
        order[k] = node
        k += 1
        for nb in graph.neighbors(node):
            if not seen[nb]:
                seen[nb] = True
                queue.append(int(nb))
    if k < n:
        rest = np.nonzero(~seen)[0]
        order[k:] = rest
    return order


def plan_local_heuristic(
    graph: ProximityGraph, dataset: VectorDataset, page_size: int, pq_m: int = 0
) -> LayoutPlan:
    """Greedy neighbor packing in BFS order.

    Each node joins the non-full page holding most of its already-placed
    neighbors (ties and the zero-count case pick the lowest page id); a
    new page opens only when every page is full.
    """
    import heapq

    cap = _coupled_capacity(page_size, dataset.dim, dataset.elem_size, graph.R, pq_m)
    n = graph.count
    order = bfs_order(graph)
    node_page = np.full(n, -1, dtype=np.int64)
    node_slot = np.full(n, -1, dtype=np.int64)
    fill: list[int] = []
    open_pages: list[int] = []  # min-heap of non-full page ids (lazy deletion)
    for node in order:
        counts: dict[int, int] = {}
        for nb in graph.neighbors(node):
            p = node_page[nb]
            if p >= 0 and fill[p] < cap:
                counts[int(p)] = counts.get(int(p), 0) + 1
        best = -1
        if counts:
            best_count = max(counts.values())
            best = min(p for p, c in counts.items() if c == best_count)
        else:
            while open_pages and fill[open_pages[0]] >= cap:
                heapq.heappop(open_pages)
            if open_pages:
                best = open_pages[0]
        if best < 0:
            best = len(fill)
            fill.append(0)
            heapq.heappush(open_pages, best)
        node_page[node] = best
        node_slot[node] = fill[best]
        fill[best] += 1
    return LayoutPlan(
        "coupled", "heuristic", page_size, node_page, node_slot, len(fill),
        graph.R, dataset.dim, dataset.elem_type, pq_m, cap,
    )


def _bisect_cluster(data: np.ndarray, ids: np.ndarray, cap: int, seed: int, out: list) -> None:
    n = len(ids)
    pages = int(np.ceil(n / cap))
    if pages <= 1:
        out.append(ids)
        return
    left_n = min(n, int(np.ceil(pages / 2)) * cap)
    centers, _, _, _ = kmeans(data[ids], 2, iters=8, seed=seed)
    d0 = np.sum((data[ids].astype(np.float64) - centers[0]) ** 2, axis=1)
    d1 = np.sum((data[ids].astype(np.float64) - centers[1]) ** 2, axis=1)
    # most strongly left-leaning first; overflow spills across the boundary
    rank = np.lexsort((ids, d0 - d1))
    _bisect_cluster(data, ids[rank[:left_n]], cap, seed * 2 + 1, out)
    _bisect_cluster(data, ids[rank[left_n:]], cap, seed * 2 + 2, out)


def plan_local_clustering(
    graph: ProximityGraph, dataset: VectorDataset, page_size: int, seed: int = 0, pq_m: int = 0
) -> LayoutPlan:
    """Balanced clustering over raw vectors, one cluster per page.

    Realized as seeded recursive 2-means bisection with capacity-aligned
    splits: ceil(N/capacity) pages, every cluster at most capacity nodes,
    overflow spilling to the nearer half.
    """
    cap = _coupled_capacity(page_size, dataset.dim, dataset.elem_size, graph.R, pq_m)
    n = graph.count
    clusters: list[np.ndarray] = []
    _bisect_cluster(dataset.data, np.arange(n, dtype=np.int64), cap, seed + 1, clusters)
    node_page = np.empty(n, dtype=np.int64)
    node_slot = np.empty(n, dtype=np.int64)
    for page, ids in enumerate(clusters):
        ids_sorted = np.sort(ids)
        node_page[ids_sorted] = page
        node_slot[ids_sorted] = np.arange(len(ids_sorted))
    return LayoutPlan(
        "coupled", "clustering", page_size, node_page, node_slot, len(clusters),
        graph.R, dataset.dim, dataset.elem_type, pq_m, cap,
    )


def plan_local_graph_replicated(
    graph: ProximityGraph, dataset: VectorDataset, page_size: int, pq_m: int = 0
) -> LayoutPlan:
    """One owner per page; spare bytes hold the adjacency lists of the
    owner's nearest neighbors (ascending exact distance), marked as replicas."""
    est = entry_stride(dataset.dim, dataset.elem_size, graph.R, pq_m)
    if PAGE_HEADER + est > page_size:
        raise LayoutInfeasibleError(
            f"page size {page_size} cannot fit one owner record of {est} bytes"
        )
    rst = replica_stride(dataset.dim, dataset.elem_size, graph.R, pq_m)
    per_page = (page_size - PAGE_HEADER - est) // rst
    n = graph.count
    node_page = np.arange(n, dtype=np.int64)
    node_slot = np.zeros(n, dtype=np.int64)
    replicas: dict[int, np.ndarray] = {}
    data = dataset.data
    for node in range(n):
        nbrs = graph.neighbors(node)
        take = min(per_page, len(nbrs))
        if take > 0:
            d2 = np.sum((data[nbrs].astype(np.float64) - data[node]) ** 2, axis=1)
            picked = nbrs[np.lexsort((nbrs, d2))][:take]
            replicas[node] = picked.astype(np.int64)
    return LayoutPlan(
        "coupled", "graph_replicated", page_size, node_page, node_slot, n,
        graph.R, dataset.dim, dataset.elem_type, pq_m, 1 + int(per_page),
        replicas=replicas,
    )


def plan_global_decoupled(
    graph: ProximityGraph, dataset: VectorDataset, page_size: int, pq_m: int = 0
) -> LayoutPlan:
    """Adjacency records in index pages, bare vectors in data pages, both
    packed in heuristic (BFS) order."""
    rec = adjacency_record_stride(graph.R, pq_m)
    idx_cap = (page_size - PAGE_HEADER) // rec
    if idx_cap < 1:
        raise LayoutInfeasibleError(
            f"page size {page_size} cannot fit one adjacency record of {rec} bytes"
        )
    vec = dataset.dim * dataset.elem_size
    data_cap = page_size // vec if vec <= page_size else 0
    if data_cap < 1:
        raise LayoutInfeasibleError(
            f"page size {page_size} cannot fit one {vec}-byte vector"
        )
    order = bfs_order(graph)
    node_page, node_slot, pages = _fill_packed(order, int(idx_cap))
    data_page, data_slot, data_pages = _fill_packed(order, int(data_cap))
    return LayoutPlan(
        "decoupled", "heuristic", page_size, node_page, node_slot, pages,
        graph.R, dataset.dim, dataset.elem_type, pq_m, int(idx_cap),
        data_page=data_page, data_slot=data_slot,
        data_page_count=data_pages, data_capacity=int(data_cap),
    )


@dataclass
class PageEntry:
    """Decoded page record. Replicas carry adjacency but no vector."""

    node_id: int
    neighbors: np.ndarray
    vector: np.ndarray | None = None
    own_code: np.ndarray | None = None
    neighbor_codes: np.ndarray | None = None
    is_replica: bool = False


class _EntryWriter:
    """Packs entries into a (pages, page_size) byte image via strided views."""

    def __init__(self, plan: LayoutPlan, graph: ProximityGraph, data_bytes: np.ndarray,
                 codes: np.ndarray | None):
        self.plan = plan
        self.graph = graph
        self.data_bytes = data_bytes
        self.codes = codes

    def entry_bytes(self, node: int, with_vector: bool) -> bytes:
        plan, graph = self.plan, self.graph
        deg = int(graph.degrees[node])
        parts = [
            np.array([node], dtype="<u4").tobytes(),
            np.array([deg], dtype="<u2").tobytes(),
        ]
        slots = np.full(plan.R, FILE_SENTINEL, dtype="<u4")
        slots[:deg] = graph.adjacency[node, :deg].astype("<u4")
        parts.append(slots.tobytes())
        if plan.pq_m:
            block = np.zeros((1 + plan.R) * plan.pq_m, dtype=np.uint8)
            block[: plan.pq_m] = self.codes[node]
            nbrs = graph.adjacency[node, :deg]
            block[plan.pq_m : plan.pq_m * (1 + deg)] = self.codes[nbrs].ravel()
            parts.append(block.tobytes())
        if with_vector:
            parts.append(self.data_bytes[node].tobytes())
        return b"".join(parts)


def serialize_pages(
    plan: LayoutPlan,
    graph: ProximityGraph,
    dataset: VectorDataset,
    codes: np.ndarray | None = None,
) -> tuple[bytes, bytes | None]:
    """Render (primary_pages, data_pages_or_None) byte images.

    Every page is exactly page_size bytes; an entry that would overflow its
    page means the plan itself is broken and raises IndexCorruptionError.
    """
    if plan.pq_m and codes is None:
        raise ValueError("plan reserves pq space but no codes were given")
    data_bytes = np.ascontiguousarray(
        dataset.data.astype(ELEM_DTYPES[plan.elem_type])
    ).view(np.uint8).reshape(dataset.count, plan.data_stride)
    writer = _EntryWriter(plan, graph, data_bytes, codes)
    image = np.zeros((plan.page_count, plan.page_size), dtype=np.uint8)
    counts = np.zeros(plan.page_count, dtype="<u2")
    if plan.global_kind == "coupled":
        est = plan.entry_stride
        rst = plan.replica_stride
        for node in range(plan.count):
            page, slot = plan.locate(node)
            off = PAGE_HEADER + slot * est
            rec = writer.entry_bytes(node, with_vector=True)
            if off + len(rec) > plan.page_size:
                raise IndexCorruptionError(f"entry for node {node} overflows page {page}")
            image[page, off : off + len(rec)] = np.frombuffer(rec, dtype=np.uint8)
            counts[page] += 1
        for page, owners in plan.replicas.items():
            base = PAGE_HEADER + est
            for i, owner in enumerate(owners):
                off = base + i * rst
                rec = writer.entry_bytes(int(owner), with_vector=False)
                if off + len(rec) > plan.page_size:
                    raise IndexCorruptionError(f"replica on page {page} overflows")
                image[page, off : off + len(rec)] = np.frombuffer(rec, dtype=np.uint8)
                counts[page] += 1
        image[:, :PAGE_HEADER] = counts[:, None].view(np.uint8).reshape(plan.page_count, 2)
        return image.tobytes(), None
    # decoupled: index pages with adjacency records + headerless data pages
    rec_len = plan.adjacency_record_stride
    for node in range(plan.count):
        page, slot = plan.locate(node)
        off = PAGE_HEADER + slot * rec_len
        deg = int(graph.degrees[node])
        slots = np.full(1 + plan.R, FILE_SENTINEL, dtype="<u4")
        slots[0] = node
        slots[1 : 1 + deg] = graph.adjacency[node, :deg].astype("<u4")
        rec = slots.tobytes()
        if plan.pq_m:
            block = np.zeros((1 + plan.R) * plan.pq_m, dtype=np.uint8)
            block[: plan.pq_m] = codes[node]
            block[plan.pq_m : plan.pq_m * (1 + deg)] = codes[graph.adjacency[node, :deg]].ravel()
            rec += block.tobytes()
        if off + len(rec) > plan.page_size:
            raise IndexCorruptionError(f"index record for node {node} overflows page {page}")
        image[page, off : off + len(rec)] = np.frombuffer(rec, dtype=np.uint8)
        counts[page] += 1
    image[:, :PAGE_HEADER] = counts[:, None].view(np.uint8).reshape(plan.page_count, 2)
    data_image = np.zeros((plan.data_page_count, plan.page_size), dtype=np.uint8)
    for node in range(plan.count):
        page, slot = plan.locate_data(node)
        off = slot * plan.data_stride
        data_image[page, off : off + plan.data_stride] = data_bytes[node]
    return image.tobytes(), data_image.tobytes()


def deserialize_page(page: bytes, plan: LayoutPlan, kind: str = "primary") -> list[PageEntry]:
    """Decode one page image back into entries.

    ``kind`` is "primary" (coupled or index page) or "data". Data pages
    cannot be decoded standalone (ids live in the plan), so callers pass
    the page's node list via plan lookups instead; here we only support
    primary pages and raise on malformed counts.
    """
    if kind != "primary":
        raise ValueError("only primary pages are self-describing")
    if len(page) != plan.page_size:
        raise FormatError(f"page has {len(page)} bytes, expected {plan.page_size}")
    count = int(np.frombuffer(page, dtype="<u2", count=1)[0])
    entries: list[PageEntry] = []
    if plan.global_kind == "coupled":
        max_entries = 1 + len(max(plan.replicas.values(), key=len, default=[])) \
            if plan.local_kind == "graph_replicated" else plan.capacity
        if count > max_entries:
            raise FormatError(f"entry count {count} exceeds page capacity {max_entries}")
        est, rst = plan.entry_stride, plan.replica_stride
        off = PAGE_HEADER
        for i in range(count):
            is_replica = plan.local_kind == "graph_replicated" and i > 0
            stride = rst if is_replica else est
            rec = page[off : off + stride]
            node = int(np.frombuffer(rec, dtype="<u4", count=1)[0])
            deg = int(np.frombuffer(rec, dtype="<u2", count=1, offset=4)[0])
            if deg > plan.R:
                raise FormatError(f"degree {deg} exceeds R={plan.R} in page entry")
            nbrs = np.frombuffer(rec, dtype="<u4", count=plan.R, offset=6)[:deg].astype(np.int64)
            pos = 6 + plan.R * ID_BYTES
            own_code = nbr_codes = None
            if plan.pq_m:
                own_code = np.frombuffer(rec, dtype=np.uint8, count=plan.pq_m, offset=pos).copy()
                nbr_codes = np.frombuffer(
                    rec, dtype=np.uint8, count=plan.R * plan.pq_m, offset=pos + plan.pq_m
                ).reshape(plan.R, plan.pq_m)[:deg].copy()
                pos += (1 + plan.R) * plan.pq_m
            vector = None
            if not is_replica:
                vector = np.frombuffer(
                    rec, dtype=ELEM_DTYPES[plan.elem_type], count=plan.dim, offset=pos
                ).astype(np.float32)
            entries.append(PageEntry(node, nbrs, vector, own_code, nbr_codes, is_replica))
            off += stride
        return entries
    if count > plan.capacity:
        raise FormatError(f"entry count {count} exceeds page capacity {plan.capacity}")
    rec_len = plan.adjacency_record_stride
    off = PAGE_HEADER
    for _ in range(count):
        rec = page[off : off + rec_len]
        slots = np.frombuffer(rec, dtype="<u4", count=1 + plan.R)
        node = int(slots[0])
        nbrs = slots[1:][slots[1:] != FILE_SENTINEL].astype(np.int64)
        own_code = nbr_codes = None
        if plan.pq_m:
            pos = (1 + plan.R) * ID_BYTES
            own_code = np.frombuffer(rec, dtype=np.uint8, count=plan.pq_m, offset=pos).copy()
            nbr_codes = np.frombuffer(
                rec, dtype=np.uint8, count=plan.R * plan.pq_m, offset=pos + plan.pq_m
            ).reshape(plan.R, plan.pq_m)[: len(nbrs)].copy()
        entries.append(PageEntry(node, nbrs, None, own_code, nbr_codes))
        off += rec_len
    return entries


PLANNERS = {
    ("coupled", "id"): plan_local_id,
    ("coupled", "heuristic"): plan_local_heuristic,
    ("coupled", "clustering"): plan_local_clustering,
    ("coupled", "graph_replicated"): plan_local_graph_replicated,
}


def make_plan(
    graph: ProximityGraph,
    dataset: VectorDataset,
    page_size: int,
    global_kind: str = "coupled",
    local_kind: str = "id",
    seed: int = 0,
    pq_m: int = 0,
) -> LayoutPlan:
    """Dispatch to the planner for (global_kind, local_kind)."""
    if global_kind == "decoupled":
        return plan_global_decoupled(graph, dataset, page_size, pq_m)
    try:
        planner = PLANNERS[(global_kind, local_kind)]
    except KeyError:
        raise ValueError(f"unknown layout {global_kind}/{local_kind}") from None
    if local_kind == "clustering":
        return planner(graph, dataset, page_size, seed=seed, pq_m=pq_m)
    return planner(graph, dataset, page_size, pq_m=pq_m)


def save_plan(path: str | Path, plan: LayoutPlan) -> None:
    """Little-endian manifest: [u32 json length][json header][binary tables]."""
    header = {
        "global_kind": plan.global_kind,
        "local_kind": plan.local_kind,
        "page_size": plan.page_size,
        "page_count": plan.page_count,
        "count": plan.count,
        "R": plan.R,
        "dim": plan.dim,
        "elem_type": plan.elem_type,
        "pq_m": plan.pq_m,
        "capacity": plan.capacity,
        "data_page_count": plan.data_page_count,
        "data_capacity": plan.data_capacity,
        "has_data_map": plan.data_page is not None,
        "replica_pages": len(plan.replicas),
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        np.array([len(blob)], dtype="<u4").tofile(f)
        f.write(blob)
        plan.node_page.astype("<u4").tofile(f)
        plan.node_slot.astype("<u4").tofile(f)
        if plan.data_page is not None:
            plan.data_page.astype("<u4").tofile(f)
            plan.data_slot.astype("<u4").tofile(f)
        for page in sorted(plan.replicas):
            owners = plan.replicas[page]
            np.array([page, len(owners)], dtype="<u4").tofile(f)
            owners.astype("<u4").tofile(f)


def load_plan(path: str | Path) -> LayoutPlan:
    raw = Path(path).read_bytes()
    hlen = int(np.frombuffer(raw, dtype="<u4", count=1)[0])
    header = json.loads(raw[4 : 4 + hlen].decode())
    off = 4 + hlen
    n = header["count"]

    def take(count):
        nonlocal off
        out = np.frombuffer(raw, dtype="<u4", count=count, offset=off).astype(np.int64)
        off += 4 * count
        return out

    node_page = take(n)
    node_slot = take(n)
    data_page = data_slot = None
    if header["has_data_map"]:
        data_page = take(n)
        data_slot = take(n)
    replicas: dict[int, np.ndarray] = {}
    for _ in range(header["replica_pages"]):
        page, cnt = (int(v) for v in take(2))
        replicas[page] = take(cnt)
    return LayoutPlan(
        header["global_kind"], header["local_kind"], header["page_size"],
        node_page, node_slot, header["page_count"], header["R"], header["dim"],
        header["elem_type"], header["pq_m"], header["capacity"],
        data_page=data_page, data_slot=data_slot,
        data_page_count=header["data_page_count"], data_capacity=header["data_capacity"],
        replicas=replicas,
    )
