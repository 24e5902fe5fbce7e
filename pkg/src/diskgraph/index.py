"""Index assembly: build artifacts, persist them, and open them for search.

A built index directory holds:
    graph.bin        adjacency + entry node
    pq_codebook.bin  trained product quantizer
    pq_codes.bin     count x m code bytes
    layout.plan      node -> (page, slot) manifest
    pages.bin        primary page file
    data_pages.bin   decoupled layouts only
    nav.bin          sampled navigation graph (ids + vectors)
    nav_graph.bin    adjacency over the sample
    index.json       dims, strategies, build parameters
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .advisor import AdvisorInput
from .dataio import VectorDataset
from .graph import (
    NavGraph,
    ProximityGraph,
    build_graph,
    load_graph,
    sample_entry_graph,
    save_graph,
)
from .layout import LayoutPlan, load_plan, make_plan, save_plan, serialize_pages
from .pq import PQCodebook, load_codebook, load_codes, save_codebook, save_codes, train_pq
from .search import SearchIndex
from .storage import BlockStore, Cache, LatencyModel, StoragePlan, make_storage_plan


@dataclass
class BuildReport:
    graph_seconds: float
    pq_seconds: float
    layout_seconds: float
    pq_dist_evals: int
    page_count: int
    data_page_count: int


@dataclass
class BuiltIndex:
    """In-memory build artifacts prior to (or after) persistence."""

    dataset: VectorDataset
    graph: ProximityGraph
    codebook: PQCodebook
    codes: np.ndarray
    plan: LayoutPlan
    storage: StoragePlan
    nav: NavGraph | None
    primary_image: bytes
    data_image: bytes | None
    report: BuildReport


def build_index(
    dataset: VectorDataset,
    R: int = 48,
    L_build: int = 128,
    alpha: float = 1.2,
    seed: int = 0,
    pq_m: int = 16,
    pq_iters: int = 15,
    pq_algo: str = "elkan",
    page_size: int = 4096,
    global_kind: str = "coupled",
    local_kind: str = "id",
    storage_strategy: str = "major_in_disk",
    memory_budget: int = 4 << 30,
    nav_sample_rate: float = 0.005,
    graph: ProximityGraph | None = None,
    codebook: PQCodebook | None = None,
) -> BuiltIndex:
    """Run the full build pipeline; pass graph/codebook to reuse prior work."""
    t0 = time.perf_counter()
    if graph is None:
        graph = build_graph(dataset, R, L_build, alpha, seed)
    t_graph = time.perf_counter() - t0
    t0 = time.perf_counter()
    if codebook is None:
        codebook = train_pq(dataset, pq_m, iters=pq_iters, algo=pq_algo, seed=seed)
    codes = codebook.encode(dataset)
    t_pq = time.perf_counter() - t0
    storage = make_storage_plan(
        storage_strategy,
        memory_budget,
        AdvisorInput(n=dataset.count, d=dataset.dim, s_d=dataset.elem_size,
                     r=R, n_pq=codebook.m, budget=memory_budget),
    )
    t0 = time.perf_counter()
    plan = make_plan(
        graph, dataset, page_size, global_kind, local_kind, seed=seed,
        pq_m=codebook.m if storage.codes_on_pages else 0,
    )
    primary, data = serialize_pages(plan, graph, dataset, codes=codes)
    t_layout = time.perf_counter() - t0
    nav = None
    if nav_sample_rate and 0 < nav_sample_rate <= 1 and dataset.count > 1:
        nav = sample_entry_graph(graph, dataset, nav_sample_rate, seed)
    evals = codebook.train_report.dist_evals if codebook.train_report else 0
    report = BuildReport(t_graph, t_pq, t_layout, evals, plan.page_count, plan.data_page_count)
    return BuiltIndex(dataset, graph, codebook, codes, plan, storage, nav, primary, data, report)


def save_index(directory: str | Path, built: BuiltIndex) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_graph(d / "graph.bin", built.graph)
    save_codebook(d / "pq_codebook.bin", built.codebook)
    save_codes(d / "pq_codes.bin", built.codes)
    save_plan(d / "layout.plan", built.plan)
    (d / "pages.bin").write_bytes(built.primary_image)
    if built.data_image is not None:
        (d / "data_pages.bin").write_bytes(built.data_image)
    if built.nav is not None:
        nav = built.nav
        with open(d / "nav.bin", "wb") as f:
            np.array([len(nav.node_ids), nav.vectors.shape[1]], dtype="<u4").tofile(f)
            nav.node_ids.astype("<u4").tofile(f)
            nav.vectors.astype("<f4").tofile(f)
        save_graph(d / "nav_graph.bin", nav.graph)
    manifest = {
        "count": built.dataset.count,
        "dim": built.dataset.dim,
        "elem_type": built.dataset.elem_type,
        "R": built.graph.R,
        "entry_id": built.graph.entry_id,
        "page_size": built.plan.page_size,
        "global_kind": built.plan.global_kind,
        "local_kind": built.plan.local_kind,
        "storage": built.storage.strategy,
        "pq_m": built.codebook.m,
        "nav_rate": built.nav.rate if built.nav else 0.0,
        "build": {
            "L_build": built.graph.L_build,
            "alpha": built.graph.alpha,
            "seed": built.graph.seed,
            "graph_seconds": round(built.report.graph_seconds, 3),
            "pq_seconds": round(built.report.pq_seconds, 3),
            "layout_seconds": round(built.report.layout_seconds, 3),
            "pq_dist_evals": built.report.pq_dist_evals,
        },
    }
    (d / "index.json").write_text(json.dumps(manifest, indent=2))


def load_nav(directory: str | Path) -> NavGraph | None:
    d = Path(directory)
    if not (d / "nav.bin").exists():
        return None
    raw = (d / "nav.bin").read_bytes()
    s, dim = (int(v) for v in np.frombuffer(raw, dtype="<u4", count=2))
    ids = np.frombuffer(raw, dtype="<u4", count=s, offset=8).astype(np.int32)
    vecs = np.frombuffer(raw, dtype="<f4", count=s * dim, offset=8 + 4 * s).reshape(s, dim).copy()
    graph = load_graph(d / "nav_graph.bin")
    manifest = json.loads((d / "index.json").read_text())
    return NavGraph(ids, vecs, graph, manifest.get("nav_rate", 0.0))


def open_search_index(
    directory: str | Path,
    latency: LatencyModel | None = None,
    cache: Cache | None = None,
    memory_budget: int = 4 << 30,
) -> SearchIndex:
    """Open persisted artifacts for searching."""
    d = Path(directory)
    manifest = json.loads((d / "index.json").read_text())
    plan = load_plan(d / "layout.plan")
    codebook = load_codebook(d / "pq_codebook.bin")
    storage = make_storage_plan(
        manifest["storage"], memory_budget,
        AdvisorInput(n=manifest["count"], d=manifest["dim"],
                     s_d=plan.elem_size, r=manifest["R"],
                     n_pq=codebook.m, budget=memory_budget),
    )
    codes = None
    if not storage.codes_on_pages:
        codes = load_codes(d / "pq_codes.bin", codebook.m)
    store = BlockStore(plan.page_size, path=d / "pages.bin", latency=latency)
    data_store = None
    if plan.global_kind == "decoupled":
        data_store = BlockStore(plan.page_size, path=d / "data_pages.bin", latency=latency)
    return SearchIndex(
        storage=storage, plan=plan, store=store, pq=codebook, codes=codes,
        entry_id=manifest["entry_id"], count=manifest["count"],
        data_store=data_store, cache=cache, nav=load_nav(d),
    )


def assemble_search_index(
    built: BuiltIndex,
    latency: LatencyModel | None = None,
    cache: Cache | None = None,
    in_memory: bool = True,
    directory: str | Path | None = None,
    use_nav: bool = True,
) -> SearchIndex:
    """Wrap build artifacts for searching without a save/load round trip."""
    if in_memory:
        store = BlockStore.in_memory(built.plan.page_size, built.primary_image, latency=latency)
        data_store = None
        if built.data_image is not None:
            data_store = BlockStore.in_memory(built.plan.page_size, built.data_image, latency=latency)
    else:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        store = BlockStore.create(d / "pages.bin", built.plan.page_size,
                                  built.primary_image, latency=latency)
        data_store = None
        if built.data_image is not None:
            data_store = BlockStore.create(d / "data_pages.bin", built.plan.page_size,
                                           built.data_image, latency=latency)
    return SearchIndex(
        storage=built.storage, plan=built.plan, store=store,
        pq=built.codebook, codes=built.codes if not built.storage.codes_on_pages else None,
        entry_id=built.graph.entry_id, count=built.dataset.count,
        data_store=data_store, cache=cache, nav=built.nav if use_nav else None,
    )
