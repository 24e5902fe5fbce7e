import itertools

import numpy as np
import pytest

from diskgraph.dataio import VectorDataset, synth_dataset
from diskgraph.errors import FormatError, LayoutInfeasibleError
from diskgraph.graph import ProximityGraph, build_graph
from diskgraph.layout import (
    LayoutPlan,
    adjacency_record_stride,
    bpf,
    deserialize_page,
    entry_stride,
    load_plan,
    make_plan,
    plan_global_decoupled,
    plan_local_clustering,
    plan_local_graph_replicated,
    plan_local_heuristic,
    plan_local_id,
    replica_stride,
    save_plan,
    serialize_pages,
)


def graph_from_adjacency(adj_lists, R, entry=0):
    n = len(adj_lists)
    adj = np.full((n, R), -1, dtype=np.int32)
    deg = np.zeros(n, dtype=np.int32)
    for i, nbrs in enumerate(adj_lists):
        adj[i, : len(nbrs)] = nbrs
        deg[i] = len(nbrs)
    return ProximityGraph(adj, deg, R, entry)


def toy_dataset(n, d=4, seed=0):
    return synth_dataset(n, d, seed=seed)


def test_bpf_reference_values():
    assert bpf(4096, 128, 4, 48) == pytest.approx(4096 / 708, rel=1e-9)
    assert bpf(4096, 960, 4, 48) == pytest.approx(4096 / 4036, rel=1e-9)
    assert bpf(708, 128, 4, 48) == 1.0


def test_bpf_monotonicity():
    base = bpf(4096, 128, 4, 48)
    assert bpf(4096, 256, 4, 48) < base
    assert bpf(4096, 128, 4, 96) < base
    assert bpf(8192, 128, 4, 48) > base


def test_bpf_rejects_nonpositive():
    with pytest.raises(ValueError):
        bpf(0, 128, 4, 48)


def test_record_size_arithmetic():
    # d=128, s_d=4, R=48: 710-byte owner entries, 198-byte replicas,
    # 196-byte decoupled adjacency records
    assert entry_stride(128, 4, 48) == 710
    assert replica_stride(128, 4, 48) == 198
    assert adjacency_record_stride(48) == 196


def test_id_plan_capacity_one_identity():
    ds = toy_dataset(6, d=4)
    g = build_graph(ds, R=2, L_build=4)
    page = 2 + entry_stride(4, 4, 2)  # fits exactly one entry
    plan = plan_local_id(g, ds, page)
    assert plan.capacity == 1
    assert plan.node_page.tolist() == list(range(6))


def test_id_plan_packing():
    ds = toy_dataset(10, d=4)
    g = build_graph(ds, R=2, L_build=4)
    page = 2 + 4 * entry_stride(4, 4, 2)
    plan = plan_local_id(g, ds, page)
    assert plan.capacity == 4
    assert plan.node_page.tolist() == [0, 0, 0, 0, 1, 1, 1, 1, 2, 2]
    assert plan.page_count == 3


def test_sift_defaults_capacity_five():
    ds = synth_dataset(64, 128, seed=1)
    g = build_graph(ds, R=48, L_build=48)
    plan = plan_local_id(g, ds, 4096)
    assert plan.capacity == 5  # floor(4096 / 708) from the packing formula


def test_infeasible_coupled_raises():
    ds = synth_dataset(16, 960, seed=1)
    g = build_graph(ds, R=48, L_build=48)
    # 960*4 + 49*4 + 6 = 4042 > 4040 would still fit 4096; shrink the page
    with pytest.raises(LayoutInfeasibleError):
        plan_local_id(g, ds, 1024)


def test_heuristic_path_graph_optimal():
    # path 0-1-2-3-4-5 with symmetric edges, capacity 2
    g = graph_from_adjacency(
        [[1], [0, 2], [1, 3], [2, 4], [3, 5], [4]], R=2, entry=0
    )
    ds = toy_dataset(6, d=2)
    page = 2 + 2 * entry_stride(2, 4, 2)
    plan = plan_local_heuristic(g, ds, page)
    pages = [plan.node_page[i] for i in range(6)]
    assert pages[0] == pages[1]
    assert pages[2] == pages[3]
    assert pages[4] == pages[5]
    assert plan.cross_page_edges(g) == 2 * 2  # two symmetric cross edges


def test_heuristic_triangle_plus_isolated():
    g = graph_from_adjacency([[1, 2], [0, 2], [0, 1], []], R=2, entry=0)
    ds = toy_dataset(4, d=2)
    page = 2 + 2 * entry_stride(2, 4, 2)
    plan = plan_local_heuristic(g, ds, page)
    # BFS order 0,1,2 then 3 appended; 0,1 co-paged; 2 opens page; 3 joins 2
    assert plan.node_page[0] == plan.node_page[1]
    assert plan.node_page[2] == plan.node_page[3]
    assert plan.node_page[0] != plan.node_page[2]


def test_heuristic_capacity_one_page_count_matches_id():
    ds = toy_dataset(12, d=4)
    g = build_graph(ds, R=4, L_build=8)
    page = 2 + entry_stride(4, 4, 4)
    a = plan_local_id(g, ds, page)
    b = plan_local_heuristic(g, ds, page)
    assert a.page_count == b.page_count == 12


def test_heuristic_beats_id_on_cross_page_edges():
    ds = synth_dataset(600, 12, seed=5, distribution="gaussian-clusters(6)")
    g = build_graph(ds, R=8, L_build=32, seed=2)
    page = 2 + 4 * entry_stride(12, 4, 8)
    id_plan = plan_local_id(g, ds, page)
    h_plan = plan_local_heuristic(g, ds, page)
    assert h_plan.cross_page_edges(g) <= id_plan.cross_page_edges(g)


def test_clustering_line_pairs():
    data = np.array([[float(i)] for i in range(8)], dtype=np.float32)
    ds = VectorDataset(1, 8, "float32", data)
    g = build_graph(ds, R=2, L_build=4)
    page = 2 + 2 * entry_stride(1, 4, 2)
    plan = plan_local_clustering(g, ds, page, seed=3)
    groups = {}
    for i in range(8):
        groups.setdefault(int(plan.node_page[i]), []).append(i)
    assert sorted(sorted(v) for v in groups.values()) == [[0, 1], [2, 3], [4, 5], [6, 7]]


def test_clustering_two_blobs():
    rng = np.random.default_rng(7)
    blob0 = rng.standard_normal((5, 3)).astype(np.float32) * 0.01
    blob1 = blob0 + 50.0
    data = np.vstack([blob0, blob1]).astype(np.float32)
    # interleave ids so the split cannot ride on id order
    perm = np.array([0, 5, 1, 6, 2, 7, 3, 8, 4, 9])
    ds = VectorDataset(3, 10, "float32", data[np.argsort(perm)])
    g = build_graph(ds, R=2, L_build=4)
    page = 2 + 5 * entry_stride(3, 4, 2)
    plan = plan_local_clustering(g, ds, page, seed=1)
    blob_pages = {int(plan.node_page[i]) for i in range(10) if np.all(ds.data[i] < 25)}
    other_pages = {int(plan.node_page[i]) for i in range(10) if np.all(ds.data[i] > 25)}
    assert len(blob_pages) == 1 and len(other_pages) == 1 and blob_pages != other_pages


def test_clustering_single_page_when_capacity_covers_all():
    ds = toy_dataset(7, d=3)
    g = build_graph(ds, R=2, L_build=4)
    page = 2 + 10 * entry_stride(3, 4, 2)
    plan = plan_local_clustering(g, ds, page, seed=2)
    assert plan.page_count == 1


def test_clustering_page_count_is_ceiling():
    ds = toy_dataset(103, d=6, seed=9)
    g = build_graph(ds, R=4, L_build=8)
    page = 2 + 4 * entry_stride(6, 4, 4)
    plan = plan_local_clustering(g, ds, page, seed=5)
    assert plan.page_count == int(np.ceil(103 / 4))
    counts = np.bincount(plan.node_page.astype(int))
    assert counts.max() <= 4


def test_graph_replicated_counts():
    # d=128/R=48/4KB: 710-byte owner + 198-byte replicas -> 17 replicas max
    ds = synth_dataset(64, 128, seed=3)
    g = build_graph(ds, R=48, L_build=48, seed=1)
    plan = plan_local_graph_replicated(g, ds, 4096)
    assert plan.page_count == 64
    max_replicas = (4096 - 2 - 710) // 198
    assert max_replicas == 17
    for page, owners in plan.replicas.items():
        assert len(owners) <= 17
        nbrs = set(g.neighbors(page).tolist())
        assert set(owners.tolist()) <= nbrs


def test_graph_replicated_zero_slack():
    ds = toy_dataset(5, d=4)
    g = build_graph(ds, R=2, L_build=4)
    page = 2 + entry_stride(4, 4, 2)
    plan = plan_local_graph_replicated(g, ds, page)
    assert plan.replicas == {}


def test_graph_replicated_footprint_exceeds_id():
    ds = synth_dataset(40, 16, seed=4)
    g = build_graph(ds, R=8, L_build=16, seed=2)
    page = 2 + 2 * entry_stride(16, 4, 8)
    rep = plan_local_graph_replicated(g, ds, page)
    idp = plan_local_id(g, ds, page)
    assert rep.total_bytes() >= idp.total_bytes()
    assert any(len(v) for v in rep.replicas.values())


def test_graph_replicated_infeasible():
    ds = synth_dataset(8, 960, seed=1)
    g = build_graph(ds, R=48, L_build=48)
    with pytest.raises(LayoutInfeasibleError):
        plan_local_graph_replicated(g, ds, 1024)


def test_decoupled_reference_capacities():
    # d=128, R=48, 4KB: 20 adjacency records per index page, 8 vectors per data page
    ds = synth_dataset(50, 128, seed=2)
    g = build_graph(ds, R=48, L_build=48, seed=1)
    plan = plan_global_decoupled(g, ds, 4096)
    assert plan.capacity == 20
    assert plan.data_capacity == 8


def test_decoupled_high_dim_capacities():
    # d=3072 floats, 16KB: 1 vector per data page, 83 index records per page
    ds = synth_dataset(12, 3072, seed=2)
    g = build_graph(ds, R=48, L_build=48, seed=1)
    plan = plan_global_decoupled(g, ds, 16384)
    assert plan.data_capacity == 1
    assert plan.capacity == 83


def test_decoupled_single_node():
    ds = toy_dataset(1, d=4)
    g = build_graph(ds, R=2, L_build=4)
    plan = plan_global_decoupled(g, ds, 256)
    assert plan.page_count == 1
    assert plan.data_page_count == 1


def test_decoupled_vector_too_large():
    ds = synth_dataset(4, 2000, seed=1)
    g = build_graph(ds, R=4, L_build=8)
    with pytest.raises(LayoutInfeasibleError):
        plan_global_decoupled(g, ds, 4096)


@pytest.mark.parametrize(
    "global_kind,local_kind",
    [
        ("coupled", "id"),
        ("coupled", "heuristic"),
        ("coupled", "clustering"),
        ("coupled", "graph_replicated"),
        ("decoupled", "heuristic"),
    ],
)
def test_round_trip_all_strategies(global_kind, local_kind):
    ds = synth_dataset(100, 16, seed=6, distribution="gaussian-clusters(4)")
    g = build_graph(ds, R=8, L_build=16, seed=3)
    plan = make_plan(g, ds, 1024, global_kind, local_kind, seed=4)
    primary, data = serialize_pages(plan, g, ds)
    assert len(primary) == plan.page_count * plan.page_size
    if data is not None:
        assert len(data) == plan.data_page_count * plan.page_size
    seen_owner = set()
    for page_idx in range(plan.page_count):
        page = primary[page_idx * 1024 : (page_idx + 1) * 1024]
        for entry in deserialize_page(page, plan):
            if not entry.is_replica:
                assert entry.node_id not in seen_owner
                seen_owner.add(entry.node_id)
                np.testing.assert_array_equal(
                    np.sort(entry.neighbors), np.sort(g.neighbors(entry.node_id))
                )
                if plan.global_kind == "coupled":
                    np.testing.assert_allclose(entry.vector, ds.data[entry.node_id], rtol=1e-6)
    assert seen_owner == set(range(100))


def test_every_node_exactly_once_per_plan():
    ds = synth_dataset(120, 8, seed=8)
    g = build_graph(ds, R=4, L_build=8, seed=1)
    for gk, lk in [("coupled", "id"), ("coupled", "heuristic"), ("coupled", "clustering")]:
        plan = make_plan(g, ds, 512, gk, lk, seed=2)
        assert len(plan.node_page) == 120
        fills = {}
        for i in range(120):
            key = (int(plan.node_page[i]), int(plan.node_slot[i]))
            assert key not in fills
            fills[key] = i
        counts = np.bincount(plan.node_page.astype(int), minlength=plan.page_count)
        assert counts.max() <= plan.capacity


def test_deserialize_rejects_corrupt_count():
    ds = synth_dataset(20, 8, seed=9)
    g = build_graph(ds, R=4, L_build=8, seed=1)
    plan = plan_local_id(g, ds, 512)
    primary, _ = serialize_pages(plan, g, ds)
    page = bytearray(primary[: plan.page_size])
    page[0:2] = (60000).to_bytes(2, "little")
    with pytest.raises(FormatError):
        deserialize_page(bytes(page), plan)


def test_all_in_disk_entries_carry_codes():
    from diskgraph.pq import train_pq

    ds = synth_dataset(60, 16, seed=10)
    g = build_graph(ds, R=4, L_build=8, seed=1)
    cb = train_pq(ds.data, m=4, iters=4, seed=1)
    codes = cb.encode(ds.data)
    plan = make_plan(g, ds, 1024, "coupled", "id", pq_m=4)
    primary, _ = serialize_pages(plan, g, ds, codes=codes)
    page = primary[: plan.page_size]
    entries = deserialize_page(page, plan)
    for e in entries:
        np.testing.assert_array_equal(e.own_code, codes[e.node_id])
        np.testing.assert_array_equal(e.neighbor_codes, codes[e.neighbors])


def test_plan_save_load_round_trip(tmp_path):
    ds = synth_dataset(80, 8, seed=11)
    g = build_graph(ds, R=4, L_build=8, seed=2)
    for gk, lk in [("coupled", "graph_replicated"), ("decoupled", "heuristic")]:
        plan = make_plan(g, ds, 768, gk, lk, seed=3)
        save_plan(tmp_path / "p.bin", plan)
        back = load_plan(tmp_path / "p.bin")
        np.testing.assert_array_equal(back.node_page, plan.node_page)
        np.testing.assert_array_equal(back.node_slot, plan.node_slot)
        assert back.global_kind == plan.global_kind
        assert back.capacity == plan.capacity
        if plan.data_page is not None:
            np.testing.assert_array_equal(back.data_page, plan.data_page)
        assert set(back.replicas) == set(plan.replicas)
        for k in plan.replicas:
            np.testing.assert_array_equal(back.replicas[k], plan.replicas[k])
