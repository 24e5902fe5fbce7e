import numpy as np
import pytest

from diskgraph.dataio import (
    GroundTruth,
    VectorDataset,
    compute_ground_truth,
    load_ground_truth,
    read_vectors,
    recall_at_k,
    save_ground_truth,
    synth_dataset,
    write_vectors,
)
from diskgraph.errors import FormatError


def test_read_empty_file(tmp_path):
    p = tmp_path / "empty.fvecs"
    p.write_bytes(b"")
    ds = read_vectors(p, "fvecs")
    assert ds.count == 0
    assert ds.dim == 0


def test_read_handbuilt_fvecs(tmp_path):
    # two records: [dim=2][1.0, 2.0][dim=2][3.0, 4.0]
    raw = b""
    for vec in ([1.0, 2.0], [3.0, 4.0]):
        raw += np.array([2], dtype="<i4").tobytes()
        raw += np.array(vec, dtype="<f4").tobytes()
    p = tmp_path / "two.fvecs"
    p.write_bytes(raw)
    ds = read_vectors(p, "fvecs")
    assert ds.count == 2
    assert ds.dim == 2
    np.testing.assert_array_equal(ds.data, [[1.0, 2.0], [3.0, 4.0]])


def test_truncated_record_reports_offset(tmp_path):
    raw = np.array([3], dtype="<i4").tobytes() + np.array([1, 2, 3], dtype="<f4").tobytes()
    p = tmp_path / "bad.fvecs"
    p.write_bytes(raw + b"\x03\x00\x00\x00\x00")  # half a record
    with pytest.raises(FormatError) as err:
        read_vectors(p, "fvecs")
    assert err.value.byte_offset == 16


def test_inconsistent_dim_names_both(tmp_path):
    raw = np.array([2], dtype="<i4").tobytes() + np.array([1, 2], dtype="<f4").tobytes()
    raw += np.array([3], dtype="<i4").tobytes() + np.array([1, 2], dtype="<f4").tobytes()
    p = tmp_path / "mix.fvecs"
    p.write_bytes(raw)
    with pytest.raises(FormatError, match="dim 2.*dim 3"):
        read_vectors(p, "fvecs")


@pytest.mark.parametrize("fmt", ["fvecs", "bvecs", "ivecs"])
def test_round_trip_byte_exact(tmp_path, fmt):
    rng = np.random.default_rng(11)
    if fmt == "fvecs":
        arr = rng.standard_normal((37, 9)).astype(np.float32)
    elif fmt == "bvecs":
        arr = rng.integers(0, 256, size=(37, 9)).astype(np.uint8)
    else:
        arr = rng.integers(-1000, 1000, size=(37, 9)).astype(np.int32)
    p = tmp_path / f"a.{fmt}"
    write_vectors(p, arr, fmt)
    first = p.read_bytes()
    ds = read_vectors(p, fmt)
    p2 = tmp_path / f"b.{fmt}"
    write_vectors(p2, ds, fmt)
    assert p2.read_bytes() == first


def test_bvecs_widen_lossless(tmp_path):
    arr = np.arange(256, dtype=np.uint8).reshape(16, 16)
    p = tmp_path / "w.bvecs"
    write_vectors(p, arr, "bvecs")
    ds = read_vectors(p, "bvecs")
    assert ds.data.dtype == np.float32
    assert ds.elem_type == "uint8"
    assert ds.elem_size == 1
    np.testing.assert_array_equal(ds.data.astype(np.uint8), arr)


def test_gt_query_equals_dataset_vector():
    ds = synth_dataset(50, 8, seed=3)
    gt = compute_ground_truth(ds, ds.data[17:18], k=1)
    assert gt.ids[0, 0] == 17
    assert gt.distances[0, 0] == 0.0


def test_gt_k_equals_count_is_permutation():
    ds = synth_dataset(20, 4, seed=5)
    gt = compute_ground_truth(ds, ds.data[:3], k=20)
    for row in gt.ids:
        assert sorted(row.tolist()) == list(range(20))


def test_gt_points_on_a_line():
    # points at x = 0,1,2,3,4; query at 2.1 -> nearest ids 2, 3, 1
    data = np.array([[0.0], [1.0], [2.0], [3.0], [4.0]], dtype=np.float32)
    ds = VectorDataset(1, 5, "float32", data)
    gt = compute_ground_truth(ds, np.array([[2.1]], dtype=np.float32), k=3)
    assert gt.ids[0].tolist() == [2, 3, 1]


def test_gt_tie_breaks_ascending_id():
    # two coincident points: lower id must rank first
    data = np.array([[5.0], [1.0], [1.0], [9.0]], dtype=np.float32)
    ds = VectorDataset(1, 4, "float32", data)
    gt = compute_ground_truth(ds, np.array([[1.0]], dtype=np.float32), k=3)
    assert gt.ids[0].tolist()[:2] == [1, 2]


def test_gt_distances_non_decreasing():
    ds = synth_dataset(300, 12, seed=9, distribution="gaussian-clusters(3)")
    qs = synth_dataset(10, 12, seed=10)
    gt = compute_ground_truth(ds, qs, k=25)
    assert np.all(np.diff(gt.distances, axis=1) >= 0)


def test_gt_k_greater_than_count_raises():
    ds = synth_dataset(5, 3, seed=1)
    with pytest.raises(ValueError):
        compute_ground_truth(ds, ds.data[:1], k=6)


def test_gt_cosine_normalizes():
    data = np.array([[1.0, 0.0], [0.0, 1.0], [100.0, 1.0]], dtype=np.float32)
    ds = VectorDataset(2, 3, "float32", data)
    gt = compute_ground_truth(ds, np.array([[2.0, 0.1]], dtype=np.float32), k=1, metric="cosine")
    assert gt.ids[0, 0] == 2  # same direction despite the magnitude


def test_recall_identity_and_disjoint():
    assert recall_at_k([1, 2, 3], [1, 2, 3], 3) == 1.0
    assert recall_at_k([1, 2, 3], [4, 5, 6], 3) == 0.0
    assert recall_at_k(list(range(20)), list(range(1, 21)), 20) == 0.95


def test_recall_symmetric_and_order_invariant():
    rng = np.random.default_rng(2)
    a = rng.permutation(100)[:10]
    b = rng.permutation(100)[:10]
    assert recall_at_k(a, b, 10) == recall_at_k(b, a, 10)
    assert recall_at_k(a, b, 10) == recall_at_k(np.flip(a), np.flip(b), 10)


def test_recall_short_lists_raise():
    with pytest.raises(ValueError):
        recall_at_k([1, 2], [1, 2, 3], 3)


def test_synth_single_vector_reproducible():
    a = synth_dataset(1, 3, seed=7)
    b = synth_dataset(1, 3, seed=7)
    assert a.count == 1 and a.dim == 3
    np.testing.assert_array_equal(a.data, b.data)


def test_synth_gaussian_clusters_metadata():
    ds = synth_dataset(1000, 16, seed=4, distribution="gaussian-clusters(4)")
    assert ds.count == 1000
    assert ds.metadata["centers"].shape == (4, 16)


def test_synth_same_seed_byte_identical():
    a = synth_dataset(64, 6, seed=42, distribution="gaussian-clusters(2)")
    b = synth_dataset(64, 6, seed=42, distribution="gaussian-clusters(2)")
    assert a.data.tobytes() == b.data.tobytes()


def test_synth_rejects_bad_args():
    with pytest.raises(ValueError):
        synth_dataset(0, 4, seed=1)
    with pytest.raises(ValueError):
        synth_dataset(4, 4, seed=1, distribution="donuts(3)")


def test_ground_truth_save_load_round_trip(tmp_path):
    ds = synth_dataset(100, 8, seed=6)
    qs = synth_dataset(5, 8, seed=7)
    gt = compute_ground_truth(ds, qs, k=10)
    save_ground_truth(tmp_path / "gt", gt)
    back = load_ground_truth(tmp_path / "gt")
    np.testing.assert_array_equal(back.ids, gt.ids)
    np.testing.assert_array_equal(back.distances, gt.distances)
