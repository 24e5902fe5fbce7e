"""Vector dataset loading, synthesis, exact ground truth, and recall.

File formats follow the texmex benchmark convention: each record is a
4-byte little-endian int32 dimension prefix followed by dim elements
(float32 for fvecs, uint8 for bvecs, int32 for ivecs).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

ELEM_DTYPES = {
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("u1"),
    "int32": np.dtype("<i4"),
}

FORMAT_ELEM = {"fvecs": "float32", "bvecs": "uint8", "ivecs": "int32"}

ELEM_SIZES = {"float32": 4, "uint8": 1, "int32": 4}


@dataclass
class VectorDataset:
    """Dense row-major vector matrix.

    ``data`` is kept at working precision (float32) regardless of source
    element type; ``elem_type`` records the on-disk element so byte sizes
    and round trips stay exact. uint8 widens losslessly to float32.
    """

    dim: int
    count: int
    elem_type: str
    data: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.size != self.count * self.dim:
            raise ValueError(
                f"data length {self.data.size} != count*dim = {self.count * self.dim}"
            )
        self.data = self.data.reshape(self.count, self.dim) if self.count else self.data.reshape(0, max(self.dim, 0))

    @property
    def elem_size(self) -> int:
        """Byte size of one on-disk element."""
        return ELEM_SIZES[self.elem_type]

    @property
    def vector_nbytes(self) -> int:
        """On-disk byte size of one vector (no dimension prefix)."""
        return self.dim * self.elem_size

    def normalized(self) -> "VectorDataset":
        """Unit-normalized copy (cosine metric reduces to euclidean on these)."""
        norms = np.linalg.norm(self.data, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return VectorDataset(self.dim, self.count, "float32", (self.data / norms).astype(np.float32),
                             dict(self.metadata))


@dataclass
class GroundTruth:
    """Exact kNN ids and distances per query, sorted ascending by distance.

    Ties break by ascending id so every oracle comparison is deterministic.
    """

    ids: np.ndarray        # (nq, k) int32
    distances: np.ndarray  # (nq, k) float32, squared euclidean
    metric: str = "euclidean"

    @property
    def k(self) -> int:
        return self.ids.shape[1]


def read_vectors(path: str | Path, fmt: str) -> VectorDataset:
    """Read an fvecs/bvecs/ivecs file into a VectorDataset.

    Every record's dimension prefix must equal the first record's. A
    truncated trailing record or mismatched prefix raises FormatError
    with the offending byte offset.
    """
    if fmt not in FORMAT_ELEM:
        raise ValueError(f"unknown format {fmt!r}; expected fvecs, bvecs, or ivecs")
    elem_type = FORMAT_ELEM[fmt]
    esize = ELEM_SIZES[elem_type]
    raw = Path(path).read_bytes()
    if len(raw) == 0:
        return VectorDataset(0, 0, elem_type, np.empty((0, 0), dtype=np.float32))
    if len(raw) < 4:
        raise FormatError(f"file shorter than one dimension prefix", byte_offset=0)
    dim = int(np.frombuffer(raw, dtype="<i4", count=1)[0])
    if dim <= 0:
        raise FormatError(f"non-positive dimension prefix {dim}", byte_offset=0)
    rec_size = 4 + dim * esize
    n_full, tail = divmod(len(raw), rec_size)
    if tail:
        raise FormatError(
            f"truncated record: file size {len(raw)} is not a multiple of record size {rec_size}",
            byte_offset=n_full * rec_size,
        )
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(n_full, rec_size)
    prefixes = buf[:, :4].copy().view("<i4").ravel()
    bad = np.nonzero(prefixes != dim)[0]
    if bad.size:
        i = int(bad[0])
        raise FormatError(
            f"inconsistent dimension: record 0 has dim {dim}, record {i} has dim {int(prefixes[i])}",
            byte_offset=i * rec_size,
        )
    body = np.ascontiguousarray(buf[:, 4:]).view(ELEM_DTYPES[elem_type]).reshape(n_full, dim)
    if elem_type == "int32":
        data = body.astype(np.int32)
    else:
        data = body.astype(np.float32)
    return VectorDataset(dim, n_full, elem_type, data)


def write_vectors(path: str | Path, dataset: VectorDataset | np.ndarray, fmt: str) -> None:
    """Write vectors in fvecs/bvecs/ivecs format; inverse of read_vectors."""
    if fmt not in FORMAT_ELEM:
        raise ValueError(f"unknown format {fmt!r}; expected fvecs, bvecs, or ivecs")
    arr = dataset.data if isinstance(dataset, VectorDataset) else np.asarray(dataset)
    if arr.ndim != 2:
        raise ValueError("expected a 2-d array of vectors")
    n, dim = arr.shape
    dtype = ELEM_DTYPES[FORMAT_ELEM[fmt]]
    body = np.ascontiguousarray(arr.astype(dtype))
    out = np.empty((n, 4 + dim * body.itemsize), dtype=np.uint8)
    out[:, :4] = np.array([dim], dtype="<i4").view(np.uint8)
    out[:, 4:] = body.view(np.uint8).reshape(n, dim * body.itemsize)
    Path(path).write_bytes(out.tobytes())


def synth_dataset(n: int, d: int, seed: int, distribution: str = "uniform-cube") -> VectorDataset:
    """Generate a reproducible synthetic dataset.

    ``distribution`` is "uniform-cube" or "gaussian-clusters(c)" for c
    generating centers; centers land in the dataset metadata.
    """
    if n < 1 or d < 1:
        raise ValueError(f"n and d must be >= 1, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    if distribution == "uniform-cube":
        data = rng.random((n, d), dtype=np.float32)
        return VectorDataset(d, n, "float32", data, {"distribution": distribution, "seed": seed})
    m = re.fullmatch(r"gaussian-clusters\((\d+)\)", distribution)
    if not m:
        raise ValueError(f"unknown distribution {distribution!r}")
    c = int(m.group(1))
    if c < 1:
        raise ValueError("cluster count must be >= 1")
    centers = rng.random((c, d)).astype(np.float32) * 10.0
    labels = rng.integers(0, c, size=n)
    data = centers[labels] + rng.standard_normal((n, d)).astype(np.float32)
    return VectorDataset(
        d, n, "float32", data.astype(np.float32),
        {"distribution": distribution, "seed": seed, "centers": centers, "labels": labels},
    )


def synth_queries(dataset: VectorDataset, nq: int, seed: int) -> VectorDataset:
    """Draw queries from the same generating process as a synthetic dataset."""
    meta = dataset.metadata
    dist = meta.get("distribution", "uniform-cube")
    if dist == "uniform-cube" or "centers" not in meta:
        return synth_dataset(nq, dataset.dim, seed, "uniform-cube")
    rng = np.random.default_rng(seed)
    centers = meta["centers"]
    labels = rng.integers(0, centers.shape[0], size=nq)
    data = centers[labels] + rng.standard_normal((nq, dataset.dim)).astype(np.float32)
    return VectorDataset(dataset.dim, nq, "float32", data.astype(np.float32), {"seed": seed})


def _squared_dists(queries: np.ndarray, data: np.ndarray) -> np.ndarray:
    # ||q-x||^2 = ||q||^2 + ||x||^2 - 2 q.x, computed blockwise
    qn = np.sum(queries.astype(np.float64) ** 2, axis=1, keepdims=True)
    xn = np.sum(data.astype(np.float64) ** 2, axis=1)
    d2 = qn + xn - 2.0 * (queries.astype(np.float64) @ data.astype(np.float64).T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def compute_ground_truth(
    dataset: VectorDataset,
    queries: VectorDataset | np.ndarray,
    k: int,
    metric: str = "euclidean",
    block: int = 256,
) -> GroundTruth:
    """Exhaustive exact kNN scan; ties break by ascending id."""
    if metric not in ("euclidean", "cosine"):
        raise ValueError(f"unknown metric {metric!r}")
    q = queries.data if isinstance(queries, VectorDataset) else np.asarray(queries, dtype=np.float32)
    if q.ndim == 1:
        q = q[None, :]
    if q.shape[1] != dataset.dim:
        raise ValueError(f"query dim {q.shape[1]} != dataset dim {dataset.dim}")
    if k > dataset.count:
        raise ValueError(f"k={k} exceeds dataset count {dataset.count}")
    base = dataset.data
    if metric == "cosine":
        base = dataset.normalized().data
        qn = np.linalg.norm(q, axis=1, keepdims=True)
        qn[qn == 0] = 1.0
        q = (q / qn).astype(np.float32)
    nq = q.shape[0]
    ids = np.empty((nq, k), dtype=np.int32)
    dists = np.empty((nq, k), dtype=np.float32)
    for start in range(0, nq, block):
        stop = min(start + block, nq)
        d2 = _squared_dists(q[start:stop], base)
        # stable sort on distance keeps original (ascending-id) order on ties
        if k < dataset.count:
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
            sub = np.take_along_axis(d2, part, axis=1)
            order = np.lexsort((part, sub), axis=1)
            top = np.take_along_axis(part, order, axis=1)
        else:
            top = np.lexsort((np.broadcast_to(np.arange(dataset.count), d2.shape), d2), axis=1)[:, :k]
        ids[start:stop] = top.astype(np.int32)
        dists[start:stop] = np.take_along_axis(d2, top, axis=1).astype(np.float32)
    return GroundTruth(ids, dists, metric)


def recall_at_k(result_ids, truth_ids, k: int) -> float:
    """|top-k(result) intersect top-k(truth)| / k."""
    result_ids = np.asarray(result_ids).ravel()
    truth_ids = np.asarray(truth_ids).ravel()
    if result_ids.shape[0] < k or truth_ids.shape[0] < k:
        raise ValueError(
            f"need at least k={k} ids in both lists, got {result_ids.shape[0]} and {truth_ids.shape[0]}"
        )
    return len(set(result_ids[:k].tolist()) & set(truth_ids[:k].tolist())) / k


def mean_recall(all_results: np.ndarray, truth: GroundTruth, k: int) -> float:
    """Mean recall@k over a query set."""
    return float(np.mean([recall_at_k(all_results[i], truth.ids[i], k) for i in range(len(all_results))]))


def save_ground_truth(path_prefix: str | Path, gt: GroundTruth) -> None:
    """Persist ground truth as <prefix>.ivecs (ids) + <prefix>.fvecs (distances)."""
    prefix = Path(path_prefix)
    write_vectors(prefix.with_suffix(".ivecs"), gt.ids, "ivecs")
    write_vectors(prefix.with_suffix(".fvecs"), gt.distances, "fvecs")


def load_ground_truth(path_prefix: str | Path, metric: str = "euclidean") -> GroundTruth:
    """Inverse of save_ground_truth."""
    prefix = Path(path_prefix)
    ids = read_vectors(prefix.with_suffix(".ivecs"), "ivecs")
    dists = read_vectors(prefix.with_suffix(".fvecs"), "fvecs")
    return GroundTruth(ids.data.astype(np.int32), dists.data.astype(np.float32), metric)
