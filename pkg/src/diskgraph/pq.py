"""Product quantization: codebook training, encoding, and ADC estimation.

Codebooks use 256 centroids per subspace (one code byte per chunk). Training
runs either Lloyd's algorithm or Elkan's triangle-inequality acceleration;
both produce identical assignments from a shared seeded k-means++ start, but
Elkan performs far fewer point-centroid distance evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import VectorDataset

K_CENTROIDS = 256
CODE_BYTES = 1  # one byte per chunk
TRAIN_SAMPLE_CAP = 100_000


@dataclass
class PQTrainReport:
    algo: str
    dist_evals: int
    iters_run: int
    elapsed_s: float = 0.0


@dataclass
class PQCodebook:
    m: int
    dim: int
    sub_dims: list[int]
    centroids: list[np.ndarray]  # m arrays of shape (256, sub_dim), float32
    train_report: PQTrainReport | None = field(default=None, compare=False)

    def __post_init__(self):
        if sum(self.sub_dims) != self.dim:
            raise ValueError("sub_dims must partition the full dimension")
        for c in self.centroids:
            if c.shape[0] != K_CENTROIDS:
                raise ValueError(f"every subspace needs {K_CENTROIDS} centroids")

    def subspace_slices(self) -> list[slice]:
        bounds = np.cumsum([0] + self.sub_dims)
        return [slice(int(bounds[i]), int(bounds[i + 1])) for i in range(self.m)]

    def encode(self, data: VectorDataset | np.ndarray) -> np.ndarray:
        """Assign each chunk to its nearest centroid (ties -> lowest index)."""
        x = data.data if isinstance(data, VectorDataset) else np.asarray(data, dtype=np.float32)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.dim:
            raise ValueError(f"vector dim {x.shape[1]} != codebook dim {self.dim}")
        codes = np.empty((x.shape[0], self.m), dtype=np.uint8)
        for j, sl in enumerate(self.subspace_slices()):
            sub = x[:, sl].astype(np.float32)
            cents = self.centroids[j]
            d2 = (
                np.sum(sub**2, axis=1, keepdims=True)
                + np.sum(cents**2, axis=1)
                - 2.0 * (sub @ cents.T)
            )
            codes[:, j] = np.argmin(d2, axis=1).astype(np.uint8)
        return codes

    def reconstruct(self, codes: np.ndarray) -> np.ndarray:
        codes = np.atleast_2d(codes)
        out = np.empty((codes.shape[0], self.dim), dtype=np.float32)
        for j, sl in enumerate(self.subspace_slices()):
            out[:, sl] = self.centroids[j][codes[:, j]]
        return out

    def distance_table(self, query: np.ndarray) -> np.ndarray:
        """Per-subspace squared distances from the query: shape (m, 256)."""
        query = np.asarray(query, dtype=np.float32).ravel()
        if query.shape[0] != self.dim:
            raise ValueError(f"query dim {query.shape[0]} != codebook dim {self.dim}")
        table = np.empty((self.m, K_CENTROIDS), dtype=np.float32)
        for j, sl in enumerate(self.subspace_slices()):
            diff = self.centroids[j] - query[sl]
            table[j] = np.einsum("ij,ij->i", diff, diff)
        return table


def estimate_distance(code_row: np.ndarray, table: np.ndarray) -> float:
    """ADC estimate: sum of table entries selected by the code bytes."""
    code_row = np.asarray(code_row)
    return float(table[np.arange(table.shape[0]), code_row.astype(np.intp)].sum())


def estimate_distances(codes: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Vectorized ADC estimates for a batch of code rows."""
    codes = np.atleast_2d(codes)
    return table[np.arange(table.shape[0]), codes.astype(np.intp)].sum(axis=1)


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Seeded k-means++ start; returns (centers, distance evaluations)."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float32)
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = np.sum((x - centers[0]) ** 2, axis=1).astype(np.float64)
    evals = n
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[int(rng.integers(n))]
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r))
            idx = min(idx, n - 1)
            centers[j] = x[idx]
        nd = np.sum((x - centers[j]) ** 2, axis=1)
        evals += n
        np.minimum(d2, nd, out=d2)
    return centers, evals


def _means_with_repair(
    x: np.ndarray, assign: np.ndarray, k: int, counts: np.ndarray
) -> tuple[np.ndarray, int, bool]:
    """Cluster means; empty clusters steal the farthest point of the largest one.

    The repair is a pure function of the assignment vector, so Lloyd and
    Elkan stay in lockstep through it. Returns (centers, extra distance
    evaluations, repaired flag).
    """
    d = x.shape[1]
    sums = np.zeros((k, d), dtype=np.float64)
    np.add.at(sums, assign, x)
    evals = 0
    repaired = False
    counts = counts.copy()
    empty = np.nonzero(counts == 0)[0]
    for c in empty:
        repaired = True
        donor = int(np.argmax(counts))  # ties -> lowest index
        members = np.nonzero(assign == donor)[0]
        centroid = sums[donor] / counts[donor]
        dd = np.sum((x[members] - centroid) ** 2, axis=1)
        evals += len(members)
        steal = int(members[np.argmax(dd)])  # ties -> lowest id via argmax
        assign[steal] = c
        sums[donor] -= x[steal]
        sums[c] += x[steal]
        counts[donor] -= 1
        counts[c] += 1
    with np.errstate(invalid="ignore"):
        centers = (sums / counts[:, None]).astype(np.float32)
    return centers, evals, repaired


def _lloyd(x, centers, iters, history=None):
    n, _ = x.shape
    k = centers.shape[0]
    evals = 0
    assign = np.full(n, -1, dtype=np.int64)
    it = 0
    for it in range(1, iters + 1):
        d2 = (
            np.sum(x**2, axis=1, keepdims=True)
            + np.sum(centers.astype(np.float64) ** 2, axis=1)
            - 2.0 * (x @ centers.T.astype(np.float64))
        )
        evals += n * k
        new_assign = np.argmin(d2, axis=1)
        changed = not np.array_equal(new_assign, assign)
        assign = new_assign
        if history is not None:
            history.append(assign.copy())
        counts = np.bincount(assign, minlength=k)
        centers, extra, _ = _means_with_repair(x, assign, k, counts)
        evals += extra
        if not changed and it > 1:
            break
    return centers, assign, evals, it


def _elkan(x, centers, iters, history=None):
    n, d = x.shape
    k = centers.shape[0]
    evals = 0
    x64 = x.astype(np.float64)

    # initial assignment: full pass (counted), establishing valid bounds
    d2 = (
        np.sum(x64**2, axis=1, keepdims=True)
        + np.sum(centers.astype(np.float64) ** 2, axis=1)
        - 2.0 * (x64 @ centers.T.astype(np.float64))
    )
    np.maximum(d2, 0, out=d2)
    evals += n * k
    dist = np.sqrt(d2)
    assign = np.argmin(dist, axis=1)
    upper = dist[np.arange(n), assign]
    lower = dist.copy()
    if history is not None:
        history.append(assign.copy())
    counts = np.bincount(assign, minlength=k)
    old_centers = centers
    centers, extra, repaired = _means_with_repair(x, assign, k, counts)
    evals += extra
    it = 1
    if repaired:
        bounds_valid = False
    else:
        shift = np.sqrt(np.sum((centers.astype(np.float64) - old_centers.astype(np.float64)) ** 2, axis=1))
        lower = np.maximum(lower - shift[None, :], 0)
        upper = upper + shift[assign]
        bounds_valid = True
    for it in range(2, iters + 1):
        if not bounds_valid:
            # center teleported during repair: recompute bounds exactly
            d2 = (
                np.sum(x64**2, axis=1, keepdims=True)
                + np.sum(centers.astype(np.float64) ** 2, axis=1)
                - 2.0 * (x64 @ centers.T.astype(np.float64))
            )
            np.maximum(d2, 0, out=d2)
            evals += n * k
            dist = np.sqrt(d2)
            new_assign = np.argmin(dist, axis=1)
            upper = dist[np.arange(n), new_assign]
            lower = dist.copy()
        else:
            cc2 = (
                np.sum(centers.astype(np.float64) ** 2, axis=1, keepdims=True)
                + np.sum(centers.astype(np.float64) ** 2, axis=1)
                - 2.0 * (centers.astype(np.float64) @ centers.T.astype(np.float64))
            )
            np.maximum(cc2, 0, out=cc2)
            cc = np.sqrt(cc2)
            np.fill_diagonal(cc, np.inf)
            s = 0.5 * cc.min(axis=1)

            new_assign = assign.copy()
            active = upper > s[assign]
            idx = np.nonzero(active)[0]
            if idx.size:
                # tighten upper bounds with one exact distance per active point
                a = assign[idx]
                diff = x64[idx] - centers[a].astype(np.float64)
                upper[idx] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
                lower[idx, a] = upper[idx]
                evals += idx.size
                # candidate centers that survive both bound tests
                cond = (upper[idx, None] > lower[idx]) & (upper[idx, None] > 0.5 * cc[a])
                cond[np.arange(idx.size), a] = False
                pi, cj = np.nonzero(cond)
                if pi.size:
                    pts = idx[pi]
                    diff = x64[pts] - centers[cj].astype(np.float64)
                    dd = np.sqrt(np.einsum("ij,ij->i", diff, diff))
                    evals += pi.size
                    lower[pts, cj] = dd
                    cand = np.full((idx.size, k), np.inf)
                    cand[pi, cj] = dd
                    best_j = np.argmin(cand, axis=1)
                    best_d = cand[np.arange(idx.size), best_j]
                    better = best_d < upper[idx]
                    new_assign[idx[better]] = best_j[better]
                    upper[idx[better]] = best_d[better]
        if history is not None:
            history.append(new_assign.copy())
        changed = not np.array_equal(new_assign, assign)
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        old_centers = centers
        centers, extra, repaired = _means_with_repair(x, assign, k, counts)
        evals += extra
        if repaired:
            bounds_valid = False
        else:
            shift = np.sqrt(np.sum((centers.astype(np.float64) - old_centers.astype(np.float64)) ** 2, axis=1))
            lower = np.maximum(lower - shift[None, :], 0)
            upper = upper + shift[assign]
            bounds_valid = True
        if not changed and it > 1:
            break
    return centers, assign, evals, it


def kmeans(
    x: np.ndarray,
    k: int,
    iters: int,
    seed: int,
    algo: str = "lloyd",
    init_centers: np.ndarray | None = None,
    history: list | None = None,
) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Seeded k-means; returns (centers, assignments, dist_evals, iters_run)."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    rng = np.random.default_rng(seed)
    evals0 = 0
    if init_centers is None:
        init_centers, evals0 = _kmeanspp_init(x, k, rng)
    if algo == "lloyd":
        centers, assign, evals, it = _lloyd(x, init_centers.copy(), iters, history)
    elif algo == "elkan":
        centers, assign, evals, it = _elkan(x, init_centers.copy(), iters, history)
    else:
        raise ValueError(f"unknown kmeans algo {algo!r}")
    return centers, assign, evals + evals0, it


def train_pq(
    data: VectorDataset | np.ndarray,
    m: int,
    iters: int = 15,
    algo: str = "lloyd",
    seed: int = 0,
) -> PQCodebook:
    """Train per-subspace codebooks; the last subspace absorbs any remainder dims.

    Training uses at most 100K seed-sampled rows. The returned codebook
    carries a PQTrainReport with the point-centroid distance evaluation count.
    """
    import time as _time

    x = data.data if isinstance(data, VectorDataset) else np.asarray(data, dtype=np.float32)
    n, d = x.shape
    if m > d:
        raise ValueError(f"m={m} exceeds dimension {d}")
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = np.random.default_rng(seed)
    if n > TRAIN_SAMPLE_CAP:
        sample_idx = np.sort(rng.choice(n, TRAIN_SAMPLE_CAP, replace=False))
        train = x[sample_idx]
    else:
        train = x
    base = d // m
    sub_dims = [base] * m
    sub_dims[-1] += d - base * m
    bounds = np.cumsum([0] + sub_dims)
    centroids = []
    total_evals = 0
    total_iters = 0
    t0 = _time.perf_counter()
    for j in range(m):
        sub = np.ascontiguousarray(train[:, bounds[j] : bounds[j + 1]])
        k = min(K_CENTROIDS, sub.shape[0])
        centers, _, evals, it = kmeans(sub, k, iters, seed + 1000 * j, algo)
        if k < K_CENTROIDS:
            # clamp case: pad with copies; argmin tie rule keeps them inert
            centers = np.vstack([centers, np.repeat(centers[:1], K_CENTROIDS - k, axis=0)])
        centroids.append(centers.astype(np.float32))
        total_evals += evals
        total_iters += it
    report = PQTrainReport(algo, total_evals, total_iters, _time.perf_counter() - t0)
    return PQCodebook(m, d, sub_dims, centroids, train_report=report)


def save_codebook(path: str | Path, cb: PQCodebook) -> None:
    """Binary layout: [u32 m][u32 d][m x u32 sub_dims][f32 centroids], little-endian."""
    with open(path, "wb") as f:
        np.array([cb.m, cb.dim], dtype="<u4").tofile(f)
        np.array(cb.sub_dims, dtype="<u4").tofile(f)
        for c in cb.centroids:
            c.astype("<f4").tofile(f)


def load_codebook(path: str | Path) -> PQCodebook:
    raw = Path(path).read_bytes()
    m, d = np.frombuffer(raw, dtype="<u4", count=2)
    sub_dims = np.frombuffer(raw, dtype="<u4", count=int(m), offset=8).astype(int).tolist()
    off = 8 + 4 * int(m)
    centroids = []
    for ds in sub_dims:
        c = np.frombuffer(raw, dtype="<f4", count=K_CENTROIDS * ds, offset=off)
        centroids.append(c.reshape(K_CENTROIDS, ds).copy())
        off += K_CENTROIDS * ds * 4
    return PQCodebook(int(m), int(d), sub_dims, centroids)


def save_codes(path: str | Path, codes: np.ndarray) -> None:
    """Raw count x m bytes, row-major."""
    Path(path).write_bytes(np.ascontiguousarray(codes, dtype=np.uint8).tobytes())


def load_codes(path: str | Path, m: int) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if raw.size % m:
        raise ValueError(f"codes file size {raw.size} not divisible by m={m}")
    return raw.reshape(-1, m).copy()
