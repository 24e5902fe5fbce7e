"""Numba kernels for graph construction and in-memory greedy search.

Adjacency is a fixed-stride (N, R) int32 matrix with -1 sentinels plus a
degree vector; vectors are C-contiguous float32. All kernels are strictly
sequential so builds are bit-reproducible run to run.
"""

from __future__ import annotations

import numpy as np
from numba import njit

SENTINEL = -1


@njit(cache=True, fastmath=True, inline="always")
def _sqdist(vectors, i, q):
    s = np.float32(0.0)
    for j in range(vectors.shape[1]):
        t = vectors[i, j] - q[j]
        s += t * t
    return s


@njit(cache=True, fastmath=True)
def _sqdist_pair(vectors, a, b):
    s = np.float32(0.0)
    for j in range(vectors.shape[1]):
        t = vectors[a, j] - vectors[b, j]
        s += t * t
    return s


@njit(cache=True, fastmath=True)
def greedy_search(
    vectors, adj, deg, entry, q, L,
    stamp, stamp_val,
    pool_ids, pool_dists, pool_exp,
    exp_ids, exp_dists,
):
    """Best-first search keeping the closest L pool entries.

    Expands the nearest unexpanded pool entry until the pool is exhausted.
    Returns (pool_size, expanded_count); expanded nodes land in exp_ids /
    exp_dists (capped at the buffer length) for use as prune candidates.
    """
    pool_ids[0] = entry
    pool_dists[0] = _sqdist(vectors, entry, q)
    pool_exp[0] = False
    size = 1
    stamp[entry] = stamp_val
    n_exp = 0
    cap = exp_ids.shape[0]
    while True:
        best = -1
        for i in range(size):
            if not pool_exp[i]:
                best = i
                break
        if best == -1:
            break
        pool_exp[best] = True
        node = pool_ids[best]
        if n_exp < cap:
            exp_ids[n_exp] = node
            exp_dists[n_exp] = pool_dists[best]
            n_exp += 1
        for t in range(deg[node]):
            nb = adj[node, t]
            if nb < 0 or stamp[nb] == stamp_val:
                continue
            stamp[nb] = stamp_val
            dnb = _sqdist(vectors, nb, q)
            if size == L and dnb >= pool_dists[size - 1]:
                continue
            lo = 0
            hi = size
            while lo < hi:
                mid = (lo + hi) >> 1
                if pool_dists[mid] <= dnb:
                    lo = mid + 1
                else:
                    hi = mid
            if size < L:
                size += 1
            for s in range(size - 1, lo, -1):
                pool_ids[s] = pool_ids[s - 1]
                pool_dists[s] = pool_dists[s - 1]
                pool_exp[s] = pool_exp[s - 1]
            if lo < size:
                pool_ids[lo] = nb
                pool_dists[lo] = dnb
                pool_exp[lo] = False
    return size, n_exp


@njit(cache=True, fastmath=True)
def robust_prune(vectors, p, cand_ids, cand_dists, n, R, alpha, out_ids):
    """Greedy alpha-pruning: keep the nearest remaining candidate c, then
    drop every candidate c' with alpha * d(c, c') <= d(p, c').

    Candidates may contain duplicates and p itself; both are ignored.
    Ties on distance resolve toward the lower id. Returns kept count.
    """
    order = np.argsort(cand_dists[:n])
    # enforce ascending-id order inside equal-distance runs
    i = 0
    while i < n - 1:
        j = i
        while j + 1 < n and cand_dists[order[j + 1]] == cand_dists[order[i]]:
            j += 1
        if j > i:
            for a in range(i + 1, j + 1):
                key = order[a]
                b = a - 1
                while b >= i and cand_ids[order[b]] > cand_ids[key]:
                    order[b + 1] = order[b]
                    b -= 1
                order[b + 1] = key
        i = j + 1
    alive = np.ones(n, dtype=np.bool_)
    kept = 0
    for oi in range(n):
        i = order[oi]
        if not alive[i]:
            continue
        c = cand_ids[i]
        if c == p:
            alive[i] = False
            continue
        out_ids[kept] = c
        kept += 1
        alive[i] = False
        if kept == R:
            break
        for oj in range(oi + 1, n):
            j = order[oj]
            if not alive[j]:
                continue
            if cand_ids[j] == c or cand_ids[j] == p:
                alive[j] = False
                continue
            dcc = _sqdist_pair(vectors, c, cand_ids[j])
            if alpha * dcc <= cand_dists[j]:
                alive[j] = False
    return kept


@njit(cache=True, fastmath=True)
def _insert_one(
    vectors, adj, deg, p, entry, L, R, alpha,
    stamp, stamp_val,
    pool_ids, pool_dists, pool_exp,
    exp_ids, exp_dists,
    cand_ids, cand_dists, out_ids, out2_ids, rev_ids, rev_dists,
):
    q = vectors[p]
    _, n_exp = greedy_search(
        vectors, adj, deg, entry, q, L, stamp, stamp_val,
        pool_ids, pool_dists, pool_exp, exp_ids, exp_dists,
    )
    n = 0
    for i in range(n_exp):
        if exp_ids[i] != p:
            cand_ids[n] = exp_ids[i]
            cand_dists[n] = exp_dists[i]
            n += 1
    for t in range(deg[p]):
        v = adj[p, t]
        if v >= 0 and v != p:
            cand_ids[n] = v
            cand_dists[n] = _sqdist(vectors, v, q)
            n += 1
    kept = robust_prune(vectors, p, cand_ids, cand_dists, n, R, alpha, out_ids)
    deg[p] = kept
    for t in range(kept):
        adj[p, t] = out_ids[t]
    for t in range(kept, R):
        adj[p, t] = SENTINEL
    # reverse edges, pruning any neighbor that overflows R
    for t in range(kept):
        v = out_ids[t]
        present = False
        for u in range(deg[v]):
            if adj[v, u] == p:
                present = True
                break
        if present:
            continue
        if deg[v] < R:
            adj[v, deg[v]] = p
            deg[v] += 1
        else:
            m = 0
            for u in range(deg[v]):
                rev_ids[m] = adj[v, u]
                rev_dists[m] = _sqdist_pair(vectors, v, adj[v, u])
                m += 1
            rev_ids[m] = p
            rev_dists[m] = _sqdist_pair(vectors, v, p)
            m += 1
            kept_v = robust_prune(vectors, v, rev_ids, rev_dists, m, R, alpha, out2_ids)
            deg[v] = kept_v
            for u in range(kept_v):
                adj[v, u] = out2_ids[u]
            for u in range(kept_v, R):
                adj[v, u] = SENTINEL


@njit(cache=True, fastmath=True)
def build_pass(vectors, adj, deg, order, entry, L, R, alpha, stamp, stamp_start):
    n_nodes = vectors.shape[0]
    pool_ids = np.empty(L, dtype=np.int32)
    pool_dists = np.empty(L, dtype=np.float32)
    pool_exp = np.empty(L, dtype=np.bool_)
    exp_cap = 4 * L + R + 8
    exp_ids = np.empty(exp_cap, dtype=np.int32)
    exp_dists = np.empty(exp_cap, dtype=np.float32)
    cand_ids = np.empty(exp_cap + R + 1, dtype=np.int32)
    cand_dists = np.empty(exp_cap + R + 1, dtype=np.float32)
    out_ids = np.empty(R, dtype=np.int32)
    out2_ids = np.empty(R, dtype=np.int32)
    rev_ids = np.empty(R + 1, dtype=np.int32)
    rev_dists = np.empty(R + 1, dtype=np.float32)
    stamp_val = stamp_start
    for i in range(n_nodes):
        p = order[i]
        stamp_val += 1
        _insert_one(
            vectors, adj, deg, p, entry, L, R, alpha,
            stamp, stamp_val,
            pool_ids, pool_dists, pool_exp,
            exp_ids, exp_dists,
            cand_ids, cand_dists, out_ids, out2_ids, rev_ids, rev_dists,
        )
    return stamp_val


@njit(cache=True, fastmath=True)
def search_topk(vectors, adj, deg, entry, q, L, stamp, stamp_val):
    """Standalone greedy search returning the sorted L-pool (ids, dists)."""
    pool_ids = np.empty(L, dtype=np.int32)
    pool_dists = np.empty(L, dtype=np.float32)
    pool_exp = np.empty(L, dtype=np.bool_)
    exp_ids = np.empty(1, dtype=np.int32)
    exp_dists = np.empty(1, dtype=np.float32)
    size, _ = greedy_search(
        vectors, adj, deg, entry, q, L, stamp, stamp_val,
        pool_ids, pool_dists, pool_exp, exp_ids, exp_dists,
    )
    return pool_ids[:size].copy(), pool_dists[:size].copy()
