"""Pure-numpy spatial kernels.

Fallback twin of the compiled ``flowseg._kernels`` extension: identical
function signatures and bit-identical results (same float64 expressions,
same tie rules), selected at import time by ``flowseg.neighbors`` when the
extension is unavailable. Queries here are brute force; the grid arrays in
the signatures are used only where the algorithm needs them (ray marching).
"""

from __future__ import annotations

import numpy as np

KEY_BIAS = 1 << 20
KEY_SPAN = 1 << 21

_CHUNK_ELEMS = 2_000_000


def pack_cells(cells: np.ndarray) -> np.ndarray:
    """Pack (M, 3) integer cells into single int64 keys."""
    c = cells + KEY_BIAS
    if c.size and (c.min() < 0 or c.max() >= KEY_SPAN):
        raise OverflowError("cell coordinates exceed the packable range")
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


def _sq_dists(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - points[None, :, :]
    return (diff * diff).sum(axis=-1)


def knn_batch(points, cell_keys, starts, order, bounds, cell_size, queries, k):
    n = len(points)
    out = np.empty((len(queries), k), dtype=np.int64)
    step = max(1, _CHUNK_ELEMS // max(n, 1))
    for c0 in range(0, len(queries), step):
        q = queries[c0 : c0 + step]
        d2 = _sq_dists(points[q], points)
        d2[np.arange(len(q)), q] = np.inf
        out[c0 : c0 + step] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def ball_batch(points, cell_keys, starts, order, bounds, cell_size, queries, radius):
    n = len(points)
    r2 = radius * radius
    chunks = []
    counts = np.empty(len(queries), dtype=np.int64)
    step = max(1, _CHUNK_ELEMS // max(n, 1))
    for c0 in range(0, len(queries), step):
        q = queries[c0 : c0 + step]
        d2 = _sq_dists(points[q], points)
        d2[np.arange(len(q)), q] = np.inf
        hit = d2 <= r2
        for r, qi in enumerate(range(c0, c0 + len(q))):
            idx = np.nonzero(hit[r])[0]
            counts[qi] = len(idx)
            chunks.append(idx.astype(np.int64))
    flat = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
    return flat, counts


def nn_cross(ref_points, cell_keys, starts, order, bounds, cell_size, query_points):
    nq = len(query_points)
    idx = np.empty(nq, dtype=np.int64)
    sqd = np.empty(nq, dtype=np.float64)
    step = max(1, _CHUNK_ELEMS // max(len(ref_points), 1))
    for c0 in range(0, nq, step):
        d2 = _sq_dists(query_points[c0 : c0 + step], ref_points)
        best = np.argmin(d2, axis=1)
        idx[c0 : c0 + step] = best
        sqd[c0 : c0 + step] = d2[np.arange(len(best)), best]
    return idx, sqd


def raycast_first_hit(occ_keys, bounds, cell_size, origins, units, t_start, t_stop, step):
    """March each ray from t_start (exclusive) to t_stop (inclusive) in fixed
    steps; report the first occupied cell and its center."""
    nq = len(origins)
    hit = np.zeros(nq, dtype=bool)
    centers = np.zeros((nq, 3), dtype=np.float64)
    active = np.arange(nq)
    j = 0
    while len(active):
        j += 1
        t = t_start[active] + step * j
        alive = t <= t_stop[active]
        active = active[alive]
        if not len(active):
            break
        t = t[alive]
        pos = origins[active] + t[:, None] * units[active]
        cells = np.floor(pos / cell_size).astype(np.int64)
        inside = np.all(cells >= bounds[0], axis=1) & np.all(cells <= bounds[1], axis=1)
        keys = pack_cells(np.clip(cells, bounds[0], bounds[1]))
        slot = np.searchsorted(occ_keys, keys)
        slot = np.minimum(slot, max(len(occ_keys) - 1, 0))
        found = inside & (len(occ_keys) > 0) & (occ_keys[slot] == keys)
        if np.any(found):
            who = active[found]
            hit[who] = True
            centers[who] = (cells[found] + 0.5) * cell_size
            active = active[~found]
    return hit, centers
