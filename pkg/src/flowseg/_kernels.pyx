# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled spatial kernels.

Grid-accelerated twins of ``flowseg._kernels_py``: same signatures, same
float64 arithmetic (squared distances accumulate x, y, z in that order),
same tie rules (smaller index wins), so results are bit-identical to the
brute-force fallback.
"""

from libc.math cimport INFINITY, floor

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef long KEY_BIAS = 1 << 20
cdef long KEY_SPAN = 1 << 21


def pack_cells(cells):
    """Pack (M, 3) integer cells into single int64 keys."""
    cdef long[:, ::1] c = np.ascontiguousarray(cells, dtype=np.int64)
    cdef Py_ssize_t n = c.shape[0], i
    out_arr = np.empty(n, dtype=np.int64)
    cdef long[::1] out = out_arr
    cdef long x, y, z
    for i in range(n):
        x = c[i, 0] + KEY_BIAS
        y = c[i, 1] + KEY_BIAS
        z = c[i, 2] + KEY_BIAS
        if x < 0 or x >= KEY_SPAN or y < 0 or y >= KEY_SPAN or z < 0 or z >= KEY_SPAN:
            raise OverflowError("cell coordinates exceed the packable range")
        out[i] = (x << 42) | (y << 21) | z
    return out_arr


cdef inline Py_ssize_t _find(const long[::1] keys, long key) nogil:
    cdef Py_ssize_t lo = 0, hi = keys.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    if lo < keys.shape[0] and keys[lo] == key:
        return lo
    return -1


cdef inline long _axdist(long c, long lo, long hi) nogil:
    if c < lo:
        return lo - c
    if c > hi:
        return c - hi
    return 0


cdef inline long _axfar(long c, long lo, long hi) nogil:
    cdef long a = c - lo if c >= lo else lo - c
    cdef long b = c - hi if c >= hi else hi - c
    return a if a > b else b


cdef inline void _insert(double* bd, long* bi, long* m, long k, double d2, long idx) nogil:
    cdef long cur = m[0]
    cdef long pos, j
    if cur == k:
        if d2 > bd[k - 1] or (d2 == bd[k - 1] and idx > bi[k - 1]):
            return
        cur = k - 1
    pos = cur
    while pos > 0 and (d2 < bd[pos - 1] or (d2 == bd[pos - 1] and idx < bi[pos - 1])):
        pos -= 1
    for j in range(cur, pos, -1):
        bd[j] = bd[j - 1]
        bi[j] = bi[j - 1]
    bd[pos] = d2
    bi[pos] = idx
    if m[0] < k:
        m[0] += 1


cdef void _scan_cell(const double[:, ::1] pts, const long[::1] cell_keys,
                     const long[::1] starts, const long[::1] order,
                     long cx, long cy, long cz,
                     double qx, double qy, double qz, long self_idx,
                     double* bd, long* bi, long* m, long k) nogil:
    cdef long key = ((cx + KEY_BIAS) << 42) | ((cy + KEY_BIAS) << 21) | (cz + KEY_BIAS)
    cdef Py_ssize_t slot = _find(cell_keys, key)
    cdef Py_ssize_t a, b, t
    cdef long j
    cdef double dx, dy, dz, d2
    if slot < 0:
        return
    a = starts[slot]
    b = starts[slot + 1]
    for t in range(a, b):
        j = order[t]
        if j == self_idx:
            continue
        dx = qx - pts[j, 0]
        dy = qy - pts[j, 1]
        dz = qz - pts[j, 2]
        d2 = dx * dx + dy * dy + dz * dz
        _insert(bd, bi, m, k, d2, j)


cdef void _knn_point(const double[:, ::1] pts, const long[::1] cell_keys,
                     const long[::1] starts, const long[::1] order,
                     const long[:, ::1] bounds, double cell,
                     double qx, double qy, double qz, long self_idx, long k,
                     double* bd, long* bi) nogil:
    cdef long cx = <long>floor(qx / cell)
    cdef long cy = <long>floor(qy / cell)
    cdef long cz = <long>floor(qz / cell)
    cdef long m = 0
    cdef long s, s_min, s_max, x0, x1, y0, y1, z0, z1, xx, yy, zz, dxa, dya
    cdef double bound

    s_min = _axdist(cx, bounds[0, 0], bounds[1, 0])
    s = _axdist(cy, bounds[0, 1], bounds[1, 1])
    if s > s_min:
        s_min = s
    s = _axdist(cz, bounds[0, 2], bounds[1, 2])
    if s > s_min:
        s_min = s

    s_max = _axfar(cx, bounds[0, 0], bounds[1, 0])
    s = _axfar(cy, bounds[0, 1], bounds[1, 1])
    if s > s_max:
        s_max = s
    s = _axfar(cz, bounds[0, 2], bounds[1, 2])
    if s > s_max:
        s_max = s

    for s in range(s_min, s_max + 1):
        x0 = cx - s
        if x0 < bounds[0, 0]:
            x0 = bounds[0, 0]
        x1 = cx + s
        if x1 > bounds[1, 0]:
            x1 = bounds[1, 0]
        y0 = cy - s
        if y0 < bounds[0, 1]:
            y0 = bounds[0, 1]
        y1 = cy + s
        if y1 > bounds[1, 1]:
            y1 = bounds[1, 1]
        for xx in range(x0, x1 + 1):
            dxa = xx - cx if xx >= cx else cx - xx
            for yy in range(y0, y1 + 1):
                dya = yy - cy if yy >= cy else cy - yy
                if dxa == s or dya == s:
                    z0 = cz - s
                    if z0 < bounds[0, 2]:
                        z0 = bounds[0, 2]
                    z1 = cz + s
                    if z1 > bounds[1, 2]:
                        z1 = bounds[1, 2]
                    for zz in range(z0, z1 + 1):
                        _scan_cell(pts, cell_keys, starts, order, xx, yy, zz,
                                   qx, qy, qz, self_idx, bd, bi, &m, k)
                else:
                    zz = cz - s
                    if zz >= bounds[0, 2] and zz <= bounds[1, 2]:
                        _scan_cell(pts, cell_keys, starts, order, xx, yy, zz,
                                   qx, qy, qz, self_idx, bd, bi, &m, k)
                    zz = cz + s
                    if zz >= bounds[0, 2] and zz <= bounds[1, 2]:
                        _scan_cell(pts, cell_keys, starts, order, xx, yy, zz,
                                   qx, qy, qz, self_idx, bd, bi, &m, k)
        if m == k:
            bound = s * cell
            if bd[k - 1] < bound * bound:
                break


def knn_batch(points, cell_keys, starts, order, bounds, cell_size, queries, k):
    cdef double[:, ::1] pts = points
    cdef const long[::1] ck = cell_keys
    cdef const long[::1] st = starts
    cdef const long[::1] od = order
    cdef long[:, ::1] bb = bounds
    cdef long[::1] qs = queries
    cdef double cell = cell_size
    cdef long kk = k
    cdef Py_ssize_t nq = qs.shape[0], qi
    out_arr = np.empty((nq, kk), dtype=np.int64)
    cdef long[:, ::1] out = out_arr
    buf_d = np.empty(kk, dtype=np.float64)
    buf_i = np.empty(kk, dtype=np.int64)
    cdef double[::1] bd = buf_d
    cdef long[::1] bi = buf_i
    cdef long i, j
    for qi in range(nq):
        i = qs[qi]
        _knn_point(pts, ck, st, od, bb, cell,
                   pts[i, 0], pts[i, 1], pts[i, 2], i, kk, &bd[0], &bi[0])
        for j in range(kk):
            out[qi, j] = bi[j]
    return out_arr


cdef Py_ssize_t _ball_point(const double[:, ::1] pts, const long[::1] cell_keys,
                            const long[::1] starts, const long[::1] order,
                            const long[:, ::1] bounds, double cell,
                            long self_idx, double r2, double radius,
                            long[::1] fill, Py_ssize_t at, bint count_only) nogil:
    cdef double qx = pts[self_idx, 0]
    cdef double qy = pts[self_idx, 1]
    cdef double qz = pts[self_idx, 2]
    cdef long x0 = <long>floor((qx - radius) / cell)
    cdef long x1 = <long>floor((qx + radius) / cell)
    cdef long y0 = <long>floor((qy - radius) / cell)
    cdef long y1 = <long>floor((qy + radius) / cell)
    cdef long z0 = <long>floor((qz - radius) / cell)
    cdef long z1 = <long>floor((qz + radius) / cell)
    cdef long xx, yy, zz, key, j
    cdef Py_ssize_t slot, a, b, t, n_found = 0
    cdef double dx, dy, dz, d2
    if x0 < bounds[0, 0]:
        x0 = bounds[0, 0]
    if x1 > bounds[1, 0]:
        x1 = bounds[1, 0]
    if y0 < bounds[0, 1]:
        y0 = bounds[0, 1]
    if y1 > bounds[1, 1]:
        y1 = bounds[1, 1]
    if z0 < bounds[0, 2]:
        z0 = bounds[0, 2]
    if z1 > bounds[1, 2]:
        z1 = bounds[1, 2]
    for xx in range(x0, x1 + 1):
        for yy in range(y0, y1 + 1):
            for zz in range(z0, z1 + 1):
                key = ((xx + KEY_BIAS) << 42) | ((yy + KEY_BIAS) << 21) | (zz + KEY_BIAS)
                slot = _find(cell_keys, key)
                if slot < 0:
                    continue
                a = starts[slot]
                b = starts[slot + 1]
                for t in range(a, b):
                    j = order[t]
                    if j == self_idx:
                        continue
                    dx = qx - pts[j, 0]
                    dy = qy - pts[j, 1]
                    dz = qz - pts[j, 2]
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 <= r2:
                        if not count_only:
                            fill[at + n_found] = j
                        n_found += 1
    return n_found


def ball_batch(points, cell_keys, starts, order, bounds, cell_size, queries, radius):
    cdef double[:, ::1] pts = points
    cdef const long[::1] ck = cell_keys
    cdef const long[::1] st = starts
    cdef const long[::1] od = order
    cdef long[:, ::1] bb = bounds
    cdef long[::1] qs = queries
    cdef double cell = cell_size
    cdef double r2 = radius * radius
    cdef Py_ssize_t nq = qs.shape[0], qi
    counts_arr = np.empty(nq, dtype=np.int64)
    cdef long[::1] counts = counts_arr
    cdef long[::1] dummy = np.empty(1, dtype=np.int64)
    for qi in range(nq):
        counts[qi] = _ball_point(pts, ck, st, od, bb, cell, qs[qi], r2, radius,
                                 dummy, 0, True)
    offsets = np.concatenate([[0], np.cumsum(counts_arr)])
    flat_arr = np.empty(int(offsets[-1]), dtype=np.int64)
    cdef long[::1] flat = flat_arr
    cdef Py_ssize_t at
    for qi in range(nq):
        at = offsets[qi]
        _ball_point(pts, ck, st, od, bb, cell, qs[qi], r2, radius, flat, at, False)
        flat_arr[at : at + counts_arr[qi]].sort()
    return flat_arr, counts_arr


def nn_cross(ref_points, cell_keys, starts, order, bounds, cell_size, query_points):
    cdef double[:, ::1] pts = ref_points
    cdef const long[::1] ck = cell_keys
    cdef const long[::1] st = starts
    cdef const long[::1] od = order
    cdef long[:, ::1] bb = bounds
    cdef double[:, ::1] qp = query_points
    cdef double cell = cell_size
    cdef Py_ssize_t nq = qp.shape[0], qi
    idx_arr = np.empty(nq, dtype=np.int64)
    sqd_arr = np.empty(nq, dtype=np.float64)
    cdef long[::1] idx = idx_arr
    cdef double[::1] sqd = sqd_arr
    cdef double bd
    cdef long bi
    for qi in range(nq):
        bd = INFINITY
        bi = -1
        _knn_point(pts, ck, st, od, bb, cell,
                   qp[qi, 0], qp[qi, 1], qp[qi, 2], -1, 1, &bd, &bi)
        idx[qi] = bi
        sqd[qi] = bd
    return idx_arr, sqd_arr


def raycast_first_hit(occ_keys, bounds, cell_size, origins, units, t_start, t_stop, step):
    cdef const long[::1] occ = occ_keys
    cdef long[:, ::1] bb = bounds
    cdef double cell = cell_size
    cdef double[:, ::1] org = origins
    cdef double[:, ::1] uni = units
    cdef double[::1] t0 = t_start
    cdef double[::1] t1 = t_stop
    cdef double dt = step
    cdef Py_ssize_t nq = org.shape[0], i
    hit_arr = np.zeros(nq, dtype=bool)
    centers_arr = np.zeros((nq, 3), dtype=np.float64)
    cdef cnp.uint8_t[::1] hit = hit_arr.view(np.uint8)
    cdef double[:, ::1] centers = centers_arr
    cdef long j, cx, cy, cz, key
    cdef double tt, px, py, pz
    for i in range(nq):
        j = 0
        while True:
            j += 1
            tt = t0[i] + dt * j
            if tt > t1[i]:
                break
            px = org[i, 0] + tt * uni[i, 0]
            py = org[i, 1] + tt * uni[i, 1]
            pz = org[i, 2] + tt * uni[i, 2]
            cx = <long>floor(px / cell)
            cy = <long>floor(py / cell)
            cz = <long>floor(pz / cell)
            if (cx < bb[0, 0] or cx > bb[1, 0] or cy < bb[0, 1] or cy > bb[1, 1]
                    or cz < bb[0, 2] or cz > bb[1, 2]):
                continue
            key = ((cx + KEY_BIAS) << 42) | ((cy + KEY_BIAS) << 21) | (cz + KEY_BIAS)
            if _find(occ, key) >= 0:
                hit[i] = 1
                centers[i, 0] = (cx + 0.5) * cell
                centers[i, 1] = (cy + 0.5) * cell
                centers[i, 2] = (cz + 0.5) * cell
                break
    return hit_arr, centers_arr
