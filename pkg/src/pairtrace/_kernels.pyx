# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops.  Semantics mirror ``_pure.py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs

cnp.import_array()

ctypedef cnp.int64_t i64


cdef inline Py_ssize_t _find(i64[::1] parent, Py_ssize_t i) noexcept nogil:
    cdef Py_ssize_t root = i
    cdef Py_ssize_t nxt
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


def cluster_labels(const cnp.uint16_t[::1] x, const cnp.uint16_t[::1] y,
                   const i64[::1] toa_ps, double radius, i64 window_ps):
    cdef Py_ssize_t n = toa_ps.shape[0]
    cdef Py_ssize_t i, j, ri, rj
    cdef i64 next_label = 0
    parent_arr = np.arange(n, dtype=np.int64)
    labels_arr = np.empty(n, dtype=np.int64)
    cdef i64[::1] parent = parent_arr
    cdef i64[::1] labels = labels_arr
    with nogil:
        for i in range(n):
            j = i + 1
            while j < n and toa_ps[j] - toa_ps[i] <= window_ps:
                if fabs(<double>x[j] - <double>x[i]) <= radius and fabs(<double>y[j] - <double>y[i]) <= radius:
                    ri = _find(parent, i)
                    rj = _find(parent, j)
                    # the root is always the smallest index of its component
                    if ri < rj:
                        parent[rj] = ri
                    elif rj < ri:
                        parent[ri] = rj
                j += 1
        for i in range(n):
            ri = _find(parent, i)
            if ri == i:
                labels[i] = next_label
                next_label += 1
            else:
                labels[i] = labels[ri]
    return labels_arr, int(next_label)


def centroid_reduce(const i64[::1] labels, Py_ssize_t n_clusters,
                    const cnp.uint16_t[::1] x, const cnp.uint16_t[::1] y,
                    const i64[::1] toa_ps, const cnp.uint16_t[::1] tot,
                    const double[::1] corr_ns):
    cdef Py_ssize_t n = labels.shape[0]
    cdef Py_ssize_t i, k
    cdef double w, t
    sw_arr = np.zeros(n_clusters, dtype=np.float64)
    sx_arr = np.zeros(n_clusters, dtype=np.float64)
    sy_arr = np.zeros(n_clusters, dtype=np.float64)
    amp_arr = np.zeros(n_clusters, dtype=np.int64)
    size_arr = np.zeros(n_clusters, dtype=np.int64)
    tmin_arr = np.full(n_clusters, np.inf, dtype=np.float64)
    raw_arr = np.full(n_clusters, np.iinfo(np.int64).max, dtype=np.int64)
    cdef double[::1] sw = sw_arr
    cdef double[::1] sx = sx_arr
    cdef double[::1] sy = sy_arr
    cdef i64[::1] amp = amp_arr
    cdef i64[::1] size = size_arr
    cdef double[::1] tmin = tmin_arr
    cdef i64[::1] raw = raw_arr
    with nogil:
        for i in range(n):
            k = labels[i]
            w = <double>tot[i]
            sw[k] += w
            sx[k] += w * <double>x[i]
            sy[k] += w * <double>y[i]
            amp[k] += tot[i]
            size[k] += 1
            t = toa_ps[i] / 1000.0 - corr_ns[i]
            if t < tmin[k]:
                tmin[k] = t
            if toa_ps[i] < raw[k]:
                raw[k] = toa_ps[i]
    return sx_arr / sw_arr, sy_arr / sw_arr, tmin_arr, amp_arr, size_arr, raw_arr


def delay_histogram(const double[::1] ta, const double[::1] tb, double max_delay,
                    double bin_width, Py_ssize_t kmax, Py_ssize_t a_start, Py_ssize_t a_stop):
    cdef Py_ssize_t nb = tb.shape[0]
    cdef Py_ssize_t nbins = 2 * kmax + 1
    cdef Py_ssize_t i, j, start = 0
    cdef i64 k
    cdef double dt
    counts_arr = np.zeros(nbins, dtype=np.int64)
    cdef i64[::1] counts = counts_arr
    with nogil:
        for i in range(a_start, a_stop):
            while start < nb and ta[i] - tb[start] > max_delay:
                start += 1
            j = start
            while j < nb and tb[j] - ta[i] <= max_delay:
                dt = ta[i] - tb[j]
                k = <i64>floor(dt / bin_width + 0.5) + kmax
                if k < 0:
                    k = 0
                elif k >= nbins:
                    k = nbins - 1
                counts[k] += 1
                j += 1
    return counts_arr


def candidate_pairs(const double[::1] ta, const double[::1] tb, double lo, double hi):
    cdef Py_ssize_t na = ta.shape[0]
    cdef Py_ssize_t nb = tb.shape[0]
    cdef Py_ssize_t i, j, start = 0, m = 0, total = 0
    # two passes: count, then fill
    with nogil:
        for i in range(na):
            while start < nb and ta[i] - tb[start] > hi:
                start += 1
            j = start
            while j < nb and ta[i] - tb[j] >= lo:
                total += 1
                j += 1
    ia_arr = np.empty(total, dtype=np.int64)
    ib_arr = np.empty(total, dtype=np.int64)
    cdef i64[::1] ia = ia_arr
    cdef i64[::1] ib = ib_arr
    start = 0
    with nogil:
        for i in range(na):
            while start < nb and ta[i] - tb[start] > hi:
                start += 1
            j = start
            while j < nb and ta[i] - tb[j] >= lo:
                ia[m] = i
                ib[m] = j
                m += 1
                j += 1
    return ia_arr, ib_arr


def greedy_match(const i64[::1] ia, const i64[::1] ib, Py_ssize_t na, Py_ssize_t nb):
    cdef Py_ssize_t n = ia.shape[0]
    cdef Py_ssize_t k
    used_a_arr = np.zeros(na, dtype=np.uint8)
    used_b_arr = np.zeros(nb, dtype=np.uint8)
    accept_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] used_a = used_a_arr
    cdef cnp.uint8_t[::1] used_b = used_b_arr
    cdef cnp.uint8_t[::1] accept = accept_arr
    with nogil:
        for k in range(n):
            if not used_a[ia[k]] and not used_b[ib[k]]:
                used_a[ia[k]] = 1
                used_b[ib[k]] = 1
                accept[k] = 1
    return accept_arr.astype(bool)


def bin_rays(const double[::1] rx, const double[::1] ry, const double[::1] tx,
             const double[::1] ty, const double[::1] w, double z, double x0, double y0,
             double dx, double dy, Py_ssize_t nx, Py_ssize_t ny):
    cdef Py_ssize_t n = rx.shape[0]
    cdef Py_ssize_t i, ix, iy
    cdef double px, py, fx, fy
    cdef i64 n_over = 0
    cdef double w_over = 0.0
    counts_arr = np.zeros((ny, nx), dtype=np.float64)
    cdef double[:, ::1] counts = counts_arr
    with nogil:
        for i in range(n):
            px = rx[i] + z * tx[i]
            py = ry[i] + z * ty[i]
            fx = (px - x0) / dx
            fy = (py - y0) / dy
            if fx >= 0 and fx < nx and fy >= 0 and fy < ny:
                ix = <Py_ssize_t>floor(fx)
                iy = <Py_ssize_t>floor(fy)
                counts[iy, ix] += w[i]
            else:
                n_over += 1
                w_over += w[i]
    return counts_arr, int(n_over), float(w_over)
