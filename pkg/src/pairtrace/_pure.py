"""NumPy implementations of the hot kernels.

Each function has the same signature and bit-identical results as its
counterpart in ``_kernels.pyx``; floating-point expressions are written in
the same order on purpose.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

_BLOCK = 1 << 16


def cluster_labels(x, y, toa_ps, radius, window_ps):
    """Connected-component labels under (Chebyshev radius, time window) linkage.

    Labels are numbered by first appearance, so for time-sorted input they
    are ordered by each cluster's earliest hit.
    """
    n = len(toa_ps)
    if n == 0:
        return np.empty(0, dtype=np.int64), 0
    xi = x.astype(np.int64)
    yi = y.astype(np.int64)
    rows, cols = [], []
    lag = 1
    while lag < n:
        close = (toa_ps[lag:] - toa_ps[:-lag]) <= window_ps
        if not close.any():
            break
        ok = close & (np.abs(xi[lag:] - xi[:-lag]) <= radius) & (np.abs(yi[lag:] - yi[:-lag]) <= radius)
        idx = np.flatnonzero(ok)
        rows.append(idx)
        cols.append(idx + lag)
        lag += 1
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
    else:
        r = c = np.empty(0, dtype=np.int64)
    graph = coo_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(n, n))
    ncomp, comp = connected_components(graph, directed=False)
    _, first = np.unique(comp, return_index=True)
    rank = np.empty(ncomp, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(ncomp)
    return rank[comp].astype(np.int64), int(ncomp)


def centroid_reduce(labels, n_clusters, x, y, toa_ps, tot, corr_ns):
    """Per-cluster ToT-weighted centroid, summed ToT, size, earliest raw ToA and corrected time."""
    w = tot.astype(np.float64)
    sw = np.bincount(labels, weights=w, minlength=n_clusters)
    sx = np.bincount(labels, weights=w * x.astype(np.float64), minlength=n_clusters)
    sy = np.bincount(labels, weights=w * y.astype(np.float64), minlength=n_clusters)
    size = np.bincount(labels, minlength=n_clusters).astype(np.int64)
    amp = np.bincount(labels, weights=tot.astype(np.int64), minlength=n_clusters).astype(np.int64)
    t = toa_ps / 1000.0 - corr_ns
    order = np.argsort(labels, kind="stable")
    starts = np.zeros(n_clusters, dtype=np.int64)
    if n_clusters > 1:
        starts[1:] = np.cumsum(size)[:-1]
    if len(labels):
        t_min = np.minimum.reduceat(t[order], starts)
        raw_min = np.minimum.reduceat(toa_ps[order], starts)
    else:
        t_min = np.empty(0)
        raw_min = np.empty(0, dtype=np.int64)
    return sx / sw, sy / sw, t_min, amp, size, raw_min.astype(np.int64)


def _window_candidates(ta, tb, lo, hi, a_start, a_stop):
    """All (i, j) with lo <= ta[i] - tb[j] <= hi for i in [a_start, a_stop), ordered by (i, j)."""
    out_i, out_j = [], []
    if len(tb) == 0 or a_stop <= a_start:
        e = np.empty(0, dtype=np.int64)
        return e, e
    scale = max(abs(float(ta[a_start:a_stop].max(initial=0))), abs(float(tb.max())), 1.0)
    slack = 1e-9 * scale + 1e-9
    for s in range(a_start, a_stop, _BLOCK):
        e_ = min(s + _BLOCK, a_stop)
        t = ta[s:e_]
        first = np.searchsorted(tb, t - hi - slack, side="left")
        last = np.searchsorted(tb, t - lo + slack, side="right")
        cnt = last - first
        total = int(cnt.sum())
        if total == 0:
            continue
        ia = np.repeat(np.arange(s, e_, dtype=np.int64), cnt)
        offs = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        ib = np.repeat(first, cnt).astype(np.int64) + offs
        dt = ta[ia] - tb[ib]
        keep = (dt <= hi) & (dt >= lo)
        out_i.append(ia[keep])
        out_j.append(ib[keep])
    if not out_i:
        e = np.empty(0, dtype=np.int64)
        return e, e
    return np.concatenate(out_i), np.concatenate(out_j)


def delay_histogram(ta, tb, max_delay, bin_width, kmax, a_start, a_stop):
    """Counts of dt = ta - tb with |dt| <= max_delay in bins centered on k * bin_width."""
    counts = np.zeros(2 * kmax + 1, dtype=np.int64)
    ia, ib = _window_candidates(ta, tb, -max_delay, max_delay, a_start, a_stop)
    if len(ia) == 0:
        return counts
    dt = ta[ia] - tb[ib]
    dt = dt[(dt <= max_delay) & (-dt <= max_delay)]
    k = np.floor(dt / bin_width + 0.5).astype(np.int64) + kmax
    np.clip(k, 0, 2 * kmax, out=k)
    counts += np.bincount(k, minlength=2 * kmax + 1)
    return counts


def candidate_pairs(ta, tb, lo, hi):
    return _window_candidates(ta, tb, lo, hi, 0, len(ta))


def greedy_match(ia, ib, na, nb):
    """Accept candidates in the given order when both events are still free."""
    used_a = np.zeros(na, dtype=bool)
    used_b = np.zeros(nb, dtype=bool)
    accept = np.zeros(len(ia), dtype=bool)
    for k, (i, j) in enumerate(zip(ia.tolist(), ib.tolist())):
        if not used_a[i] and not used_b[j]:
            used_a[i] = True
            used_b[j] = True
            accept[k] = True
    return accept


def bin_rays(rx, ry, tx, ty, w, z, x0, y0, dx, dy, nx, ny):
    """Nearest-bin histogram of ray positions propagated by ``z``.

    Returns ``(counts[ny, nx], overflow_rays, overflow_weight)``.
    """
    px = rx + z * tx
    py = ry + z * ty
    fx = (px - x0) / dx
    fy = (py - y0) / dy
    inside = (fx >= 0) & (fx < nx) & (fy >= 0) & (fy < ny)
    ix = np.floor(fx[inside]).astype(np.int64)
    iy = np.floor(fy[inside]).astype(np.int64)
    flat = iy * nx + ix
    counts = np.bincount(flat, weights=w[inside], minlength=nx * ny).astype(np.float64).reshape(ny, nx)
    out = ~inside
    # cumsum accumulates sequentially, matching the compiled loop
    return counts, int(out.sum()), float(np.cumsum(w[out])[-1]) if out.any() else 0.0
