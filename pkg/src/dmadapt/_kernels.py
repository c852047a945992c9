"""Compiled numeric kernels shared by the metric, adapt and report modules.

Tensors are stored as 6-vectors in the order (m11, m21, m22, m31, m32, m33).
Everything here operates on flat arrays and vertex indices so that callers
never have to build temporary numpy objects in hot loops.
"""
import math

import numpy as np
from numba import njit

EQUAL_BRANCH = 0.001
MEAN_RATIO_NORM = 36.0 / 3.0 ** (1.0 / 3.0)

# local edge list of a tetrahedron
TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]], dtype=np.int64)


@njit(cache=True)
def quad6(m, vx, vy, vz):
    return (m[0] * vx * vx + m[2] * vy * vy + m[5] * vz * vz
            + 2.0 * (m[1] * vx * vy + m[3] * vx * vz + m[4] * vy * vz))


@njit(cache=True)
def to_mat(m):
    a = np.empty((3, 3))
    a[0, 0] = m[0]
    a[1, 0] = m[1]
    a[0, 1] = m[1]
    a[1, 1] = m[2]
    a[2, 0] = m[3]
    a[0, 2] = m[3]
    a[2, 1] = m[4]
    a[1, 2] = m[4]
    a[2, 2] = m[5]
    return a


@njit(cache=True)
def from_mat(a, out):
    out[0] = a[0, 0]
    out[1] = 0.5 * (a[1, 0] + a[0, 1])
    out[2] = a[1, 1]
    out[3] = 0.5 * (a[2, 0] + a[0, 2])
    out[4] = 0.5 * (a[2, 1] + a[1, 2])
    out[5] = a[2, 2]


@njit(cache=True)
def sym_fn(m, use_log, out):
    """Apply log (use_log) or exp to a symmetric tensor via eigendecomposition."""
    w, v = np.linalg.eigh(to_mat(m))
    f = np.empty(3)
    for i in range(3):
        f[i] = math.log(w[i]) if use_log else math.exp(w[i])
    r = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            s = 0.0
            for k in range(3):
                s += v[i, k] * f[k] * v[j, k]
            r[i, j] = s
    from_mat(r, out)


@njit(cache=True)
def min_eig(m):
    w = np.linalg.eigvalsh(to_mat(m))
    return w[0]


@njit(cache=True)
def log_rows(metric, out):
    for i in range(metric.shape[0]):
        sym_fn(metric[i], True, out[i])


@njit(cache=True)
def exp_rows(logs, out):
    for i in range(logs.shape[0]):
        sym_fn(logs[i], False, out[i])


@njit(cache=True)
def length_from_ends(la, lb):
    if abs(la - lb) > EQUAL_BRANCH:
        return (la - lb) / math.log(la / lb)
    return 0.5 * (la + lb)


@njit(cache=True)
def edge_len(coords, metric, a, b):
    vx = coords[b, 0] - coords[a, 0]
    vy = coords[b, 1] - coords[a, 1]
    vz = coords[b, 2] - coords[a, 2]
    la = math.sqrt(quad6(metric[a], vx, vy, vz))
    lb = math.sqrt(quad6(metric[b], vx, vy, vz))
    if la == 0.0 or lb == 0.0:
        return 0.0
    return length_from_ends(la, lb)


@njit(cache=True)
def point_edge_len(p, mp, coords, metric, b):
    """Metric length between a free point (with tensor mp) and vertex b."""
    vx = coords[b, 0] - p[0]
    vy = coords[b, 1] - p[1]
    vz = coords[b, 2] - p[2]
    la = math.sqrt(quad6(mp, vx, vy, vz))
    lb = math.sqrt(quad6(metric[b], vx, vy, vz))
    if la == 0.0 or lb == 0.0:
        return 0.0
    return length_from_ends(la, lb)


@njit(cache=True)
def vol6(coords, a, b, c, d):
    """Six times the signed volume."""
    ux = coords[b, 0] - coords[a, 0]
    uy = coords[b, 1] - coords[a, 1]
    uz = coords[b, 2] - coords[a, 2]
    vx = coords[c, 0] - coords[a, 0]
    vy = coords[c, 1] - coords[a, 1]
    vz = coords[c, 2] - coords[a, 2]
    wx = coords[d, 0] - coords[a, 0]
    wy = coords[d, 1] - coords[a, 1]
    wz = coords[d, 2] - coords[a, 2]
    return ux * (vy * wz - vz * wy) - uy * (vx * wz - vz * wx) + uz * (vx * wy - vy * wx)


@njit(cache=True)
def mean_log(logm, a, b, c, d, out):
    for k in range(6):
        out[k] = 0.25 * (logm[a, k] + logm[b, k] + logm[c, k] + logm[d, k])


@njit(cache=True)
def quality_from_mean(coords, mmean, sqrt_det, a, b, c, d):
    v6 = vol6(coords, a, b, c, d)
    if v6 <= 0.0:
        return 0.0
    idx = (a, b, c, d)
    s = 0.0
    for e in range(6):
        i = idx[TET_EDGES[e, 0]]
        j = idx[TET_EDGES[e, 1]]
        s += quad6(mmean, coords[j, 0] - coords[i, 0], coords[j, 1] - coords[i, 1],
                   coords[j, 2] - coords[i, 2])
    if s <= 0.0:
        return 0.0
    q = MEAN_RATIO_NORM * (v6 / 6.0 * sqrt_det) ** (2.0 / 3.0) / s
    if q > 1.0:
        q = 1.0
    return q


@njit(cache=True)
def tet_quality(coords, logm, a, b, c, d):
    """Mean ratio of tet (a,b,c,d) with the log-Euclidean centroid metric."""
    lm = np.empty(6)
    mean_log(logm, a, b, c, d, lm)
    mm = np.empty(6)
    sym_fn(lm, False, mm)
    sqrt_det = math.exp(0.5 * (lm[0] + lm[2] + lm[5]))
    return quality_from_mean(coords, mm, sqrt_det, a, b, c, d)


@njit(cache=True)
def tets_min_quality(coords, logm, tets):
    """Return (min quality, min 6*volume) over the rows of an (k,4) array."""
    qmin = 1.0
    vmin = np.inf
    for r in range(tets.shape[0]):
        a, b, c, d = tets[r, 0], tets[r, 1], tets[r, 2], tets[r, 3]
        v = vol6(coords, a, b, c, d)
        if v < vmin:
            vmin = v
        if v <= 0.0:
            qmin = 0.0
            continue
        q = tet_quality(coords, logm, a, b, c, d)
        if q < qmin:
            qmin = q
    return qmin, vmin


@njit(cache=True)
def ball_means(logm, tets, means, sqrt_dets):
    lm = np.empty(6)
    for r in range(tets.shape[0]):
        mean_log(logm, tets[r, 0], tets[r, 1], tets[r, 2], tets[r, 3], lm)
        sym_fn(lm, False, means[r])
        sqrt_dets[r] = math.exp(0.5 * (lm[0] + lm[2] + lm[5]))


@njit(cache=True)
def ball_min_quality_cached(coords, tets, means, sqrt_dets):
    """Min quality over a ball with precomputed centroid tensors."""
    qmin = 1.0
    for r in range(tets.shape[0]):
        q = quality_from_mean(coords, means[r], sqrt_dets[r],
                              tets[r, 0], tets[r, 1], tets[r, 2], tets[r, 3])
        if q < qmin:
            qmin = q
            if q == 0.0:
                return 0.0
    return qmin


@njit(cache=True)
def tet_measures(coords, metric, logm, tets, lengths, quality):
    """Edge lengths (k,6) and quality (k,) for every row of ``tets``."""
    for r in range(tets.shape[0]):
        a, b, c, d = tets[r, 0], tets[r, 1], tets[r, 2], tets[r, 3]
        for e in range(6):
            lengths[r, e] = edge_len(coords, metric, tets[r, TET_EDGES[e, 0]],
                                     tets[r, TET_EDGES[e, 1]])
        quality[r] = tet_quality(coords, logm, a, b, c, d)


@njit(cache=True)
def edge_lengths(coords, metric, edges, out):
    for r in range(edges.shape[0]):
        out[r] = edge_len(coords, metric, edges[r, 0], edges[r, 1])


@njit(cache=True)
def polar2_rows(points, h0, hz, clamp, scale, out):
    for i in range(points.shape[0]):
        x = points[i, 0]
        y = points[i, 1]
        r = math.sqrt(x * x + y * y)
        t = math.atan2(y, x)
        hr = h0 + 2.0 * (0.1 - h0) * abs(r - 0.5)
        d = 10.0 * (0.6 - r)
        if clamp and d > 1.0:
            d = 1.0
        if d < 0.0:
            ht = 0.1
        else:
            ht = d / 40.0 + 0.1 * (1.0 - d)
        lr = 1.0 / (hr * hr)
        lt = 1.0 / (ht * ht)
        lz = 1.0 / (hz * hz)
        c = math.cos(t)
        s = math.sin(t)
        out[i, 0] = scale * (c * c * lr + s * s * lt)
        out[i, 1] = scale * (c * s * (lr - lt))
        out[i, 2] = scale * (s * s * lr + c * c * lt)
        out[i, 3] = 0.0
        out[i, 4] = 0.0
        out[i, 5] = scale * lz


@njit(cache=True)
def tet_edge_lengths(coords, metric, a, b, c, d, out):
    idx = (a, b, c, d)
    for e in range(6):
        out[e] = edge_len(coords, metric, idx[TET_EDGES[e, 0]], idx[TET_EDGES[e, 1]])


@njit(cache=True)
def conforming_mask(coords, metric, logm, tets, lo, hi, qmin, out):
    """out[r] = all six edge lengths in [lo, hi] and quality >= qmin."""
    lens = np.empty(6)
    for r in range(tets.shape[0]):
        a, b, c, d = tets[r, 0], tets[r, 1], tets[r, 2], tets[r, 3]
        tet_edge_lengths(coords, metric, a, b, c, d, lens)
        ok = True
        for e in range(6):
            if lens[e] < lo or lens[e] > hi:
                ok = False
                break
        if ok:
            ok = tet_quality(coords, logm, a, b, c, d) >= qmin
        out[r] = ok


@njit(cache=True)
def qualities(coords, logm, tets, out):
    for r in range(tets.shape[0]):
        out[r] = tet_quality(coords, logm, tets[r, 0], tets[r, 1], tets[r, 2], tets[r, 3])


@njit(cache=True)
def _count_out(coords, metric, v, nbrs, lo, hi):
    n = 0
    for k in range(nbrs.shape[0]):
        L = edge_len(coords, metric, v, nbrs[k])
        if L < lo or L > hi:
            n += 1
    return n


@njit(cache=True)
def smooth_vertex(coords, metric, v, nbrs, tets, means, sqrt_dets, dirs, step, n_halvings,
                  max_moves, lo, hi):
    """Pattern search on vertex ``v`` over ``dirs``; keeps only strict improvements.

    A trial must raise the ball's min quality and must not increase the number
    of edges v-nbrs outside [lo, hi]. Returns (initial min quality, final min
    quality). Coordinates of ``v`` are restored exactly on rejection.
    """
    q0 = ball_min_quality_cached(coords, tets, means, sqrt_dets)
    best = q0
    out0 = _count_out(coords, metric, v, nbrs, lo, hi)
    for level in range(n_halvings + 1):
        moves = 0
        improved = True
        while improved and moves < max_moves:
            improved = False
            for k in range(dirs.shape[0]):
                x = coords[v, 0]
                y = coords[v, 1]
                z = coords[v, 2]
                coords[v, 0] = x + step * dirs[k, 0]
                coords[v, 1] = y + step * dirs[k, 1]
                coords[v, 2] = z + step * dirs[k, 2]
                q = ball_min_quality_cached(coords, tets, means, sqrt_dets)
                if q > best and _count_out(coords, metric, v, nbrs, lo, hi) <= out0:
                    best = q
                    improved = True
                    moves += 1
                    break
                coords[v, 0] = x
                coords[v, 1] = y
                coords[v, 2] = z
        step *= 0.5
    return q0, best


@njit(cache=True)
def metric_root(m):
    """Upper factor U with m = U^T U, so |x|_m = |U x|."""
    return np.linalg.cholesky(to_mat(m)).T.copy()


@njit(cache=True)
def in_circumsphere(coords, a, b, c, d, p, U):
    """True when p lies strictly inside the circumsphere of (a,b,c,d) in the space x -> U x."""
    P = np.empty((4, 3))
    idx = (a, b, c, d)
    for k in range(4):
        for i in range(3):
            s = 0.0
            for j in range(3):
                s += U[i, j] * coords[idx[k], j]
            P[k, i] = s
    q = np.empty(3)
    for i in range(3):
        s = 0.0
        for j in range(3):
            s += U[i, j] * p[j]
        q[i] = s
    A = np.empty((3, 3))
    rhs = np.empty(3)
    for k in range(3):
        n2 = 0.0
        for i in range(3):
            A[k, i] = P[k + 1, i] - P[0, i]
            n2 += A[k, i] * A[k, i]
        rhs[k] = 0.5 * n2
    det = (A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
           - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
           + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]))
    scale = 0.0
    for k in range(3):
        scale += rhs[k]
    if abs(det) <= 1e-14 * scale ** 1.5:
        return False
    c_ = np.empty(3)
    for col in range(3):
        B = A.copy()
        for k in range(3):
            B[k, col] = rhs[k]
        c_[col] = (B[0, 0] * (B[1, 1] * B[2, 2] - B[1, 2] * B[2, 1])
                   - B[0, 1] * (B[1, 0] * B[2, 2] - B[1, 2] * B[2, 0])
                   + B[0, 2] * (B[1, 0] * B[2, 1] - B[1, 1] * B[2, 0])) / det
    r2 = c_[0] * c_[0] + c_[1] * c_[1] + c_[2] * c_[2]
    d2 = 0.0
    for i in range(3):
        t = q[i] - P[0, i] - c_[i]
        d2 += t * t
    return d2 < r2 * (1.0 - 1e-12)


@njit(cache=True)
def vol6_point(coords, a, b, c, p):
    ux = coords[b, 0] - coords[a, 0]
    uy = coords[b, 1] - coords[a, 1]
    uz = coords[b, 2] - coords[a, 2]
    vx = coords[c, 0] - coords[a, 0]
    vy = coords[c, 1] - coords[a, 1]
    vz = coords[c, 2] - coords[a, 2]
    wx = p[0] - coords[a, 0]
    wy = p[1] - coords[a, 1]
    wz = p[2] - coords[a, 2]
    return ux * (vy * wz - vz * wy) - uy * (vx * wz - vz * wx) + uz * (vx * wy - vy * wx)


@njit(cache=True)
def longest_edges(coords, metric, tets, length, which):
    lens = np.empty(6)
    for r in range(tets.shape[0]):
        tet_edge_lengths(coords, metric, tets[r, 0], tets[r, 1], tets[r, 2], tets[r, 3], lens)
        k = 0
        for e in range(1, 6):
            if lens[e] > lens[k]:
                k = e
        length[r] = lens[k]
        which[r] = k
