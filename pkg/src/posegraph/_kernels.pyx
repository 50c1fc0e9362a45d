# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Mirrors ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, sqrt

cnp.import_array()


def scatter_add(values, index, Py_ssize_t n):
    cdef cnp.ndarray arr = np.ascontiguousarray(values, dtype=np.float64)
    shape = (<object>arr).shape
    cdef const double[:, ::1] v = arr.reshape(arr.shape[0], -1)
    cdef const long long[::1] idx = np.ascontiguousarray(index, dtype=np.int64)
    cdef Py_ssize_t E = v.shape[0], D = v.shape[1], e, d, row
    out = np.zeros((n, D))
    cdef double[:, ::1] o = out
    for e in range(E):
        row = idx[e]
        if row < 0 or row >= n:
            raise IndexError("scatter index out of range")
        for d in range(D):
            o[row, d] += v[e, d]
    return out.reshape((n,) + tuple(shape[1:]))


def segment_softmax(scores, seg, Py_ssize_t n):
    cdef const double[:, ::1] s = np.ascontiguousarray(scores, dtype=np.float64)
    cdef const long long[::1] g = np.ascontiguousarray(seg, dtype=np.int64)
    cdef Py_ssize_t E = s.shape[0], H = s.shape[1], e, h, row
    peak_arr = np.full((n, H), -np.inf)
    total_arr = np.zeros((n, H))
    out = np.empty((E, H))
    cdef double[:, ::1] peak = peak_arr
    cdef double[:, ::1] total = total_arr
    cdef double[:, ::1] o = out
    for e in range(E):
        row = g[e]
        if row < 0 or row >= n:
            raise IndexError("segment index out of range")
        for h in range(H):
            if s[e, h] > peak[row, h]:
                peak[row, h] = s[e, h]
    for e in range(E):
        row = g[e]
        for h in range(H):
            o[e, h] = exp(s[e, h] - peak[row, h])
            total[row, h] += o[e, h]
    for e in range(E):
        row = g[e]
        for h in range(H):
            o[e, h] /= total[row, h]
    return out


def segment_softmax_grad(alpha, grad, seg, Py_ssize_t n):
    cdef const double[:, ::1] a = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef const double[:, ::1] gr = np.ascontiguousarray(grad, dtype=np.float64)
    cdef const long long[::1] g = np.ascontiguousarray(seg, dtype=np.int64)
    cdef Py_ssize_t E = a.shape[0], H = a.shape[1], e, h, row
    acc_arr = np.zeros((n, H))
    out = np.empty((E, H))
    cdef double[:, ::1] acc = acc_arr
    cdef double[:, ::1] o = out
    for e in range(E):
        row = g[e]
        if row < 0 or row >= n:
            raise IndexError("segment index out of range")
        for h in range(H):
            o[e, h] = a[e, h] * gr[e, h]
            acc[row, h] += o[e, h]
    for e in range(E):
        row = g[e]
        for h in range(H):
            o[e, h] -= a[e, h] * acc[row, h]
    return out


def pairwise_centroids(origins, dirs, mask, double min_sin):
    cdef const double[:, ::1] org = np.ascontiguousarray(origins, dtype=np.float64)
    cdef const double[:, :, ::1] dr = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef const unsigned char[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t C = m.shape[0], K = m.shape[1], i, j, k, a
    total_arr = np.zeros((K, 3))
    count_arr = np.zeros(K, dtype=np.int64)
    cdef double[:, ::1] total = total_arr
    cdef long long[::1] count = count_arr
    cdef double w[3]
    cdef double cx, cy, cz, sn, c, p, q, denom, s, r
    for i in range(C):
        for j in range(i + 1, C):
            for a in range(3):
                w[a] = org[i, a] - org[j, a]
            for k in range(K):
                if not (m[i, k] and m[j, k]):
                    continue
                cx = dr[i, k, 1] * dr[j, k, 2] - dr[i, k, 2] * dr[j, k, 1]
                cy = dr[i, k, 2] * dr[j, k, 0] - dr[i, k, 0] * dr[j, k, 2]
                cz = dr[i, k, 0] * dr[j, k, 1] - dr[i, k, 1] * dr[j, k, 0]
                sn = sqrt(cx * cx + cy * cy + cz * cz)
                if sn < min_sin:
                    continue
                c = 0.0
                p = 0.0
                q = 0.0
                for a in range(3):
                    c += dr[i, k, a] * dr[j, k, a]
                    p += dr[i, k, a] * w[a]
                    q += dr[j, k, a] * w[a]
                denom = 1.0 - c * c
                s = (c * q - p) / denom
                r = (q - c * p) / denom
                for a in range(3):
                    total[k, a] += 0.5 * ((org[i, a] + s * dr[i, k, a]) + (org[j, a] + r * dr[j, k, a]))
                count[k] += 1
    for k in range(K):
        if count[k] > 0:
            for a in range(3):
                total[k, a] /= count[k]
    return total_arr, count_arr


def reprojection(projections, poses, detections, mask, double min_depth, double margin):
    cdef const double[:, :, ::1] P = np.ascontiguousarray(projections, dtype=np.float64)
    cdef const double[:, :, ::1] X = np.ascontiguousarray(poses, dtype=np.float64)
    cdef const double[:, :, :, ::1] S = np.ascontiguousarray(detections, dtype=np.float64)
    cdef const double[:, :, ::1] M = np.ascontiguousarray(mask, dtype=np.float64)
    cdef Py_ssize_t B = X.shape[0], K = X.shape[1], C = P.shape[0], b, c, k, d
    err_arr = np.zeros(B)
    per_arr = np.zeros((B, C))
    derr_arr = np.zeros((B, K, 3))
    bar_arr = np.zeros(B)
    dbar_arr = np.zeros((B, K, 3))
    cdef double[::1] err = err_arr
    cdef double[:, ::1] per = per_arr
    cdef double[:, :, ::1] derr = derr_arr
    cdef double[::1] bar = bar_arr
    cdef double[:, :, ::1] dbar = dbar_arr
    cdef double h0, h1, z, zc, dzc, u, v, du, dv, su, sv, wt, gap, cu, cv, tail
    for b in range(B):
        for c in range(C):
            for k in range(K):
                h0 = P[c, 0, 3]
                h1 = P[c, 1, 3]
                z = P[c, 2, 3]
                for d in range(3):
                    h0 += P[c, 0, d] * X[b, k, d]
                    h1 += P[c, 1, d] * X[b, k, d]
                    z += P[c, 2, d] * X[b, k, d]
                if margin > z:
                    gap = margin - z
                    bar[b] += gap * gap
                    for d in range(3):
                        dbar[b, k, d] -= 2.0 * gap * P[c, 2, d]
                wt = M[b, c, k]
                if wt == 0.0:
                    continue
                if z < min_depth:
                    zc = min_depth * exp((z - min_depth) / min_depth)
                    dzc = zc / min_depth
                else:
                    zc = z
                    dzc = 1.0
                u = h0 / zc
                v = h1 / zc
                du = u - S[b, c, k, 0]
                dv = v - S[b, c, k, 1]
                per[b, c] += wt * (fabs(du) + fabs(dv))
                su = (du > 0) - (du < 0)
                sv = (dv > 0) - (dv < 0)
                cu = wt * su / zc
                cv = wt * sv / zc
                tail = (cu * u + cv * v) * dzc
                for d in range(3):
                    derr[b, k, d] += cu * P[c, 0, d] + cv * P[c, 1, d] - tail * P[c, 2, d]
        for c in range(C):
            err[b] += per[b, c]
    return err_arr, per_arr, derr_arr, bar_arr, dbar_arr


def gat_aggregate(wh, alpha, src, dst, Py_ssize_t n):
    cdef const double[:, :, ::1] w = np.ascontiguousarray(wh, dtype=np.float64)
    cdef const double[:, ::1] a = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef const long long[::1] s = np.ascontiguousarray(src, dtype=np.int64)
    cdef const long long[::1] t = np.ascontiguousarray(dst, dtype=np.int64)
    cdef Py_ssize_t E = a.shape[0], H = w.shape[1], F = w.shape[2], N = w.shape[0], e, h, f, i, j
    cdef double wt
    out = np.zeros((n, H, F))
    cdef double[:, :, ::1] o = out
    for e in range(E):
        i = t[e]
        j = s[e]
        if i < 0 or i >= n or j < 0 or j >= N:
            raise IndexError("edge index out of range")
        for h in range(H):
            wt = a[e, h]
            for f in range(F):
                o[i, h, f] += wt * w[j, h, f]
    return out


def gat_aggregate_grad(grad, wh, alpha, src, dst):
    cdef const double[:, :, ::1] g = np.ascontiguousarray(grad, dtype=np.float64)
    cdef const double[:, :, ::1] w = np.ascontiguousarray(wh, dtype=np.float64)
    cdef const double[:, ::1] a = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef const long long[::1] s = np.ascontiguousarray(src, dtype=np.int64)
    cdef const long long[::1] t = np.ascontiguousarray(dst, dtype=np.int64)
    cdef Py_ssize_t E = a.shape[0], H = w.shape[1], F = w.shape[2], N = w.shape[0], n = g.shape[0], e, h, f, i, j
    cdef double wt, acc
    d_wh_arr = np.zeros((N, H, F))
    d_alpha_arr = np.empty((E, H))
    cdef double[:, :, ::1] dw = d_wh_arr
    cdef double[:, ::1] da = d_alpha_arr
    for e in range(E):
        i = t[e]
        j = s[e]
        if i < 0 or i >= n or j < 0 or j >= N:
            raise IndexError("edge index out of range")
        for h in range(H):
            wt = a[e, h]
            acc = 0.0
            for f in range(F):
                dw[j, h, f] += wt * g[i, h, f]
                acc += g[i, h, f] * w[j, h, f]
            da[e, h] = acc
    return d_wh_arr, d_alpha_arr
