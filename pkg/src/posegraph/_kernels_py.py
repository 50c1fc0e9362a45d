"""Pure NumPy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_kernels`` extension; used
when the extension is missing or ``POSEGRAPH_PURE=1``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def _segment_matrix(seg: np.ndarray, n: int) -> sp.csr_matrix:
    e = seg.shape[0]
    if e and (seg.min() < 0 or seg.max() >= n):
        raise IndexError("segment index out of range")
    return sp.csr_matrix((np.ones(e), (seg, np.arange(e))), shape=(n, e))


def scatter_add(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """``out[index[e]] += values[e]`` for every row ``e``."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    flat = values.reshape(values.shape[0], -1)
    out = _segment_matrix(np.asarray(index, dtype=np.int64), n) @ flat
    return np.asarray(out).reshape((n,) + values.shape[1:])


def segment_softmax(scores: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    """Softmax of ``scores`` (E, H) over rows that share a segment id."""
    scores = np.asarray(scores, dtype=np.float64)
    seg = np.asarray(seg, dtype=np.int64)
    peak = np.full((n,) + scores.shape[1:], -np.inf)
    np.maximum.at(peak, seg, scores)
    ex = np.exp(scores - peak[seg])
    return ex / scatter_add(ex, seg, n)[seg]


def segment_softmax_grad(alpha: np.ndarray, grad: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    seg = np.asarray(seg, dtype=np.int64)
    ag = alpha * grad
    return ag - alpha * scatter_add(ag, seg, n)[seg]


def pairwise_centroids(origins: np.ndarray, dirs: np.ndarray, mask: np.ndarray, min_sin: float):
    """Per-keypoint centroid of midpoint triangulations over camera pairs.

    origins (C, 3), dirs (C, K, 3) unit vectors, mask (C, K) detections.
    Returns ``(centroids (K, 3), pair_counts (K,))``; keypoints without a
    usable pair get a zero centroid and count 0.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    C, K = mask.shape
    total = np.zeros((K, 3))
    count = np.zeros(K, dtype=np.int64)
    for i in range(C):
        for j in range(i + 1, C):
            both = mask[i] & mask[j]
            if not both.any():
                continue
            d1, d2 = dirs[i], dirs[j]
            sin = np.linalg.norm(np.cross(d1, d2), axis=1)
            ok = both & (sin >= min_sin)
            if not ok.any():
                continue
            w = origins[i] - origins[j]
            c = np.einsum("kd,kd->k", d1, d2)
            p = d1 @ w
            q = d2 @ w
            denom = 1.0 - c * c
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (c * q - p) / denom
                r = (q - c * p) / denom
                mid = 0.5 * ((origins[i] + s[:, None] * d1) + (origins[j] + r[:, None] * d2))
            total[ok] += mid[ok]
            count[ok] += 1
    centroids = np.zeros((K, 3))
    has = count > 0
    centroids[has] = total[has] / count[has, None]
    return centroids, count


def reprojection(
    projections: np.ndarray,
    poses: np.ndarray,
    detections: np.ndarray,
    mask: np.ndarray,
    min_depth: float,
    margin: float,
):
    """Manhattan reprojection error per sample with analytic gradients.

    projections (C, 3, 4); poses (B, K, 3) mm; detections (B, C, K, 2) px;
    mask (B, C, K). Depth below ``min_depth`` is soft-clamped as
    ``min_depth * exp((z - min_depth) / min_depth)``; depth below ``margin``
    adds a quadratic barrier ``(margin - z)**2``.

    Returns ``(err (B,), per_camera (B, C), derr (B, K, 3), barrier (B,),
    dbarrier (B, K, 3))``.
    """
    P = np.asarray(projections, dtype=np.float64)
    X = np.asarray(poses, dtype=np.float64)
    S = np.asarray(detections, dtype=np.float64)
    M = np.asarray(mask, dtype=np.float64)
    h = np.einsum("cij,bkj->bcki", P[:, :, :3], X) + P[None, :, None, :, 3]
    z = h[..., 2]
    low = z < min_depth
    zc = np.where(low, min_depth * np.exp((np.minimum(z, min_depth) - min_depth) / min_depth), z)
    dzc = np.where(low, zc / min_depth, 1.0)
    uv = h[..., :2] / zc[..., None]
    diff = uv - S
    per_camera = np.einsum("bck,bck->bc", np.abs(diff).sum(-1), M)
    err = per_camera.sum(1)
    sgn = np.sign(diff) * M[..., None]
    # d(uv_a)/dX = (P_a - uv_a * dzc * P_2) / zc
    rows = P[:, :2, :3]
    third = P[:, 2, :3]
    coef = (sgn / zc[..., None])
    derr = np.einsum("bcka,cad->bkd", coef, rows)
    derr -= np.einsum("bck,cd->bkd", (coef * uv).sum(-1) * dzc, third)
    gap = np.maximum(margin - z, 0.0)
    barrier = (gap**2).sum(axis=(1, 2))
    dbarrier = np.einsum("bck,cd->bkd", -2.0 * gap, third)
    return err, per_camera, derr, barrier, dbarrier


def gat_aggregate(wh: np.ndarray, alpha: np.ndarray, src: np.ndarray, dst: np.ndarray, n: int) -> np.ndarray:
    """``out[i, h] = sum over edges e with dst[e] == i of alpha[e, h] * wh[src[e], h]``.

    wh (N, H, F), alpha (E, H); returns (n, H, F).
    """
    wh = np.asarray(wh, dtype=np.float64)
    H, F = wh.shape[1], wh.shape[2]
    out = np.empty((n, H, F))
    for h in range(H):
        A = sp.csr_matrix((alpha[:, h], (dst, src)), shape=(n, wh.shape[0]))
        out[:, h, :] = A @ wh[:, h, :]
    return out


def gat_aggregate_grad(grad: np.ndarray, wh: np.ndarray, alpha: np.ndarray, src: np.ndarray, dst: np.ndarray):
    """Gradients of :func:`gat_aggregate` w.r.t. ``wh`` and ``alpha``."""
    wh = np.asarray(wh, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    N, H, F = wh.shape
    d_wh = np.empty_like(wh)
    for h in range(H):
        At = sp.csr_matrix((alpha[:, h], (src, dst)), shape=(N, grad.shape[0]))
        d_wh[:, h, :] = At @ grad[:, h, :]
    d_alpha = np.einsum("ehf,ehf->eh", grad[dst], wh[src])
    return d_wh, d_alpha
