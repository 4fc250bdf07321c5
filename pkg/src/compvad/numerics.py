"""Numeric kernels shared by the scoring modules.

All kernels compute in float64.  Cosine distance is evaluated as half the
squared Euclidean distance between the L2-normalized rows, which is
algebraically 1 - cos(a, b) but, being difference-based, returns exactly 0.0
for bitwise-identical inputs instead of a rounding residue.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

METRICS = ("cosine", "l1", "l2")

# query-block size for min_distance_search; bounds the (block x refs) buffer
_BLOCK_ENTRIES = 2 ** 24


def _as_2d(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D (rows x channels), got ndim {arr.ndim}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def normalize_rows(x, name="array"):
    """L2-normalize rows; rejects zero-norm rows rather than guessing."""
    arr = _as_2d(x, name)
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    bad = np.nonzero(norms[:, 0] == 0.0)[0]
    if bad.size:
        raise ValueError(f"{name} has zero-norm row(s) at indices {bad.tolist()[:8]}; "
                         "cosine geometry is undefined for zero vectors")
    return arr / norms


def _pair_distances(queries, refs, metric):
    if metric == "cosine":
        d = cdist(queries, refs, "sqeuclidean")
        d *= 0.5
        np.clip(d, 0.0, 2.0, out=d)
        return d
    if metric == "l1":
        return cdist(queries, refs, "cityblock")
    if metric == "l2":
        return cdist(queries, refs, "euclidean")
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def distance(a, b, metric="cosine"):
    """Distance between two vectors of equal length.

    cosine: 1 - cos(a, b), in [0, 2], exact 0 for identical inputs.
    """
    a = np.asarray(a, dtype=np.float64).reshape(1, -1)
    b = np.asarray(b, dtype=np.float64).reshape(1, -1)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"length mismatch: {a.shape[1]} vs {b.shape[1]}")
    if metric == "cosine":
        a = normalize_rows(a, "a")
        b = normalize_rows(b, "b")
    elif metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    return float(_pair_distances(a, b, metric)[0, 0])


def min_distance_search(queries, refs, metric="cosine"):
    """For each query row, the distance to its nearest reference row.

    queries: (Q, C), refs: (R, C).  Returns (Q,) float64.  Large inputs are
    processed in query blocks so the pairwise buffer stays bounded.
    """
    q = _as_2d(queries, "queries")
    r = _as_2d(refs, "refs")
    if q.shape[1] != r.shape[1]:
        raise ValueError(f"channel mismatch: queries {q.shape[1]} vs refs {r.shape[1]}")
    if metric == "cosine":
        q = normalize_rows(q, "queries")
        r = normalize_rows(r, "refs")
    elif metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    out = np.empty(q.shape[0], dtype=np.float64)
    block = max(1, _BLOCK_ENTRIES // r.shape[0])
    for start in range(0, q.shape[0], block):
        stop = min(start + block, q.shape[0])
        out[start:stop] = _pair_distances(q[start:stop], r, metric).min(axis=1)
    return out


def softmax_pair(score_first, score_second, temperature=1.0):
    """Probability of the second score under a 2-way softmax at `temperature`.

    Equal scores give exactly 0.5 at any temperature.
    """
    a = float(score_first)
    b = float(score_second)
    t = float(temperature)
    if not (np.isfinite(a) and np.isfinite(b)):
        raise ValueError(f"scores must be finite, got ({score_first}, {score_second})")
    if not (np.isfinite(t) and t > 0):
        raise ValueError(f"temperature must be finite and > 0, got {temperature}")
    za = a / t
    zb = b / t
    m = max(za, zb)
    ea = np.exp(za - m)
    eb = np.exp(zb - m)
    return float(eb / (ea + eb))


def kmeans(points, n_clusters, seed=0, max_iter=100, tol=1e-6,
           return_history=False):
    """Lloyd iterations with seeded k-means++ init over Euclidean distance.

    points: (P, C) with P >= n_clusters.  Returns (centroids (N, C),
    assignments (P,) int64).  Deterministic for a given seed.  Empty clusters
    are refilled with the point currently farthest from its centroid.  With
    `return_history`, also returns the per-iteration objective (sum of squared
    distances after each assignment step), which is non-increasing.
    """
    pts = _as_2d(points, "points")
    n = int(n_clusters)
    if n < 1:
        raise ValueError(f"n_clusters must be >= 1, got {n_clusters}")
    if pts.shape[0] < n:
        raise ValueError(f"need at least n_clusters={n} points, got {pts.shape[0]}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(pts, n, rng)
    assignments = np.zeros(pts.shape[0], dtype=np.int64)
    history = []
    for _ in range(int(max_iter)):
        d2 = cdist(pts, centroids, "sqeuclidean")
        assignments = d2.argmin(axis=1)
        nearest = d2[np.arange(pts.shape[0]), assignments]
        for c in range(n):
            if np.any(assignments == c):
                continue
            far = int(np.argmax(nearest))
            assignments[far] = c
            centroids[c] = pts[far]
            nearest[far] = 0.0
        history.append(float(nearest.sum()))
        new = np.empty_like(centroids)
        for c in range(n):
            new[c] = pts[assignments == c].mean(axis=0)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    d2 = cdist(pts, centroids, "sqeuclidean")
    assignments = d2.argmin(axis=1)
    if return_history:
        return centroids, assignments, history
    return centroids, assignments


def _kmeans_pp_init(pts, n, rng):
    idx = int(rng.integers(pts.shape[0]))
    centers = [pts[idx]]
    d2 = ((pts - pts[idx]) ** 2).sum(axis=1)
    for _ in range(1, n):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(pts.shape[0], p=d2 / total))
        else:
            # all remaining points coincide with a chosen center
            nxt = int(rng.integers(pts.shape[0]))
        centers.append(pts[nxt])
        d2 = np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return np.array(centers)


def bilinear_resize(m, out_h, out_w):
    """Corner-aligned bilinear resample of a (H, W) or (H, W, C) map.

    Output corners sample input corners exactly; an output dim of 1 samples
    position 0.  Interpolation uses the a + (b - a) * t form, so a constant
    map stays exactly constant and identity resizes are bitwise copies.
    """
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ValueError(f"map must be 2-D or 3-D, got ndim {arr.ndim}")
    h, w = arr.shape[0], arr.shape[1]
    out_h = int(out_h)
    out_w = int(out_w)
    if min(h, w, out_h, out_w) < 1:
        raise ValueError("all dims must be >= 1")
    if (out_h, out_w) == (h, w):
        return arr.copy()

    def coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(np.int64), max(n_in - 2, 0))
        frac = pos - lo
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, frac

    r0, r1, fr = coords(h, out_h)
    c0, c1, fc = coords(w, out_w)
    fr = fr.reshape((-1,) + (1,) * (arr.ndim - 1))
    fc = fc.reshape((1, -1) + (1,) * (arr.ndim - 2))
    rows = arr[r0] + (arr[r1] - arr[r0]) * fr
    return rows[:, c0] + (rows[:, c1] - rows[:, c0]) * fc


def group_average_pool(feature_map, mask):
    """Mean feature vector over the active cells of a binary mask.

    feature_map: (h, w, C); mask: (h, w), nonzero = active.  Errors on an
    empty mask instead of producing NaNs.
    """
    fm = np.asarray(feature_map, dtype=np.float64)
    mk = np.asarray(mask)
    if fm.ndim != 3:
        raise ValueError(f"feature_map must be (h, w, C), got ndim {fm.ndim}")
    if mk.shape != fm.shape[:2]:
        raise ValueError(f"mask dims {mk.shape} != feature grid {fm.shape[:2]}")
    active = mk != 0
    count = int(active.sum())
    if count == 0:
        raise ValueError("mask selects no cells; pooling is undefined")
    return fm[active].mean(axis=0)


def iou(a, b):
    """Intersection over union of two binary masks; 0.0 when both are empty."""
    ma = np.asarray(a) != 0
    mb = np.asarray(b) != 0
    if ma.shape != mb.shape:
        raise ValueError(f"mask dims differ: {ma.shape} vs {mb.shape}")
    inter = np.logical_and(ma, mb).sum()
    union = np.logical_or(ma, mb).sum()
    if union == 0:
        return 0.0
    return float(inter / union)
