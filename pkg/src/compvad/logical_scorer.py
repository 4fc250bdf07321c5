"""Component-level logical anomaly scoring.

Each component is summarized two ways:

  * a deep embedding: group-average-pooled features, mixed across components
    by one round of graph aggregation so a missing or swapped neighbor shifts
    the embeddings of the components that remain;
  * a geometric vector: area fraction, mean RGB, and normalized centroid.

Both are scored by nearest-neighbor distance against the pools built from the
reference bank, combined per component by weighted sum, and rasterized back to
an image-sized map (background stays 0; overlaps take the max).
"""

from __future__ import annotations

import numpy as np

from .numerics import group_average_pool, min_distance_search, normalize_rows

AGGREGATION_MODES = ("attention", "adjacency")

GEOMETRIC_DIM = 6


def component_cells(components, grid_hw):
    """Downsample component masks to a feature grid by center sampling.

    Returns (N, h1, w1) uint8.  A component too small to cover any cell
    center falls back to the single cell under the pixel nearest its mask
    centroid, so every component keeps at least one cell.
    """
    h1, w1 = grid_hw
    big_h, big_w = components.image_hw
    rows = np.minimum(((np.arange(h1) + 0.5) * big_h / h1).astype(np.int64), big_h - 1)
    cols = np.minimum(((np.arange(w1) + 0.5) * big_w / w1).astype(np.int64), big_w - 1)
    out = np.zeros((len(components), h1, w1), dtype=np.uint8)
    for i, mask in enumerate(components.masks):
        cells = (mask[rows][:, cols] != 0).astype(np.uint8)
        if not cells.any():
            ys, xs = np.nonzero(mask)
            if ys.size == 0:
                raise ValueError(f"component {i} has an empty mask")
            cy, cx = ys.mean(), xs.mean()
            near = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
            cells[min(int(ys[near] * h1 // big_h), h1 - 1),
                  min(int(xs[near] * w1 // big_w), w1 - 1)] = 1
        out[i] = cells
    return out


def component_features(feature_map, components):
    """Group-average-pooled deep feature per component, (N, C)."""
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim != 3:
        raise ValueError(f"feature_map must be (h, w, C), got ndim {fm.ndim}")
    cells = component_cells(components, fm.shape[:2])
    return np.stack([group_average_pool(fm, c) for c in cells])


def _rownorm_nonneg(mat):
    """Clamp negatives to 0 and normalize rows to sum 1 (uniform if all 0)."""
    w = np.clip(mat, 0.0, None)
    sums = w.sum(axis=1, keepdims=True)
    n = mat.shape[1]
    uniform = np.full(n, 1.0 / n)
    out = np.where(sums > 0, w / np.maximum(sums, 1e-300), uniform)
    return out


def adjacency(deep_features):
    """Cosine-similarity adjacency with non-negative rows summing to 1.

    Negative similarities are clamped to 0 before row normalization; a row
    with no positive similarity becomes uniform.  Rejects zero-norm rows.
    """
    feats = np.asarray(deep_features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"deep_features must be (N, C), got ndim {feats.ndim}")
    normed = normalize_rows(feats, "deep_features")
    sims = normed @ normed.T
    return _rownorm_nonneg(sims)


def aggregate(deep_features, mode="attention", adj=None):
    """One round of graph aggregation over component features.

    'attention' weighs neighbors by scaled dot products of the raw features
    (query = key = value = the features, scale = 1/sqrt(C)); 'adjacency'
    multiplies by the cosine adjacency (computed here unless `adj` is given).
    Both weight matrices have non-negative rows summing to 1, so every output
    row is a convex combination of input rows.
    """
    feats = np.asarray(deep_features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"deep_features must be (N, C), got ndim {feats.ndim}")
    if mode == "attention":
        c = feats.shape[1]
        logits = (feats @ feats.T) / np.sqrt(c)
        weights = _rownorm_nonneg(logits)
    elif mode == "adjacency":
        weights = adjacency(feats) if adj is None else np.asarray(adj, dtype=np.float64)
    else:
        raise ValueError(f"mode must be one of {AGGREGATION_MODES}, got {mode!r}")
    return weights @ feats


def geometric_features(mask, image):
    """Six geometry/appearance numbers for one component mask.

    [area fraction, mean R/255, mean G/255, mean B/255,
     (mean column + 0.5) / W, (mean row + 0.5) / H]
    so every entry of a sane component lies in [0, 1].
    """
    mk = np.asarray(mask) != 0
    img = np.asarray(image)
    if mk.ndim != 2:
        raise ValueError(f"mask must be 2-D, got ndim {mk.ndim}")
    if img.shape[:2] != mk.shape or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(
            f"image dims {img.shape} incompatible with mask {mk.shape}")
    area = int(mk.sum())
    if area == 0:
        raise ValueError("mask is empty; geometry is undefined")
    h, w = mk.shape
    ys, xs = np.nonzero(mk)
    rgb = img[mk].astype(np.float64).mean(axis=0) / 255.0
    return np.array([
        area / (h * w),
        rgb[0], rgb[1], rgb[2],
        (xs.mean() + 0.5) / w,
        (ys.mean() + 0.5) / h,
    ])


def geometric_feature_matrix(components, image):
    """geometric_features stacked over all components, (N, 6)."""
    return np.stack([geometric_features(m, image) for m in components.masks])


def score_deep(query_embeddings, normal_embeddings, metric="cosine"):
    """Nearest-normal-embedding distance per query component, (N,)."""
    return min_distance_search(query_embeddings, normal_embeddings, metric=metric)


def score_geo(query_geometry, normal_geometry, metric="cosine"):
    """Nearest-normal-geometry distance per query component, (N,)."""
    return min_distance_search(query_geometry, normal_geometry, metric=metric)


def score_logical(deep_scores, geo_scores, weight_deep=0.5, weight_geo=0.5):
    """Weighted per-component combination of the two logical scores."""
    d = np.asarray(deep_scores, dtype=np.float64)
    g = np.asarray(geo_scores, dtype=np.float64)
    if d.shape != g.shape:
        raise ValueError(f"score dims differ: {d.shape} vs {g.shape}")
    for name, v in (("weight_deep", weight_deep), ("weight_geo", weight_geo)):
        if not (np.isfinite(v) and v >= 0):
            raise ValueError(f"{name} must be finite and >= 0, got {v}")
    return weight_deep * d + weight_geo * g


def rasterize(components, component_scores):
    """Paint per-component scores onto an (H, W) map.

    Background pixels stay 0; pixels under overlapping components take the
    maximum of the covering scores.
    """
    scores = np.asarray(component_scores, dtype=np.float64)
    if scores.shape[0] != len(components):
        raise ValueError(
            f"{scores.shape[0]} scores for {len(components)} components")
    h, w = components.image_hw
    out = np.zeros((h, w), dtype=np.float64)
    for mask, s in zip(components.masks, scores):
        region = mask != 0
        out[region] = np.maximum(out[region], s)
    return out
