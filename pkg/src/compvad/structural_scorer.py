"""Patch-level structural anomaly scoring against pooled normal patches.

Three per-patch score maps over one feature level, combined by weighted sum:

  * plain matching: distance of each query patch to its nearest patch in the
    pooled normal bank;
  * component-aware matching: the same search restricted to normal patches of
    the component the query patch belongs to (components correspond across
    images by segmentation label);
  * text contrast: 2-way softmax over the cosine similarity of each patch to
    a normal-text and an anomalous-text embedding; the anomalous probability
    is the score.

Scores live on the patch grid; the pipeline upsamples them to image size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import METRICS, bilinear_resize, min_distance_search, normalize_rows

FALLBACKS = ("global", "max_penalty")


@dataclass(frozen=True)
class ScorerConfig:
    """Weights and knobs for the structural score combination."""

    weight_pm: float = 1.0 / 3.0
    weight_aware: float = 1.0 / 3.0
    weight_vl: float = 1.0 / 3.0
    metric: str = "cosine"
    temperature: float = 1.0
    empty_component_fallback: str = "global"

    def __post_init__(self):
        for name in ("weight_pm", "weight_aware", "weight_vl"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.empty_component_fallback not in FALLBACKS:
            raise ValueError(
                f"empty_component_fallback must be one of {FALLBACKS}, "
                f"got {self.empty_component_fallback!r}")


@dataclass(frozen=True)
class PatchPartition:
    """Patch-to-component assignment on one patch grid.

    assignments: flat (h2*w2,) array of component positions, -1 for patches
    outside every component.  labels: correspondence label per component.
    """

    grid_hw: tuple
    assignments: np.ndarray
    labels: np.ndarray

    def patches_of(self, position):
        return np.nonzero(self.assignments == position)[0]

    @property
    def residual(self):
        return np.nonzero(self.assignments == -1)[0]


def to_patch_grid(feature_map, out_h, out_w):
    """Resample a (h, w, C) feature map onto an (out_h, out_w) patch grid."""
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim != 3:
        raise ValueError(f"feature_map must be (h, w, C), got ndim {fm.ndim}")
    return bilinear_resize(fm, out_h, out_w)


def partition_patches(grid_hw, components):
    """Assign each patch to the component containing its center pixel.

    A patch on the (h2, w2) grid over an (H, W) image belongs to component i
    iff the image pixel under the patch center is inside mask i; overlaps
    resolve to the lowest component position.  Patches under no mask are
    residual (-1).
    """
    h2, w2 = grid_hw
    if min(h2, w2) < 1:
        raise ValueError(f"patch grid dims must be >= 1, got {grid_hw}")
    big_h, big_w = components.image_hw
    rows = np.minimum(((np.arange(h2) + 0.5) * big_h / h2).astype(np.int64), big_h - 1)
    cols = np.minimum(((np.arange(w2) + 0.5) * big_w / w2).astype(np.int64), big_w - 1)
    owner = np.full(h2 * w2, -1, dtype=np.int64)
    # write high positions first so the lowest position wins overlaps
    for pos in range(len(components) - 1, -1, -1):
        centers = components.masks[pos][rows][:, cols] != 0
        owner[centers.reshape(-1)] = pos
    return PatchPartition((h2, w2), owner, np.asarray(components.labels, dtype=np.int64))


def score_pm(query_patches, normal_patches, metric="cosine"):
    """Nearest-normal-patch distance per query patch.

    query_patches: (h2, w2, C); normal_patches: (R, C) pooled over the bank.
    """
    qp = np.asarray(query_patches, dtype=np.float64)
    if qp.ndim != 3:
        raise ValueError(f"query_patches must be (h2, w2, C), got ndim {qp.ndim}")
    h2, w2, c = qp.shape
    d = min_distance_search(qp.reshape(-1, c), normal_patches, metric=metric)
    return d.reshape(h2, w2)


def score_aware(query_patches, partition, normal_by_label, normal_all,
                metric="cosine", fallback="global"):
    """Component-restricted nearest-normal distance per query patch.

    normal_by_label maps a component label to the pooled normal patches of
    that component; normal_all is the unrestricted pool.  Query patches whose
    component has no normal counterpart, and residual patches, receive the
    fallback: 'global' searches normal_all, 'max_penalty' assigns the maximum
    of the component-restricted scores (0.0 if none were computed).
    """
    if fallback not in FALLBACKS:
        raise ValueError(f"fallback must be one of {FALLBACKS}, got {fallback!r}")
    qp = np.asarray(query_patches, dtype=np.float64)
    h2, w2, c = qp.shape
    flat = qp.reshape(-1, c)
    if (h2, w2) != tuple(partition.grid_hw):
        raise ValueError(
            f"patch grid {(h2, w2)} != partition grid {tuple(partition.grid_hw)}")
    out = np.zeros(h2 * w2, dtype=np.float64)
    needs_fallback = list(partition.residual)
    restricted_max = None
    for pos, label in enumerate(partition.labels):
        idx = partition.patches_of(pos)
        if idx.size == 0:
            continue
        pool = normal_by_label.get(int(label))
        if pool is None or len(pool) == 0:
            needs_fallback.extend(idx)
            continue
        d = min_distance_search(flat[idx], pool, metric=metric)
        out[idx] = d
        m = float(d.max())
        restricted_max = m if restricted_max is None else max(restricted_max, m)
    if needs_fallback:
        fb = np.asarray(sorted(needs_fallback), dtype=np.int64)
        if fallback == "global":
            out[fb] = min_distance_search(flat[fb], normal_all, metric=metric)
        else:
            out[fb] = restricted_max if restricted_max is not None else 0.0
    return out.reshape(h2, w2)


def score_vl(query_patches, text_normal, text_anomalous, temperature=1.0):
    """Per-patch anomaly probability from a normal/anomalous text pair.

    Each patch's cosine similarities to the two text embeddings pass through
    a 2-way softmax at `temperature`; the anomalous-side probability is
    returned.  A patch equally similar to both texts scores exactly 0.5.
    """
    if not (np.isfinite(temperature) and temperature > 0):
        raise ValueError(f"temperature must be > 0, got {temperature}")
    qp = np.asarray(query_patches, dtype=np.float64)
    h2, w2, c = qp.shape
    tn = np.asarray(text_normal, dtype=np.float64).reshape(-1)
    ta = np.asarray(text_anomalous, dtype=np.float64).reshape(-1)
    if tn.shape[0] != c or ta.shape[0] != c:
        raise ValueError(
            f"text dims ({tn.shape[0]}, {ta.shape[0]}) != patch channels {c}")
    flat = normalize_rows(qp.reshape(-1, c), "query_patches")
    tn = normalize_rows(tn.reshape(1, -1), "text_normal")[0]
    ta = normalize_rows(ta.reshape(1, -1), "text_anomalous")[0]
    zn = (flat @ tn) / temperature
    za = (flat @ ta) / temperature
    m = np.maximum(zn, za)
    en = np.exp(zn - m)
    ea = np.exp(za - m)
    return (ea / (en + ea)).reshape(h2, w2)


def score_structural(pm_map, aware_map, vl_map, config):
    """Weighted sum of the three structural maps."""
    maps = [np.asarray(m, dtype=np.float64) for m in (pm_map, aware_map, vl_map)]
    if maps[0].shape != maps[1].shape or maps[0].shape != maps[2].shape:
        raise ValueError(
            f"map dims differ: {[m.shape for m in maps]}")
    return (config.weight_pm * maps[0]
            + config.weight_aware * maps[1]
            + config.weight_vl * maps[2])
