"""Component segmentation: fuse external candidate masks with cluster masks.

Candidate masks (from an off-line grounded segmentation stage) are precise but
over- or under-segmented; cluster masks from k-means over reference features
carry stable part identity across images of one category.  Fusion keeps the
candidate geometry and the cluster identity:

  * exactly one candidate covering more than `area_ratio_threshold` of the
    image: the image is treated as a single full-frame component (texture);
  * exactly one candidate below the threshold: that candidate is the single
    component (single object);
  * no candidates: full-frame fallback;
  * two or more candidates: cluster masks are built from the reference
    centroids, background clusters are dropped by the corner rule, every
    candidate is labeled with the cluster mask of highest IoU, and candidates
    sharing a label are unioned into one component.

Component labels are the surviving k-means centroid indices, so components of
different images segmented against the same centroids correspond by label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import iou, kmeans

FULL_FRAME_LABEL = 0


@dataclass(frozen=True)
class SegmenterConfig:
    """Knobs for candidate/cluster fusion."""

    n_clusters: int = 6
    area_ratio_threshold: float = 0.9
    background_corner_rule: int = 3

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError(f"n_clusters must be >= 1, got {self.n_clusters}")
        if not 0.0 < self.area_ratio_threshold < 1.0:
            raise ValueError(
                f"area_ratio_threshold must be in (0, 1), got {self.area_ratio_threshold}")
        if self.background_corner_rule not in (1, 2, 3, 4):
            raise ValueError(
                f"background_corner_rule must be in 1..4, got {self.background_corner_rule}")


@dataclass(frozen=True)
class ClusterMaskSet:
    """Per-centroid binary masks plus the centroid index behind each mask."""

    masks: np.ndarray          # (N, h, w) uint8
    centroid_ids: np.ndarray   # (N,) int64


@dataclass(frozen=True)
class ComponentMaskSet:
    """Final component masks at image resolution.

    `labels[i]` is the correspondence label of component i: the k-means
    centroid index its candidates were assigned to, or FULL_FRAME_LABEL for
    the single-candidate / no-candidate branches.  Masks may overlap only
    where the input candidates overlapped.
    """

    masks: np.ndarray          # (N, H, W) uint8
    labels: np.ndarray         # (N,) int64

    def __len__(self):
        return self.masks.shape[0]

    @property
    def image_hw(self):
        return self.masks.shape[1], self.masks.shape[2]


def fit_centroids(reference_feature_maps, n_clusters, seed=0):
    """k-means centroids over all cells of the reference cluster-feature maps.

    reference_feature_maps: list of (h, w, C) arrays sharing h, w, C.
    """
    if not reference_feature_maps:
        raise ValueError("need at least one reference feature map")
    shapes = {np.asarray(f).shape for f in reference_feature_maps}
    if len(shapes) != 1:
        raise ValueError(f"reference feature maps disagree on dims: {sorted(shapes)}")
    cells = np.concatenate(
        [np.asarray(f, dtype=np.float64).reshape(-1, f.shape[-1])
         for f in reference_feature_maps])
    centroids, _ = kmeans(cells, n_clusters, seed=seed)
    return centroids


def assign_to_centroids(centroids, target_features):
    """Assign every feature cell to its most cosine-similar centroid.

    Ties go to the lowest centroid index.  Cells (or centroids) with zero
    norm fall back to Euclidean nearest-centroid for the affected cells.
    Returns a ClusterMaskSet at feature resolution whose masks partition the
    grid; masks of centroids that won no cell are empty but still present.
    """
    cents = np.asarray(centroids, dtype=np.float64)
    feats = np.asarray(target_features, dtype=np.float64)
    if cents.ndim != 2:
        raise ValueError(f"centroids must be (N, C), got ndim {cents.ndim}")
    if feats.ndim != 3:
        raise ValueError(f"target_features must be (h, w, C), got ndim {feats.ndim}")
    if feats.shape[-1] != cents.shape[-1]:
        raise ValueError(
            f"channel mismatch: features {feats.shape[-1]} vs centroids {cents.shape[-1]}")
    h, w, c = feats.shape
    n = cents.shape[0]
    flat = feats.reshape(-1, c)

    cell_norms = np.linalg.norm(flat, axis=1)
    cent_norms = np.linalg.norm(cents, axis=1)
    safe_cells = cell_norms > 0
    safe_cents = cent_norms > 0
    sims = np.full((flat.shape[0], n), -np.inf)
    if safe_cents.any():
        num = flat @ cents[safe_cents].T
        denom = np.outer(cell_norms, cent_norms[safe_cents])
        with np.errstate(invalid="ignore", divide="ignore"):
            sims[:, safe_cents] = np.where(denom > 0, num / np.maximum(denom, 1e-300), -np.inf)
    # argmax over reversed axis trick is unnecessary: np.argmax takes the first
    # (lowest) index on ties already
    assign = sims.argmax(axis=1)
    degenerate = ~safe_cells | ~np.isfinite(sims.max(axis=1))
    if degenerate.any():
        d2 = ((flat[degenerate, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        assign[degenerate] = d2.argmin(axis=1)

    assign = assign.reshape(h, w)
    masks = np.zeros((n, h, w), dtype=np.uint8)
    for j in range(n):
        masks[j] = (assign == j).astype(np.uint8)
    return ClusterMaskSet(masks, np.arange(n, dtype=np.int64))


def build_cluster_masks(reference_feature_maps, target_features, n_clusters, seed=0):
    """Fit centroids on references only, then assign the target's cells."""
    centroids = fit_centroids(reference_feature_maps, n_clusters, seed=seed)
    return assign_to_centroids(centroids, target_features)


def resize_mask_nearest(mask, out_h, out_w):
    """Nearest-neighbor mask resize sampling at output-pixel centers."""
    mk = np.asarray(mask)
    if mk.ndim != 2:
        raise ValueError(f"mask must be 2-D, got ndim {mk.ndim}")
    h, w = mk.shape
    if (out_h, out_w) == (h, w):
        return mk.astype(np.uint8, copy=True)
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return (mk[rows][:, cols] != 0).astype(np.uint8)


def filter_background(clusters, corner_rule, image_hw):
    """Drop cluster masks that claim the image corners; upsample the rest.

    A mask counting at least `corner_rule` of the 4 grid corners as active is
    considered background.  If every mask would be dropped, the one with the
    fewest corner hits survives (lowest centroid id on ties) so segmentation
    never returns an empty set from this stage.
    """
    masks = clusters.masks
    n, h, w = masks.shape
    corners = masks[:, [0, 0, h - 1, h - 1], [0, w - 1, 0, w - 1]]
    hits = (corners != 0).sum(axis=1)
    keep = hits < corner_rule
    if not keep.any():
        keep = np.zeros(n, dtype=bool)
        keep[int(np.argmin(hits))] = True
    out_h, out_w = image_hw
    kept = np.stack([resize_mask_nearest(m, out_h, out_w) for m in masks[keep]]) \
        if keep.any() else np.zeros((0, out_h, out_w), dtype=np.uint8)
    return ClusterMaskSet(kept, clusters.centroid_ids[keep])


def assign_labels(candidate_masks, valid_masks):
    """Label each candidate with the index of the valid mask of highest IoU.

    Ties, including the all-zero-IoU case, resolve to the lowest index.
    Returns (M,) int64 positions into `valid_masks`.
    """
    cands = np.asarray(candidate_masks)
    valid = np.asarray(valid_masks)
    if cands.ndim != 3 or valid.ndim != 3:
        raise ValueError("candidate and valid masks must be (N, H, W) stacks")
    if valid.shape[0] == 0:
        raise ValueError("need at least one valid cluster mask to label against")
    if cands.shape[1:] != valid.shape[1:]:
        raise ValueError(
            f"mask dims differ: candidates {cands.shape[1:]} vs valid {valid.shape[1:]}")
    labels = np.empty(cands.shape[0], dtype=np.int64)
    for i, cm in enumerate(cands):
        scores = np.array([iou(cm, vm) for vm in valid])
        labels[i] = int(scores.argmax())
    return labels


def fuse_masks(candidate_masks, labels, n_labels):
    """Union candidates sharing a label into one component per used label.

    Labels with no candidates produce no component.  Returned labels are the
    positions in [0, n_labels) each component came from, in increasing order.
    """
    cands = np.asarray(candidate_masks)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != cands.shape[0]:
        raise ValueError(
            f"labels ({labels.shape[0]}) and candidates ({cands.shape[0]}) disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= n_labels):
        raise ValueError(f"labels out of range [0, {n_labels})")
    out_masks = []
    out_labels = []
    for lab in range(int(n_labels)):
        sel = labels == lab
        if not sel.any():
            continue
        union = (cands[sel].sum(axis=0) > 0).astype(np.uint8)
        out_masks.append(union)
        out_labels.append(lab)
    if out_masks:
        masks = np.stack(out_masks)
    else:
        masks = np.zeros((0,) + cands.shape[1:], dtype=np.uint8)
    return ComponentMaskSet(masks, np.asarray(out_labels, dtype=np.int64))


def _full_frame(image_hw):
    h, w = image_hw
    return ComponentMaskSet(np.ones((1, h, w), dtype=np.uint8),
                            np.array([FULL_FRAME_LABEL], dtype=np.int64))


def segment(candidate_masks, cluster_features, centroids, config, image_hw):
    """Segment one image into components; see module docstring for branches.

    candidate_masks: (M, H, W) uint8, M may be 0.
    cluster_features: (h, w, C) feature map used for cluster assignment.
    centroids: (N, C) from `fit_centroids`; only required when M >= 2.
    """
    cands = np.asarray(candidate_masks)
    h, w = image_hw
    if cands.ndim != 3 or (cands.shape[0] and cands.shape[1:] != (h, w)):
        raise ValueError(f"candidate masks must be (M, {h}, {w}), got {cands.shape}")
    m = cands.shape[0]
    if m == 0:
        return _full_frame(image_hw)
    if m == 1:
        area_ratio = float(cands[0].astype(bool).sum()) / float(h * w)
        if area_ratio > config.area_ratio_threshold or area_ratio == 0.0:
            return _full_frame(image_hw)
        return ComponentMaskSet(cands[:1].astype(np.uint8),
                                np.array([FULL_FRAME_LABEL], dtype=np.int64))

    if centroids is None:
        raise ValueError("multi-candidate segmentation requires fitted centroids")
    clusters = assign_to_centroids(centroids, cluster_features)
    valid = filter_background(clusters, config.background_corner_rule, image_hw)
    labels = assign_labels(cands, valid.masks)
    fused = fuse_masks(cands, labels, valid.masks.shape[0])
    nonempty = np.array([bool(mk.any()) for mk in fused.masks], dtype=bool)
    masks = fused.masks[nonempty]
    comp_labels = valid.centroid_ids[fused.labels[nonempty]]
    if masks.shape[0] == 0:
        return _full_frame(image_hw)
    return ComponentMaskSet(masks, comp_labels)
