"""End-to-end detection: reference bank construction and query scoring.

A reference bank is built from K normal samples of one category: shared
k-means centroids, per-level pooled normal patches (overall and per component
label), aggregated component embeddings, and component geometry.  A query is
segmented with the same centroids, scored patch-wise against the patch pools
(structural) and component-wise against the embedding and geometry pools
(logical), and the two maps are fused into the final anomaly map.

Everything is deterministic for a fixed config and seed; wall-clock timings
are collected separately and never influence outputs.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from . import logical_scorer, structural_scorer
from .component_segmenter import ComponentMaskSet, SegmenterConfig, fit_centroids, segment
from .logical_scorer import AGGREGATION_MODES
from .numerics import bilinear_resize
from .structural_scorer import ScorerConfig
from .tensor_store import ManifestError, read_tensor

NORMALIZATION_MODES = ("minmax", "none")
IMAGE_SCORE_MODES = ("max", "mean")


class ConfigError(ValueError):
    """Invalid or inconsistent detection configuration."""


@dataclass(frozen=True)
class DetectionConfig:
    """Every knob that influences detection output.

    level_tags None means all feature levels of the bank, in manifest order;
    patch_grid None means the grid of the first selected level.
    """

    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    weight_deep: float = 0.5
    weight_geo: float = 0.5
    weight_structural: float = 0.5
    weight_logical: float = 0.5
    level_tags: tuple | None = None
    patch_grid: tuple | None = None
    aggregation_mode: str = "attention"
    map_normalization: str = "minmax"
    smoothing_sigma: float = 4.0
    image_score_mode: str = "max"
    adapter_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("weight_deep", "weight_geo", "weight_structural", "weight_logical"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if self.aggregation_mode not in AGGREGATION_MODES:
            raise ConfigError(
                f"aggregation_mode must be one of {AGGREGATION_MODES}, "
                f"got {self.aggregation_mode!r}")
        if self.map_normalization not in NORMALIZATION_MODES:
            raise ConfigError(
                f"map_normalization must be one of {NORMALIZATION_MODES}, "
                f"got {self.map_normalization!r}")
        if not (np.isfinite(self.smoothing_sigma) and self.smoothing_sigma >= 0):
            raise ConfigError(
                f"smoothing_sigma must be finite and >= 0, got {self.smoothing_sigma}")
        if self.image_score_mode not in IMAGE_SCORE_MODES:
            raise ConfigError(
                f"image_score_mode must be one of {IMAGE_SCORE_MODES}, "
                f"got {self.image_score_mode!r}")
        if self.level_tags is not None:
            object.__setattr__(self, "level_tags", tuple(self.level_tags))
            if len(self.level_tags) == 0:
                raise ConfigError("level_tags must be None or non-empty")
        if self.patch_grid is not None:
            pg = tuple(int(x) for x in self.patch_grid)
            if len(pg) != 2 or min(pg) < 1:
                raise ConfigError(f"patch_grid must be two dims >= 1, got {self.patch_grid}")
            object.__setattr__(self, "patch_grid", pg)
        if not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")

    def to_dict(self):
        """Fully materialized config (defaults included), JSON-serializable."""
        return {
            "segmenter": {
                "n_clusters": self.segmenter.n_clusters,
                "area_ratio_threshold": self.segmenter.area_ratio_threshold,
                "background_corner_rule": self.segmenter.background_corner_rule,
            },
            "scorer": {
                "weight_pm": self.scorer.weight_pm,
                "weight_aware": self.scorer.weight_aware,
                "weight_vl": self.scorer.weight_vl,
                "metric": self.scorer.metric,
                "temperature": self.scorer.temperature,
                "empty_component_fallback": self.scorer.empty_component_fallback,
            },
            "weight_deep": self.weight_deep,
            "weight_geo": self.weight_geo,
            "weight_structural": self.weight_structural,
            "weight_logical": self.weight_logical,
            "level_tags": list(self.level_tags) if self.level_tags is not None else None,
            "patch_grid": list(self.patch_grid) if self.patch_grid is not None else None,
            "aggregation_mode": self.aggregation_mode,
            "map_normalization": self.map_normalization,
            "smoothing_sigma": self.smoothing_sigma,
            "image_score_mode": self.image_score_mode,
            "adapter_path": self.adapter_path,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d, where="detection config"):
        if not isinstance(d, dict):
            raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
        top = {f.name for f in fields(DetectionConfig)}
        unknown = sorted(set(d) - top)
        if unknown:
            raise ConfigError(f"{where}: unknown field(s) {unknown}")
        kwargs = dict(d)
        try:
            seg = kwargs.pop("segmenter", {})
            if not isinstance(seg, dict):
                raise ConfigError(f"{where}: segmenter must be an object")
            unknown = sorted(set(seg) - {f.name for f in fields(SegmenterConfig)})
            if unknown:
                raise ConfigError(f"{where}: segmenter: unknown field(s) {unknown}")
            sc = kwargs.pop("scorer", {})
            if not isinstance(sc, dict):
                raise ConfigError(f"{where}: scorer must be an object")
            unknown = sorted(set(sc) - {f.name for f in fields(ScorerConfig)})
            if unknown:
                raise ConfigError(f"{where}: scorer: unknown field(s) {unknown}")
            return DetectionConfig(segmenter=SegmenterConfig(**seg),
                                   scorer=ScorerConfig(**sc), **kwargs)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"{where}: {e}") from e

    def with_overrides(self, overrides, where="config overrides"):
        """New config with a (possibly nested) dict of overrides applied."""
        if not overrides:
            return self
        merged = self.to_dict()
        if not isinstance(overrides, dict):
            raise ConfigError(f"{where}: expected an object")
        for key, val in overrides.items():
            if key in ("segmenter", "scorer"):
                if not isinstance(val, dict):
                    raise ConfigError(f"{where}: {key} must be an object")
                merged[key].update(val)
            else:
                merged[key] = val
        return DetectionConfig.from_dict(merged, where=where)

    def fingerprint(self):
        """sha256 over the canonical JSON form of the materialized config."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Feature adapter (few-abnormal-shot refinement)


@dataclass(frozen=True)
class AdapterWeights:
    """Two-layer feature adapter: y = silu(relu(x @ w1 + b1) @ w2 + b2)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        w1, b1, w2, b2 = (np.asarray(a, dtype=np.float64) for a in
                          (self.w1, self.b1, self.w2, self.b2))
        if w1.ndim != 2 or w2.ndim != 2 or b1.ndim != 1 or b2.ndim != 1:
            raise ConfigError("adapter weights must be 2-D (w1, w2) and 1-D (b1, b2)")
        if w1.shape[1] != b1.shape[0]:
            raise ConfigError(
                f"adapter dim mismatch: w1 columns {w1.shape[1]} != b1 length {b1.shape[0]}")
        if b1.shape[0] != w2.shape[0]:
            raise ConfigError(
                f"adapter dim mismatch: hidden {b1.shape[0]} != w2 rows {w2.shape[0]}")
        if w2.shape[1] != b2.shape[0]:
            raise ConfigError(
                f"adapter dim mismatch: w2 columns {w2.shape[1]} != b2 length {b2.shape[0]}")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b2", b2)

    @property
    def in_channels(self):
        return self.w1.shape[0]

    @property
    def out_channels(self):
        return self.w2.shape[1]


def load_adapter(path):
    """Load adapter weights from a directory with an index.json naming the
    four tensor files (keys w1, b1, w2, b2)."""
    root = Path(path)
    index_path = root / "index.json"
    try:
        index = json.loads(index_path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read adapter index {index_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{index_path}: invalid JSON: {e}") from e
    if not isinstance(index, dict):
        raise ConfigError(f"{index_path}: expected an object")
    arrays = {}
    for key in ("w1", "b1", "w2", "b2"):
        if key not in index or not isinstance(index[key], str):
            raise ConfigError(f"{index_path}: missing or non-string entry '{key}'")
        p = root / index[key]
        try:
            arrays[key] = read_tensor(p)
        except ValueError as e:
            raise ConfigError(f"adapter tensor '{key}': {e}") from e
    return AdapterWeights(**arrays)


def apply_adapter(features, weights):
    """Run features of shape (..., C) through the adapter; returns (..., C')."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != weights.in_channels:
        raise ConfigError(
            f"adapter expects {weights.in_channels} channels, got {x.shape[-1]}")
    flat = x.reshape(-1, x.shape[-1])
    hidden = np.maximum(flat @ weights.w1 + weights.b1, 0.0)
    pre = hidden @ weights.w2 + weights.b2
    out = pre * expit(pre)
    return out.reshape(x.shape[:-1] + (weights.out_channels,))


# ---------------------------------------------------------------------------
# Reference bank


@dataclass
class ReferenceBank:
    """Pools and shared segmentation state extracted from normal references."""

    category: str
    image_hw: tuple
    level_tags: tuple
    level_dims: dict                  # tag -> declared (gh, gw, C) before any adapter
    patch_hw: tuple
    centroids: np.ndarray | None
    patch_pool: dict                  # tag -> (R, C) float64
    patch_pool_by_label: dict         # tag -> {label: (r, C) float64}
    embedding_pool: np.ndarray        # (sum N_k, C_deep) float64
    geometry_pool: np.ndarray         # (sum N_k, 6) float64
    text_features: np.ndarray | None  # (2, C) from the first reference carrying one
    n_references: int
    reference_components: list        # ComponentMaskSet per reference


def _maybe_adapt(arr, adapter):
    if adapter is not None and arr.shape[-1] == adapter.in_channels:
        return apply_adapter(arr, adapter)
    return np.asarray(arr, dtype=np.float64)


def _check_schema(sample, image_hw, level_dims, tags, where):
    if sample.image_hw != image_hw:
        raise ManifestError(
            f"{where}: image dims {sample.image_hw} != bank {image_hw}")
    available = dict((t, a.shape) for t, a in sample.feature_levels)
    for tag in tags:
        if tag not in available:
            raise ManifestError(f"{where}: missing feature level {tag!r}")
        if available[tag] != level_dims[tag]:
            raise ManifestError(
                f"{where}: feature level {tag!r} dims {available[tag]} "
                f"!= bank {level_dims[tag]}")


def build_reference_bank(samples, config, category="category"):
    """Build the bank from normal samples, in the given (stable) order."""
    if not samples:
        raise ManifestError("reference bank needs at least one sample")
    adapter = load_adapter(config.adapter_path) if config.adapter_path else None

    first = samples[0]
    image_hw = first.image_hw
    tags = config.level_tags if config.level_tags is not None else first.level_tags
    raw_dims = {t: a.shape for t, a in first.feature_levels}
    for tag in tags:
        if tag not in raw_dims:
            raise ManifestError(
                f"bank {category}: configured level {tag!r} not in samples "
                f"(have {list(raw_dims)})")
    for s in samples[1:]:
        _check_schema(s, image_hw, raw_dims, tags, f"bank {category}: sample {s.sample_id}")

    patch_hw = config.patch_grid or raw_dims[tags[0]][:2]

    if adapter is not None:
        adaptable = [t for t in tags if raw_dims[t][2] == adapter.in_channels]
        if not adaptable and first.cluster_features.shape[-1] != adapter.in_channels:
            raise ConfigError(
                f"adapter at {config.adapter_path} matches no feature map: it expects "
                f"{adapter.in_channels} channels, levels have "
                f"{[raw_dims[t][2] for t in tags]} and cluster features "
                f"{first.cluster_features.shape[-1]}")

    cluster_maps = [_maybe_adapt(s.cluster_features, adapter) for s in samples]
    total_cells = sum(m.shape[0] * m.shape[1] for m in cluster_maps)
    centroids = None
    if total_cells >= config.segmenter.n_clusters:
        centroids = fit_centroids(cluster_maps, config.segmenter.n_clusters,
                                  seed=config.seed)

    patch_pool = {t: [] for t in tags}
    pool_by_label = {t: {} for t in tags}
    embeddings = []
    geometry = []
    components_per_ref = []
    text = None
    for s, cmap in zip(samples, cluster_maps):
        comps = segment(s.candidate_masks, cmap, centroids, config.segmenter, image_hw)
        components_per_ref.append(comps)
        deep = logical_scorer.component_features(cmap, comps)
        embeddings.append(logical_scorer.aggregate(deep, mode=config.aggregation_mode))
        geometry.append(logical_scorer.geometric_feature_matrix(comps, s.image))
        partition = structural_scorer.partition_patches(patch_hw, comps)
        for tag in tags:
            grid = structural_scorer.to_patch_grid(
                _maybe_adapt(s.level(tag), adapter), *patch_hw)
            flat = grid.reshape(-1, grid.shape[2])
            patch_pool[tag].append(flat)
            for pos, label in enumerate(partition.labels):
                idx = partition.patches_of(pos)
                if idx.size:
                    pool_by_label[tag].setdefault(int(label), []).append(flat[idx])
        if text is None and s.text_features is not None:
            text = s.text_features

    return ReferenceBank(
        category=category,
        image_hw=image_hw,
        level_tags=tuple(tags),
        level_dims=dict(raw_dims),
        patch_hw=tuple(patch_hw),
        centroids=centroids,
        patch_pool={t: np.concatenate(v) for t, v in patch_pool.items()},
        patch_pool_by_label={
            t: {lab: np.concatenate(v) for lab, v in d.items()}
            for t, d in pool_by_label.items()},
        embedding_pool=np.concatenate(embeddings),
        geometry_pool=np.concatenate(geometry),
        text_features=text,
        n_references=len(samples),
        reference_components=components_per_ref,
    )


# ---------------------------------------------------------------------------
# Detection


@dataclass
class DetectionResult:
    """Scores and diagnostic maps for one query."""

    sample_id: str
    final_map: np.ndarray           # (H, W) float64
    image_score: float
    structural_map: np.ndarray      # (H, W) post smoothing/normalization
    logical_map: np.ndarray         # (H, W) post smoothing/normalization
    pm_map: np.ndarray              # (h2, w2) averaged over levels
    aware_map: np.ndarray           # (h2, w2) averaged over levels
    vl_map: np.ndarray              # (h2, w2) averaged over levels
    structural_patch_map: np.ndarray  # (h2, w2) weighted combination
    components: ComponentMaskSet
    deep_scores: np.ndarray         # (N,) per component
    geo_scores: np.ndarray          # (N,) per component
    component_scores: np.ndarray    # (N,) weighted combination
    timings: dict


def minmax_normalize(score_map):
    """Scale a map to [0, 1]; a constant map becomes all zeros."""
    m = np.asarray(score_map, dtype=np.float64)
    lo = float(m.min())
    hi = float(m.max())
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def _postprocess(score_map, config):
    out = np.asarray(score_map, dtype=np.float64)
    if config.smoothing_sigma > 0:
        out = gaussian_filter(out, sigma=config.smoothing_sigma)
    if config.map_normalization == "minmax":
        out = minmax_normalize(out)
    return out


def fuse_maps(structural_map, logical_map, weight_structural, weight_logical):
    """Weighted pixel-wise sum of the two post-processed maps."""
    s = np.asarray(structural_map, dtype=np.float64)
    l = np.asarray(logical_map, dtype=np.float64)
    if s.shape != l.shape:
        raise ValueError(f"map dims differ: {s.shape} vs {l.shape}")
    return weight_structural * s + weight_logical * l


def image_score(score_map, mode="max"):
    """Scalar image-level score from the final map."""
    m = np.asarray(score_map, dtype=np.float64)
    if mode == "max":
        return float(m.max())
    if mode == "mean":
        return float(m.mean())
    raise ValueError(f"mode must be one of {IMAGE_SCORE_MODES}, got {mode!r}")


def detect(query, bank, config):
    """Score one query sample against a reference bank."""
    adapter = load_adapter(config.adapter_path) if config.adapter_path else None
    _check_schema(query, bank.image_hw, bank.level_dims, bank.level_tags,
                  f"query {query.sample_id}")

    timings = {}
    t0 = time.perf_counter()
    cmap = _maybe_adapt(query.cluster_features, adapter)
    comps = segment(query.candidate_masks, cmap, bank.centroids,
                    config.segmenter, bank.image_hw)
    timings["segment"] = time.perf_counter() - t0

    want_vl = config.scorer.weight_vl > 0
    text = query.text_features if query.text_features is not None else bank.text_features
    if want_vl and text is None:
        raise ManifestError(
            f"query {query.sample_id}: text features required "
            "(scorer.weight_vl > 0) but neither query nor bank carries them")

    t0 = time.perf_counter()
    h2, w2 = bank.patch_hw
    partition = structural_scorer.partition_patches((h2, w2), comps)
    pm_levels, aware_levels, vl_levels, stru_levels = [], [], [], []
    for tag in bank.level_tags:
        grid = structural_scorer.to_patch_grid(_maybe_adapt(query.level(tag), adapter),
                                               h2, w2)
        if grid.shape[2] != bank.patch_pool[tag].shape[1]:
            raise ManifestError(
                f"query {query.sample_id}: level {tag!r} has {grid.shape[2]} channels, "
                f"bank pool has {bank.patch_pool[tag].shape[1]}")
        pm = structural_scorer.score_pm(grid, bank.patch_pool[tag],
                                        metric=config.scorer.metric)
        aware = structural_scorer.score_aware(
            grid, partition, bank.patch_pool_by_label[tag], bank.patch_pool[tag],
            metric=config.scorer.metric,
            fallback=config.scorer.empty_component_fallback)
        if want_vl:
            vl = structural_scorer.score_vl(grid, text[0], text[1],
                                            temperature=config.scorer.temperature)
        else:
            vl = np.zeros((h2, w2))
        pm_levels.append(pm)
        aware_levels.append(aware)
        vl_levels.append(vl)
        stru_levels.append(structural_scorer.score_structural(pm, aware, vl, config.scorer))
    pm_map = np.mean(pm_levels, axis=0)
    aware_map = np.mean(aware_levels, axis=0)
    vl_map = np.mean(vl_levels, axis=0)
    stru_patch = np.mean(stru_levels, axis=0)
    timings["structural"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    deep = logical_scorer.component_features(cmap, comps)
    emb = logical_scorer.aggregate(deep, mode=config.aggregation_mode)
    deep_scores = logical_scorer.score_deep(emb, bank.embedding_pool,
                                            metric=config.scorer.metric)
    geo = logical_scorer.geometric_feature_matrix(comps, query.image)
    geo_scores = logical_scorer.score_geo(geo, bank.geometry_pool,
                                          metric=config.scorer.metric)
    comp_scores = logical_scorer.score_logical(deep_scores, geo_scores,
                                               config.weight_deep, config.weight_geo)
    logical_raw = logical_scorer.rasterize(comps, comp_scores)
    timings["logical"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    stru_raw = bilinear_resize(stru_patch, *bank.image_hw)
    stru_img = _postprocess(stru_raw, config)
    logic_img = _postprocess(logical_raw, config)
    fused = fuse_maps(stru_img, logic_img, config.weight_structural, config.weight_logical)
    if config.map_normalization == "minmax":
        final = minmax_normalize(fused)
    else:
        final = fused
    score = image_score(final, config.image_score_mode)
    timings["fusion"] = time.perf_counter() - t0

    return DetectionResult(
        sample_id=query.sample_id,
        final_map=final,
        image_score=score,
        structural_map=stru_img,
        logical_map=logic_img,
        pm_map=pm_map,
        aware_map=aware_map,
        vl_map=vl_map,
        structural_patch_map=stru_patch,
        components=comps,
        deep_scores=deep_scores,
        geo_scores=geo_scores,
        component_scores=comp_scores,
        timings=timings,
    )
