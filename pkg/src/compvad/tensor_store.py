"""Binary tensor files and dataset manifests.

On-disk tensor layout (little-endian throughout):

    bytes 0..7    magic "UVADTNSR"
    bytes 8..11   format version, u32 (currently 1)
    bytes 12..15  dtype code, u32 (0 = float32, 1 = uint8)
    bytes 16..19  ndim, u32, in [1, 4]
    next ndim*8   dims, u64 each, all >= 1
    remainder     payload, row-major (C order)

Sample manifests are JSON files describing one image plus its precomputed
feature maps and candidate masks; a reference bank manifest lists the normal
samples of one category.  All relative paths inside a manifest are resolved
against the directory containing the manifest file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"UVADTNSR"
FORMAT_VERSION = 1

_DTYPE_BY_CODE = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODE_BY_KIND = {("f", 4): 0, ("u", 1): 1}

_HEADER_FIXED = 8 + 4 + 4 + 4  # magic + version + dtype + ndim

VALID_LABELS = ("normal", "anomalous")


class TensorFormatError(ValueError):
    """Malformed tensor file: bad magic, version, dtype, dims, or payload size."""


class ManifestError(ValueError):
    """Malformed manifest: missing, mistyped, or inconsistent fields."""


def write_tensor(tensor, path):
    """Serialize a float32 or uint8 array of 1..4 dims to `path`.

    The array is written in C order; dims must all be >= 1.
    """
    arr = np.asarray(tensor)
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _CODE_BY_KIND:
        raise TensorFormatError(
            f"unsupported dtype {arr.dtype}; expected float32 or uint8")
    if not 1 <= arr.ndim <= 4:
        raise TensorFormatError(f"ndim {arr.ndim} out of range [1, 4]")
    if any(d < 1 for d in arr.shape):
        raise TensorFormatError(f"dims must all be >= 1, got {arr.shape}")
    code = _CODE_BY_KIND[key]
    header = bytearray()
    header += MAGIC
    header += np.uint32(FORMAT_VERSION).tobytes()
    header += np.uint32(code).tobytes()
    header += np.uint32(arr.ndim).tobytes()
    header += np.asarray(arr.shape, dtype="<u8").tobytes()
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_BY_CODE[code]).tobytes()
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(bytes(header))
            f.write(payload)
    except OSError as e:
        raise TensorFormatError(f"cannot write tensor file {path}: {e}") from e


def read_tensor(path):
    """Read a tensor file written by `write_tensor`; round-trips bit-exactly."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise TensorFormatError(f"cannot read tensor file {path}: {e}") from e
    if len(raw) < _HEADER_FIXED:
        raise TensorFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:8] != MAGIC:
        raise TensorFormatError(f"{path}: wrong magic {raw[:8]!r}")
    version = int(np.frombuffer(raw, "<u4", count=1, offset=8)[0])
    if version != FORMAT_VERSION:
        raise TensorFormatError(
            f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    code = int(np.frombuffer(raw, "<u4", count=1, offset=12)[0])
    if code not in _DTYPE_BY_CODE:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    ndim = int(np.frombuffer(raw, "<u4", count=1, offset=16)[0])
    if not 1 <= ndim <= 4:
        raise TensorFormatError(f"{path}: ndim {ndim} out of range [1, 4]")
    if len(raw) < _HEADER_FIXED + 8 * ndim:
        raise TensorFormatError(f"{path}: truncated dims block")
    dims = np.frombuffer(raw, "<u8", count=ndim, offset=_HEADER_FIXED)
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"{path}: dims must all be >= 1, got {tuple(dims)}")
    dtype = _DTYPE_BY_CODE[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    offset = _HEADER_FIXED + 8 * ndim
    if len(raw) - offset != expected:
        raise TensorFormatError(
            f"{path}: payload size mismatch (declared {expected} bytes, "
            f"found {len(raw) - offset})")
    flat = np.frombuffer(raw, dtype, offset=offset)
    return flat.reshape(tuple(int(d) for d in dims)).copy()


# ---------------------------------------------------------------------------
# Manifests


def _require(d, key, types, where, allow_none=False):
    if key not in d:
        raise ManifestError(f"{where}: missing required field '{key}'")
    v = d[key]
    if v is None:
        if allow_none:
            return None
        raise ManifestError(f"{where}: field '{key}' must not be null")
    if not isinstance(v, types):
        tn = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
        raise ManifestError(
            f"{where}: field '{key}' has type {type(v).__name__}, expected {tn}")
    return v


def _reject_unknown(d, known, where):
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ManifestError(f"{where}: unknown field(s) {unknown}")


@dataclass(frozen=True)
class FeatureLevelSpec:
    """One precomputed feature map: backbone tag plus grid geometry."""

    tag: str
    path: str
    grid_h: int
    grid_w: int
    channels: int

    @staticmethod
    def from_dict(d, where):
        known = ("tag", "path", "grid_h", "grid_w", "channels")
        _reject_unknown(d, known, where)
        tag = _require(d, "tag", str, where)
        path = _require(d, "path", str, where)
        gh = _require(d, "grid_h", int, where)
        gw = _require(d, "grid_w", int, where)
        ch = _require(d, "channels", int, where)
        if min(gh, gw, ch) < 1:
            raise ManifestError(f"{where}: grid_h/grid_w/channels must be >= 1")
        return FeatureLevelSpec(tag, path, gh, gw, ch)


@dataclass(frozen=True)
class SampleManifest:
    """Parsed sample manifest; paths still relative to `root`."""

    sample_id: str
    image_height: int
    image_width: int
    image_path: str
    feature_levels: tuple
    cluster_feature_path: str
    candidate_masks_path: str | None
    text_features_path: str | None
    label: str | None
    gt_mask_path: str | None
    root: Path

    KNOWN = (
        "sample_id", "image_height", "image_width", "image_path",
        "feature_levels", "cluster_feature_path", "candidate_masks_path",
        "text_features_path", "label", "gt_mask_path",
    )

    @staticmethod
    def from_dict(d, root, where="sample manifest"):
        if not isinstance(d, dict):
            raise ManifestError(f"{where}: expected a JSON object, got {type(d).__name__}")
        _reject_unknown(d, SampleManifest.KNOWN, where)
        sid = _require(d, "sample_id", str, where)
        h = _require(d, "image_height", int, where)
        w = _require(d, "image_width", int, where)
        if h < 1 or w < 1:
            raise ManifestError(f"{where}: image_height/image_width must be >= 1")
        img = _require(d, "image_path", str, where)
        levels_raw = _require(d, "feature_levels", list, where)
        if not levels_raw:
            raise ManifestError(f"{where}: feature_levels must be non-empty")
        levels = []
        for i, lv in enumerate(levels_raw):
            if not isinstance(lv, dict):
                raise ManifestError(f"{where}: feature_levels[{i}] must be an object")
            levels.append(FeatureLevelSpec.from_dict(lv, f"{where}: feature_levels[{i}]"))
        tags = [lv.tag for lv in levels]
        if len(set(tags)) != len(tags):
            raise ManifestError(f"{where}: duplicate feature level tags {tags}")
        cf = _require(d, "cluster_feature_path", str, where)
        cm = d.get("candidate_masks_path")
        if cm is not None and not isinstance(cm, str):
            raise ManifestError(f"{where}: candidate_masks_path must be a string or null")
        tf = d.get("text_features_path")
        if tf is not None and not isinstance(tf, str):
            raise ManifestError(f"{where}: text_features_path must be a string or null")
        label = d.get("label")
        if label is not None:
            if not isinstance(label, str) or label not in VALID_LABELS:
                raise ManifestError(
                    f"{where}: label must be one of {list(VALID_LABELS)} or null, got {label!r}")
        gt = d.get("gt_mask_path")
        if gt is not None and not isinstance(gt, str):
            raise ManifestError(f"{where}: gt_mask_path must be a string or null")
        return SampleManifest(sid, h, w, img, tuple(levels), cf, cm, tf, label, gt, Path(root))

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.root / p


@dataclass
class Sample:
    """One fully loaded sample: image, feature maps, masks, optional labels.

    Arrays are marked read-only so a Sample can be shared across threads.
    """

    sample_id: str
    image: np.ndarray                      # (H, W, 3) uint8
    feature_levels: list                   # [(tag, (gh, gw, C) float32), ...]
    cluster_features: np.ndarray           # (h, w, c) float32
    candidate_masks: np.ndarray            # (M, H, W) uint8, M may be 0
    text_features: np.ndarray | None       # (2, C) float32: row 0 normal, row 1 anomalous
    label: str | None
    gt_mask: np.ndarray | None             # (H, W) uint8
    gt_mask_path: str | None = None

    @property
    def image_hw(self):
        return self.image.shape[0], self.image.shape[1]

    def level(self, tag):
        for t, arr in self.feature_levels:
            if t == tag:
                return arr
        raise KeyError(f"sample {self.sample_id}: no feature level tagged {tag!r}")

    @property
    def level_tags(self):
        return tuple(t for t, _ in self.feature_levels)


def _freeze(arr):
    arr.flags.writeable = False
    return arr


def _load_checked(path, dtype_kind, ndim, where):
    try:
        arr = read_tensor(path)
    except TensorFormatError as e:
        raise ManifestError(f"{where}: {e}") from e
    if arr.dtype.kind != dtype_kind:
        raise ManifestError(
            f"{where}: {path} has dtype {arr.dtype}, expected kind '{dtype_kind}'")
    if arr.ndim != ndim:
        raise ManifestError(f"{where}: {path} has ndim {arr.ndim}, expected {ndim}")
    return arr


def load_sample(manifest, root=None):
    """Load every tensor referenced by a manifest and cross-check dimensions.

    `manifest` may be a path to a JSON file, a parsed dict (then `root` gives
    the directory for relative paths, default cwd), or a SampleManifest.
    """
    if isinstance(manifest, (str, Path)):
        mpath = Path(manifest)
        try:
            d = json.loads(mpath.read_text())
        except OSError as e:
            raise ManifestError(f"cannot read manifest {mpath}: {e}") from e
        except json.JSONDecodeError as e:
            raise ManifestError(f"{mpath}: invalid JSON: {e}") from e
        manifest = SampleManifest.from_dict(d, mpath.parent, where=str(mpath))
    elif isinstance(manifest, dict):
        manifest = SampleManifest.from_dict(manifest, root or Path.cwd())
    m = manifest
    where = f"sample {m.sample_id}"

    image = _load_checked(m.resolve(m.image_path), "u", 3, f"{where}: image")
    if image.shape != (m.image_height, m.image_width, 3):
        raise ManifestError(
            f"{where}: image dims {image.shape} != declared "
            f"({m.image_height}, {m.image_width}, 3)")

    levels = []
    for lv in m.feature_levels:
        arr = _load_checked(m.resolve(lv.path), "f", 3,
                            f"{where}: feature level {lv.tag!r}")
        if arr.shape != (lv.grid_h, lv.grid_w, lv.channels):
            raise ManifestError(
                f"{where}: feature level {lv.tag!r} dims {arr.shape} != declared "
                f"({lv.grid_h}, {lv.grid_w}, {lv.channels})")
        levels.append((lv.tag, _freeze(arr)))

    cluster = _load_checked(m.resolve(m.cluster_feature_path), "f", 3,
                            f"{where}: cluster features")

    if m.candidate_masks_path is None:
        masks = np.zeros((0, m.image_height, m.image_width), dtype=np.uint8)
    else:
        masks = _load_checked(m.resolve(m.candidate_masks_path), "u", 3,
                              f"{where}: candidate masks")
        if masks.shape[1:] != (m.image_height, m.image_width):
            raise ManifestError(
                f"{where}: candidate mask dims {masks.shape[1:]} != image "
                f"({m.image_height}, {m.image_width})")
        if masks.size and masks.max() > 1:
            raise ManifestError(f"{where}: candidate masks must be binary (0/1)")

    text = None
    if m.text_features_path is not None:
        text = _load_checked(m.resolve(m.text_features_path), "f", 2,
                             f"{where}: text features")
        if text.shape[0] != 2:
            raise ManifestError(
                f"{where}: text features must have dims (2, C), got {text.shape}")
        norms = np.linalg.norm(text.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ManifestError(
                f"{where}: text feature rows must be unit-normalized "
                f"(norms {norms.tolist()})")
        text = _freeze(text)

    gt = None
    gt_path = None
    if m.gt_mask_path is not None:
        gt_path = str(m.resolve(m.gt_mask_path))
        gt = _load_checked(gt_path, "u", 2, f"{where}: gt mask")
        if gt.shape != (m.image_height, m.image_width):
            raise ManifestError(
                f"{where}: gt mask dims {gt.shape} != image "
                f"({m.image_height}, {m.image_width})")
        if gt.max(initial=0) > 1:
            raise ManifestError(f"{where}: gt mask must be binary (0/1)")
        gt = _freeze(gt)

    return Sample(m.sample_id, _freeze(image), levels, _freeze(cluster),
                  _freeze(masks), text, m.label, gt, gt_path)


@dataclass(frozen=True)
class ReferenceBankManifest:
    """Category name plus the normal samples that form the reference bank."""

    category: str
    samples: tuple            # of SampleManifest
    config_overrides: dict = field(default_factory=dict)

    @staticmethod
    def from_path(path):
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except OSError as e:
            raise ManifestError(f"cannot read bank manifest {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}: invalid JSON: {e}") from e
        return ReferenceBankManifest.from_dict(d, path.parent, where=str(path))

    @staticmethod
    def from_dict(d, root, where="bank manifest"):
        if not isinstance(d, dict):
            raise ManifestError(f"{where}: expected a JSON object")
        _reject_unknown(d, ("category", "samples", "config_overrides"), where)
        category = _require(d, "category", str, where)
        samples_raw = _require(d, "samples", list, where)
        if not samples_raw:
            raise ManifestError(f"{where}: samples must be non-empty")
        root = Path(root)
        samples = []
        for i, s in enumerate(samples_raw):
            if isinstance(s, str):
                p = root / s if not Path(s).is_absolute() else Path(s)
                try:
                    sd = json.loads(p.read_text())
                except OSError as e:
                    raise ManifestError(f"{where}: samples[{i}]: cannot read {p}: {e}") from e
                except json.JSONDecodeError as e:
                    raise ManifestError(f"{where}: samples[{i}]: invalid JSON in {p}: {e}") from e
                samples.append(SampleManifest.from_dict(sd, p.parent, where=f"{where}: samples[{i}] ({p})"))
            elif isinstance(s, dict):
                samples.append(SampleManifest.from_dict(s, root, where=f"{where}: samples[{i}]"))
            else:
                raise ManifestError(f"{where}: samples[{i}] must be an object or a path string")
        overrides = d.get("config_overrides") or {}
        if not isinstance(overrides, dict):
            raise ManifestError(f"{where}: config_overrides must be an object or null")
        return ReferenceBankManifest(category, tuple(samples), overrides)
