"""Synthetic category generator for tests, benchmarks, and demos.

A generated category is a scene of axis-aligned rectangular parts on a flat
background.  Feature vectors are built from an orthonormal basis so the
geometry of the scores is known in advance:

  * channel 0..3 carry the identity of background / part A / part B / part C;
  * channel 4 is reserved for injected structural anomalies and doubles as
    the anomalous text embedding;
  * channel 5 is the normal text embedding;
  * channels 6..8 carry per-sample noise;
  * channel 9 is a direction shared by all parts, giving components positive
    pairwise cosine similarity so graph aggregation actually mixes them.

Query kinds: 'normal', 'structural' (one feature cell replaced by the
reserved anomaly direction, ground truth marks the corresponding pixel
block), 'logical' (part C removed entirely: its features become background,
its candidate mask disappears, ground truth marks its rectangle).

Run as a module to materialize a category on disk:

    python -m compvad.synthetic out_dir --refs 2 --normal 4 --structural 2
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor_store import write_tensor

_BG, _A, _B, _C = "background", "part_a", "part_b", "part_c"


@dataclass(frozen=True)
class CategorySpec:
    """Geometry and sampling knobs for one generated category."""

    image_hw: tuple = (64, 64)
    grid_hw: tuple = (8, 8)
    channels: int = 12
    level_tags: tuple = ("lv0", "lv1")
    n_refs: int = 2
    noise: float = 1e-3
    seed: int = 7
    split_first_region: bool = True

    def __post_init__(self):
        if self.channels < 10:
            raise ValueError("need at least 10 channels for the reserved basis")
        if self.n_refs < 1:
            raise ValueError("need at least one reference")


@dataclass
class CategoryFixture:
    """Paths and ground-truth bookkeeping for a generated category."""

    root: Path
    bank_manifest: Path
    query_manifests: list
    config_path: Path
    checksums: dict             # sample_id -> {tensor name -> sha256 of payload}
    regions: dict               # name -> (r0, r1, c0, c1) pixel rect, end-exclusive
    anomaly_cells: dict         # structural query id -> (cell_r, cell_c)
    query_labels: dict          # query id -> 'normal' | 'anomalous'
    spec: CategorySpec = field(default=None)


def _regions(spec):
    """Part rectangles in pixels, aligned to feature-cell blocks, corner-free."""
    h, w = spec.image_hw
    gh, gw = spec.grid_hw
    bh, bw = h // gh, w // gw

    def rect(r0, r1, c0, c1):
        return (r0 * bh, r1 * bh, c0 * bw, c1 * bw)

    return {
        _A: rect(1, 3, 1, 3),
        _B: rect(1, 3, gw - 3, gw - 1),
        _C: rect(gh - 3, gh - 1, 3, 5),
    }


def _bases(spec):
    c = spec.channels
    shared = np.zeros(c)
    shared[9] = 1.0

    def mixed(i):
        v = np.zeros(c)
        v[i] = 1.0
        return (v + shared) / np.sqrt(2.0)

    anomaly = np.zeros(c)
    anomaly[4] = 1.0
    text_normal = np.zeros(c)
    text_normal[5] = 1.0
    return {
        _BG: mixed(0), _A: mixed(1), _B: mixed(2), _C: mixed(3),
        "anomaly": anomaly, "text_normal": text_normal, "text_anomalous": anomaly,
    }


def _cell_region(spec, regions, cell_r, cell_c):
    h, w = spec.image_hw
    gh, gw = spec.grid_hw
    pr = int((cell_r + 0.5) * h / gh)
    pc = int((cell_c + 0.5) * w / gw)
    for name, (r0, r1, c0, c1) in regions.items():
        if r0 <= pr < r1 and c0 <= pc < c1:
            return name
    return _BG


def _feature_map(spec, regions, bases, rng, drop=(), anomaly_cell=None):
    gh, gw = spec.grid_hw
    feat = np.zeros((gh, gw, spec.channels))
    for r in range(gh):
        for c in range(gw):
            name = _cell_region(spec, regions, r, c)
            if name in drop:
                name = _BG
            feat[r, c] = bases[name]
    feat[:, :, 6:9] += spec.noise * rng.standard_normal((gh, gw, 3))
    if anomaly_cell is not None:
        feat[anomaly_cell[0], anomaly_cell[1]] = bases["anomaly"]
    return feat.astype(np.float32)


def _image(spec, regions, drop=()):
    colors = {_BG: (96, 96, 96), _A: (200, 60, 60), _B: (60, 200, 60),
              _C: (60, 60, 200)}
    h, w = spec.image_hw
    img = np.full((h, w, 3), colors[_BG], dtype=np.uint8)
    for name, (r0, r1, c0, c1) in regions.items():
        if name in drop:
            continue
        img[r0:r1, c0:c1] = colors[name]
    return img


def _candidates(spec, regions, drop=()):
    h, w = spec.image_hw
    masks = []
    for name in (_A, _B, _C):
        if name in drop:
            continue
        r0, r1, c0, c1 = regions[name]
        if name == _A and spec.split_first_region:
            mid = (c0 + c1) // 2
            for cc0, cc1 in ((c0, mid), (mid, c1)):
                m = np.zeros((h, w), dtype=np.uint8)
                m[r0:r1, cc0:cc1] = 1
                masks.append(m)
        else:
            m = np.zeros((h, w), dtype=np.uint8)
            m[r0:r1, c0:c1] = 1
            masks.append(m)
    if masks:
        return np.stack(masks)
    return None


def _sha(arr):
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def _write_sample(root, spec, sample_id, image, level_maps, cluster_map,
                  candidates, text_rel, label, gt_mask, checksums):
    h, w = spec.image_hw
    sums = {}
    sdir = root / sample_id
    sdir.mkdir(parents=True, exist_ok=True)
    write_tensor(image, sdir / "image.tnsr")
    sums["image"] = _sha(image)
    levels = []
    for tag, arr in level_maps.items():
        write_tensor(arr, sdir / f"{tag}.tnsr")
        sums[tag] = _sha(arr)
        gh, gw, ch = arr.shape
        levels.append({"tag": tag, "path": f"{sample_id}/{tag}.tnsr",
                       "grid_h": gh, "grid_w": gw, "channels": ch})
    write_tensor(cluster_map, sdir / "cluster.tnsr")
    sums["cluster"] = _sha(cluster_map)
    cand_rel = None
    if candidates is not None:
        write_tensor(candidates, sdir / "candidates.tnsr")
        sums["candidates"] = _sha(candidates)
        cand_rel = f"{sample_id}/candidates.tnsr"
    gt_rel = None
    if gt_mask is not None:
        write_tensor(gt_mask, sdir / "gt.tnsr")
        sums["gt"] = _sha(gt_mask)
        gt_rel = f"{sample_id}/gt.tnsr"
    manifest = {
        "sample_id": sample_id,
        "image_height": h,
        "image_width": w,
        "image_path": f"{sample_id}/image.tnsr",
        "feature_levels": levels,
        "cluster_feature_path": f"{sample_id}/cluster.tnsr",
        "candidate_masks_path": cand_rel,
        "text_features_path": text_rel,
        "label": label,
        "gt_mask_path": gt_rel,
    }
    mpath = root / f"{sample_id}.json"
    mpath.write_text(json.dumps(manifest, indent=2) + "\n")
    checksums[sample_id] = sums
    return mpath


def suggested_config(spec):
    """Detection config dict matched to the generated geometry."""
    return {
        "segmenter": {"n_clusters": 4},
        "map_normalization": "none",
        "smoothing_sigma": 0.0,
        "image_score_mode": "max",
        "seed": spec.seed,
    }


def build_category(root, spec=None, query_kinds=(), name="widgets"):
    """Write one category under `root`: references, bank manifest, queries.

    query_kinds: sequence of 'normal' / 'structural' / 'logical'.  Returns a
    CategoryFixture with everything the tests need to know.
    """
    spec = spec or CategorySpec()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    regions = _regions(spec)
    bases = _bases(spec)
    checksums = {}

    text = np.stack([bases["text_normal"], bases["text_anomalous"]]).astype(np.float32)
    write_tensor(text, root / "text.tnsr")

    ref_paths = []
    for i in range(spec.n_refs):
        sid = f"ref{i:03d}"
        levels = {t: _feature_map(spec, regions, bases, rng) for t in spec.level_tags}
        ref_paths.append(_write_sample(
            root, spec, sid, _image(spec, regions), levels,
            _feature_map(spec, regions, bases, rng),
            _candidates(spec, regions), "text.tnsr", "normal", None, checksums))

    bank = {
        "category": name,
        "samples": [p.name for p in ref_paths],
        "config_overrides": {"segmenter": {"n_clusters": 4}},
    }
    bank_path = root / "bank.json"
    bank_path.write_text(json.dumps(bank, indent=2) + "\n")

    # cells strictly inside parts A and B, used round-robin for injections
    gh, gw = spec.grid_hw
    part_cells = [(r, c) for r in range(gh) for c in range(gw)
                  if _cell_region(spec, regions, r, c) in (_A, _B)]

    query_paths = []
    anomaly_cells = {}
    labels = {}
    h, w = spec.image_hw
    bh, bw = h // gh, w // gw
    for i, kind in enumerate(query_kinds):
        sid = f"q{i:03d}_{kind}"
        if kind == "normal":
            drop, cell = (), None
            label = "normal"
            gt = np.zeros((h, w), dtype=np.uint8)
        elif kind == "structural":
            drop = ()
            cell = part_cells[int(rng.integers(len(part_cells)))]
            label = "anomalous"
            gt = np.zeros((h, w), dtype=np.uint8)
            gt[cell[0] * bh:(cell[0] + 1) * bh, cell[1] * bw:(cell[1] + 1) * bw] = 1
            anomaly_cells[sid] = cell
        elif kind == "logical":
            drop, cell = (_C,), None
            label = "anomalous"
            gt = np.zeros((h, w), dtype=np.uint8)
            r0, r1, c0, c1 = regions[_C]
            gt[r0:r1, c0:c1] = 1
        else:
            raise ValueError(f"unknown query kind {kind!r}")
        levels = {t: _feature_map(spec, regions, bases, rng, drop, cell)
                  for t in spec.level_tags}
        query_paths.append(_write_sample(
            root, spec, sid, _image(spec, regions, drop), levels,
            _feature_map(spec, regions, bases, rng, drop, cell),
            _candidates(spec, regions, drop), "text.tnsr", label, gt, checksums))
        labels[sid] = label

    config_path = root / "config.json"
    config_path.write_text(json.dumps({"detection": suggested_config(spec)},
                                      indent=2) + "\n")
    return CategoryFixture(root=root, bank_manifest=bank_path,
                           query_manifests=query_paths, config_path=config_path,
                           checksums=checksums, regions=regions,
                           anomaly_cells=anomaly_cells, query_labels=labels,
                           spec=spec)


def build_single_candidate_category(root, area_ratio, spec=None, name="solo"):
    """Category whose samples carry exactly one candidate of given area ratio.

    Exercises the single-candidate segmentation branches: above the
    area-ratio threshold the segmenter goes full-frame, below it the
    candidate itself becomes the one component.
    """
    spec = spec or CategorySpec(n_refs=1)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    regions = _regions(spec)
    bases = _bases(spec)
    h, w = spec.image_hw
    side_h = max(1, int(round(np.sqrt(area_ratio) * h)))
    side_w = max(1, int(round(np.sqrt(area_ratio) * w)))
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[:side_h, :side_w] = 1
    checksums = {}
    levels = {t: _feature_map(spec, regions, bases, rng) for t in spec.level_tags}
    mpath = _write_sample(root, spec, "solo000", _image(spec, regions), levels,
                          _feature_map(spec, regions, bases, rng),
                          mask[None], "text.tnsr", "normal", None, checksums)
    text = np.stack([bases["text_normal"], bases["text_anomalous"]]).astype(np.float32)
    write_tensor(text, root / "text.tnsr")
    bank_path = root / "bank.json"
    bank_path.write_text(json.dumps({"category": name, "samples": [mpath.name],
                                     "config_overrides": None}, indent=2) + "\n")
    return CategoryFixture(root=root, bank_manifest=bank_path, query_manifests=[],
                           config_path=None, checksums=checksums, regions=regions,
                           anomaly_cells={}, query_labels={}, spec=spec)


def main(argv=None):
    import argparse

    parser = argparse.ArgumentParser(
        description="materialize a synthetic category for demos and benchmarks")
    parser.add_argument("out_dir")
    parser.add_argument("--refs", type=int, default=2)
    parser.add_argument("--normal", type=int, default=4)
    parser.add_argument("--structural", type=int, default=2)
    parser.add_argument("--logical", type=int, default=2)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--image-size", type=int, default=64)
    parser.add_argument("--grid-size", type=int, default=8)
    args = parser.parse_args(argv)
    spec = CategorySpec(image_hw=(args.image_size, args.image_size),
                        grid_hw=(args.grid_size, args.grid_size),
                        n_refs=args.refs, seed=args.seed)
    kinds = (["normal"] * args.normal + ["structural"] * args.structural
             + ["logical"] * args.logical)
    fixture = build_category(args.out_dir, spec, kinds)
    print(f"bank manifest: {fixture.bank_manifest}")
    print(f"queries: {len(fixture.query_manifests)}")
    print(f"config: {fixture.config_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
