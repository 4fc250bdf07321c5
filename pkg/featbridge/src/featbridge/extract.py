"""Extraction jobs: turn a dataset of images into engine-ready files.

The four operations mirror the CLI subcommands. `extract_features` writes the
resized image tensor, the per-level patch grids, and the clustering grid for
every selected image; `extract_candidate_masks` adds a candidate mask stack
where the backend finds anything; `extract_text` embeds the prompt set once
per category; `build_manifests` stitches whatever is on disk into sample
manifests plus a k-shot bank manifest per category.

Every operation appends its notes (grayscale replication, per-image mask
failures, prompt set id) to `extraction_log.json` in the category output
directory. The log is a bridge-side sidecar: sample manifests carry only the
fields the engine schema defines.

Output layout per category:

    out/<category>/bank.json
    out/<category>/<sample_id>.json
    out/<category>/<sample_id>/image.tnsr, lv06.tnsr ... , cluster.tnsr,
                               candidates.tnsr?, gt_mask.tnsr?
    out/<category>/text.tnsr
    out/<category>/extraction_log.json

The bridge never scores anything; all detection math stays engine-side.
"""

import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import load_prompt_set
from .datasets import DatasetError, walk_dataset
from .encoders import encode_text_prompts, get_feature_backend, level_tag
from .tensor_io import (atomic_write_json, read_tensor_header, write_tensor)
from .masks import get_mask_backend

GRAY_MODES = ("1", "L", "LA", "I", "I;16", "F")


class ExtractionError(RuntimeError):
    """An extraction step cannot proceed (unreadable input, missing stage)."""


@dataclass(frozen=True)
class ExtractionJob:
    dataset_root: Path
    dataset_kind: str
    output_root: Path
    config: object            # BridgeConfig
    categories: tuple | None = None
    shots: int = 1

    def walk(self):
        per_cat = walk_dataset(self.dataset_root, self.dataset_kind,
                               self.categories)
        for cat, records in per_cat.items():
            if self.shots > len(records.references):
                raise DatasetError(
                    f"{cat}: {self.shots} shot(s) requested but only "
                    f"{len(records.references)} reference image(s) exist")
        return per_cat

    def selected(self, records):
        """References limited to the shot count, plus all queries."""
        return list(records.references[:self.shots]) + list(records.queries)

    def category_dir(self, category):
        return Path(self.output_root) / category


def load_image(path, size):
    """Read an image as (size, size, 3) uint8; gray inputs are replicated.

    Returns (array, replicated) where `replicated` flags single-channel
    sources expanded to three channels before encoding.
    """
    try:
        with Image.open(path) as im:
            replicated = im.mode in GRAY_MODES
            rgb = im.convert("RGB").resize((size, size), Image.BILINEAR)
    except (OSError, ValueError) as e:
        raise ExtractionError(f"cannot read image {path}: {e}") from e
    return np.asarray(rgb, dtype=np.uint8), replicated


def load_gt_mask(paths, size):
    """Union one or more ground-truth mask images into (size, size) uint8."""
    union = np.zeros((size, size), dtype=np.uint8)
    for path in paths:
        try:
            with Image.open(path) as im:
                mask = im.convert("L").resize((size, size), Image.NEAREST)
        except (OSError, ValueError) as e:
            raise ExtractionError(f"cannot read mask {path}: {e}") from e
        union |= (np.asarray(mask) > 0).astype(np.uint8)
    return union


def _update_log(cat_dir, section, payload):
    log_path = Path(cat_dir) / "extraction_log.json"
    log = {}
    if log_path.exists():
        try:
            log = json.loads(log_path.read_text())
        except (OSError, json.JSONDecodeError):
            log = {}
    log[section] = payload
    atomic_write_json(log, log_path)


def _map_images(job, records, worker):
    """Run `worker(record)` over selected records, possibly threaded."""
    selected = job.selected(records)
    if job.config.threads == 1:
        return [worker(r) for r in selected]
    with ThreadPoolExecutor(max_workers=job.config.threads) as pool:
        return list(pool.map(worker, selected))


def extract_features(job, backend=None):
    """Write image, level, and cluster tensors for every selected image."""
    backend = backend or get_feature_backend(job.config)
    cfg = job.config
    summary = {}
    for cat, records in sorted(job.walk().items()):
        cat_dir = job.category_dir(cat)

        def work(rec):
            image, replicated = load_image(rec.image_path, cfg.image_size)
            levels, cluster = backend.patch_grids(image)
            sample_dir = cat_dir / rec.sample_id
            write_tensor(image, sample_dir / "image.tnsr")
            for tag, grid in sorted(levels.items()):
                write_tensor(grid, sample_dir / f"{tag}.tnsr")
            write_tensor(cluster, sample_dir / "cluster.tnsr")
            return rec.sample_id, replicated

        results = _map_images(job, records, work)
        _update_log(cat_dir, "features", {
            "backend": cfg.backend,
            "contrastive_model": cfg.contrastive_model,
            "self_supervised_model": cfg.self_supervised_model,
            "image_size": cfg.image_size,
            "levels": [level_tag(l) for l in sorted(cfg.feature_layers)],
            "grayscale_replicated": sorted(
                sid for sid, rep in results if rep),
            "images": len(results),
        })
        summary[cat] = len(results)
    return summary


def extract_candidate_masks(job, backend=None):
    """Write candidate mask stacks; per-image failures are logged, not fatal."""
    backend = backend or get_mask_backend(job.config)
    cfg = job.config
    summary = {}
    for cat, records in sorted(job.walk().items()):
        cat_dir = job.category_dir(cat)

        def work(rec):
            try:
                image, _ = load_image(rec.image_path, cfg.image_size)
                stack = backend.candidate_masks(image, hint=cat)
            except Exception as e:
                return rec.sample_id, f"error: {e}"
            if stack.shape[0] == 0:
                return rec.sample_id, 0
            write_tensor(stack.astype(np.uint8),
                         cat_dir / rec.sample_id / "candidates.tnsr")
            return rec.sample_id, int(stack.shape[0])

        results = _map_images(job, records, work)
        failures = {sid: r for sid, r in results if isinstance(r, str)}
        for sid, err in sorted(failures.items()):
            print(f"warning: masks for {cat}/{sid}: {err}", file=sys.stderr)
        _update_log(cat_dir, "masks", {
            "backend": cfg.backend,
            "counts": {sid: r for sid, r in sorted(results)
                       if not isinstance(r, str)},
            "failures": failures,
        })
        summary[cat] = sum(1 for _, r in results
                           if not isinstance(r, str) and r > 0)
    return summary


def extract_text(job, backend=None):
    """Embed the prompt set per category into text.tnsr."""
    backend = backend or get_feature_backend(job.config)
    prompt_set = load_prompt_set(job.config.prompt_set)
    summary = {}
    for cat in sorted(job.walk()):
        pair = encode_text_prompts(cat, job.config, backend=backend)
        cat_dir = job.category_dir(cat)
        write_tensor(pair, cat_dir / "text.tnsr")
        _update_log(cat_dir, "text", {
            "prompt_set": prompt_set.id,
            "normal_templates": len(prompt_set.normal_templates),
            "anomalous_templates": len(prompt_set.anomalous_templates),
        })
        summary[cat] = pair.shape[1]
    return summary


def _level_entries(sample_dir):
    entries = []
    for path in sorted(sample_dir.glob("lv*.tnsr")):
        dtype, dims = read_tensor_header(path)
        if dtype != "float32" or len(dims) != 3:
            raise ExtractionError(
                f"{path}: expected a float32 3-D level grid, got {dtype} {dims}")
        entries.append({
            "tag": path.stem,
            "path": f"{sample_dir.name}/{path.name}",
            "grid_h": int(dims[0]),
            "grid_w": int(dims[1]),
            "channels": int(dims[2]),
        })
    return entries


def build_manifests(job):
    """Write sample manifests and the k-shot bank manifest per category.

    Requires `extract_features` output on disk; candidate masks and text
    features are referenced when present and null otherwise.
    """
    cfg = job.config
    summary = {}
    for cat, records in sorted(job.walk().items()):
        cat_dir = job.category_dir(cat)
        text_rel = "text.tnsr" if (cat_dir / "text.tnsr").exists() else None
        refs = list(records.references[:job.shots])

        sample_files = {}
        for rec in job.selected(records):
            sample_dir = cat_dir / rec.sample_id
            if not (sample_dir / "image.tnsr").exists():
                raise ExtractionError(
                    f"{cat}/{rec.sample_id}: no image tensor on disk; run "
                    "the features subcommand first")
            levels = _level_entries(sample_dir)
            if not levels:
                raise ExtractionError(
                    f"{cat}/{rec.sample_id}: no feature level tensors; run "
                    "the features subcommand first")
            if not (sample_dir / "cluster.tnsr").exists():
                raise ExtractionError(
                    f"{cat}/{rec.sample_id}: no cluster tensor; run the "
                    "features subcommand first")
            candidates = None
            if (sample_dir / "candidates.tnsr").exists():
                candidates = f"{rec.sample_id}/candidates.tnsr"
            gt_rel = None
            if rec.gt_paths:
                gt = load_gt_mask(rec.gt_paths, cfg.image_size)
                write_tensor(gt, sample_dir / "gt_mask.tnsr")
                gt_rel = f"{rec.sample_id}/gt_mask.tnsr"
            manifest = {
                "sample_id": rec.sample_id,
                "image_height": cfg.image_size,
                "image_width": cfg.image_size,
                "image_path": f"{rec.sample_id}/image.tnsr",
                "feature_levels": levels,
                "cluster_feature_path": f"{rec.sample_id}/cluster.tnsr",
                "candidate_masks_path": candidates,
                "text_features_path": text_rel,
                "label": rec.label,
                "gt_mask_path": gt_rel,
            }
            fname = f"{rec.sample_id}.json"
            atomic_write_json(manifest, cat_dir / fname)
            sample_files[rec.sample_id] = fname

        bank = {
            "category": cat,
            "samples": [sample_files[r.sample_id] for r in refs],
        }
        atomic_write_json(bank, cat_dir / "bank.json")
        _update_log(cat_dir, "manifests", {
            "shots": job.shots,
            "references": [r.sample_id for r in refs],
            "queries": len(records.queries),
        })
        summary[cat] = {"references": len(refs),
                        "queries": len(records.queries)}
    return summary
