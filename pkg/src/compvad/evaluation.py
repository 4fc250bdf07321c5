"""Evaluation: ROC-AUC, report building, and output files.

roc_auc uses the rank statistic (Mann-Whitney U) with tied scores receiving
the average of their rank range, so exact ties contribute 0.5 per pair.  A
single-class input is an error, never a silent 0.5.  Pixel-level AUC pools
the pixels of every scored sample into one global ranking.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor_store import write_tensor

CSV_COLUMNS = ("dataset", "category", "image_auc", "pixel_auc", "n_samples")


class EvaluationError(ValueError):
    """Inputs insufficient or inconsistent for the requested metric."""


def roc_auc(scores, labels):
    """Area under the ROC curve of scores against binary labels.

    Ties get rank-average treatment (0.5 credit per tied pair).  Raises
    EvaluationError when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape[0] != y.shape[0]:
        raise EvaluationError(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    if s.shape[0] == 0:
        raise EvaluationError("empty input")
    if not np.all(np.isfinite(s)):
        raise EvaluationError("scores contain non-finite values")
    uniq = np.unique(y)
    if not np.all(np.isin(uniq, (0, 1))):
        raise EvaluationError(f"labels must be 0/1, got values {uniq.tolist()[:8]}")
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    if pos == 0 or neg == 0:
        raise EvaluationError(
            f"AUC undefined with a single class ({pos} positive, {neg} negative)")

    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.shape[0], dtype=np.float64)
    sorted_s = s[order]
    # average ranks over each tie group; ranks are 1-based
    boundaries = np.nonzero(np.diff(sorted_s))[0] + 1
    starts = np.concatenate(([0], boundaries))
    stops = np.concatenate((boundaries, [s.shape[0]]))
    for a, b in zip(starts, stops):
        ranks[order[a:b]] = 0.5 * (a + 1 + b)
    rank_sum = float(ranks[np.asarray(y) == 1].sum())
    u = rank_sum - pos * (pos + 1) / 2.0
    return u / (pos * neg)


@dataclass
class EvalRecord:
    """One scored sample ready for metric computation."""

    sample_id: str
    image_score: float
    label: str                      # 'normal' or 'anomalous'
    category: str = ""
    pixel_scores: np.ndarray | None = None   # (H, W) float
    gt_mask: np.ndarray | None = None        # (H, W) 0/1


@dataclass
class EvalReport:
    """Dataset-level metrics plus a per-category breakdown."""

    dataset: str
    image_auc: float | None
    pixel_auc: float | None
    n_samples: int
    per_category: dict = field(default_factory=dict)
    config_fingerprint: str = ""
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "dataset": self.dataset,
            "image_auc": self.image_auc,
            "pixel_auc": self.pixel_auc,
            "n_samples": self.n_samples,
            "per_category": self.per_category,
            "config_fingerprint": self.config_fingerprint,
            "notes": self.notes,
        }


def _label_to_int(label, where):
    if label == "normal":
        return 0
    if label == "anomalous":
        return 1
    raise EvaluationError(f"{where}: label must be 'normal' or 'anomalous', got {label!r}")


def _auc_block(records, where, notes):
    """(image_auc, pixel_auc) for a record list, with reasons for None."""
    y = np.array([_label_to_int(r.label, f"{where}: {r.sample_id}") for r in records])
    s = np.array([r.image_score for r in records], dtype=np.float64)
    try:
        image_auc = roc_auc(s, y)
    except EvaluationError as e:
        image_auc = None
        notes.append(f"{where}: image AUC unavailable: {e}")
    pix_scores = []
    pix_labels = []
    for r in records:
        if r.pixel_scores is None or r.gt_mask is None:
            continue
        if r.pixel_scores.shape != r.gt_mask.shape:
            raise EvaluationError(
                f"{where}: {r.sample_id}: map dims {r.pixel_scores.shape} "
                f"!= gt dims {r.gt_mask.shape}")
        pix_scores.append(np.asarray(r.pixel_scores, dtype=np.float64).reshape(-1))
        pix_labels.append((np.asarray(r.gt_mask).reshape(-1) != 0).astype(np.int64))
    if pix_scores:
        try:
            pixel_auc = roc_auc(np.concatenate(pix_scores), np.concatenate(pix_labels))
        except EvaluationError as e:
            pixel_auc = None
            notes.append(f"{where}: pixel AUC unavailable: {e}")
    else:
        pixel_auc = None
        notes.append(f"{where}: pixel AUC unavailable: no samples carry both "
                     "a score map and a ground-truth mask")
    return image_auc, pixel_auc


def evaluate_dataset(records, dataset="dataset", config_fingerprint=""):
    """Build an EvalReport over records, grouped per category."""
    records = list(records)
    if not records:
        raise EvaluationError("no records to evaluate")
    notes = []
    image_auc, pixel_auc = _auc_block(records, dataset, notes)
    per_category = {}
    categories = sorted({r.category for r in records})
    if len(categories) > 1 or categories != [""]:
        for cat in categories:
            sub = [r for r in records if r.category == cat]
            cat_img, cat_pix = _auc_block(sub, f"{dataset}/{cat or '(uncategorized)'}", notes)
            per_category[cat] = {
                "image_auc": cat_img,
                "pixel_auc": cat_pix,
                "n_samples": len(sub),
            }
    return EvalReport(dataset=dataset, image_auc=image_auc, pixel_auc=pixel_auc,
                      n_samples=len(records), per_category=per_category,
                      config_fingerprint=config_fingerprint, notes=notes)


def _png_bytes(score_map):
    """8-bit grayscale PNG of a map clipped to [0, 1]."""
    m = np.asarray(score_map, dtype=np.float64)
    img = np.clip(m, 0.0, 1.0)
    img = np.round(img * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def report_csv_text(report):
    """CSV with one dataset row followed by per-category rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)

    def fmt(v):
        return "" if v is None else f"{v:.6f}"

    writer.writerow([report.dataset, "", fmt(report.image_auc),
                     fmt(report.pixel_auc), report.n_samples])
    for cat in sorted(report.per_category):
        row = report.per_category[cat]
        writer.writerow([report.dataset, cat, fmt(row["image_auc"]),
                         fmt(row["pixel_auc"]), row["n_samples"]])
    return buf.getvalue()


def emit_outputs(results, report, out_dir):
    """Write per-sample maps and, when given, the evaluation report.

    results: sequence of (sample_id, score_map) pairs; each becomes
    {sample_id}.map.png (8-bit preview) and {sample_id}.map.tnsr (float32).
    report: EvalReport or None; becomes report.json and report.csv.
    Everything written here is a pure function of the inputs, so reruns are
    byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sample_id, score_map in results:
        if "/" in sample_id or "\\" in sample_id:
            raise EvaluationError(f"sample_id {sample_id!r} is not a valid file stem")
        (out / f"{sample_id}.map.png").write_bytes(_png_bytes(score_map))
        write_tensor(np.asarray(score_map, dtype=np.float32),
                     out / f"{sample_id}.map.tnsr")
    if report is not None:
        (out / "report.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "report.csv").write_text(report_csv_text(report))
