"""Command-line interface.

Subcommands: validate, segment, detect, evaluate, bench.  Exit codes: 0 on
success, 1 on validation failures (bad manifests, config, or arguments), 2 on
runtime failures.  All run parameters live in a JSON config file plus a small
set of overriding flags; every default is materialized into the config
fingerprint recorded next to the results.  Timings go to stderr and
timings.json only, never into the deterministic outputs.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation
from .evaluation import EvalRecord, EvaluationError, emit_outputs, evaluate_dataset
from .pipeline import (ConfigError, DetectionConfig, build_reference_bank, detect)
from .tensor_store import (ManifestError, ReferenceBankManifest, TensorFormatError,
                           load_sample, read_tensor)

log = logging.getLogger("compvad")

VALIDATION_ERRORS = (ManifestError, ConfigError, TensorFormatError,
                     EvaluationError, FileNotFoundError)


class _UsageError(ValueError):
    """Bad command-line usage detected after argparse."""


def _load_cli_config(path):
    """Parse the run config file: a 'detection' object plus optional defaults
    for bank_manifest, queries, output_dir, threads, and dataset."""
    if path is None:
        return {}
    p = Path(path)
    try:
        d = json.loads(p.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"{p}: expected a JSON object")
    known = ("detection", "bank_manifest", "queries", "output_dir", "threads",
             "dataset")
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"{p}: unknown field(s) {unknown}")
    out = dict(d)
    out["_root"] = p.parent
    if "detection" in out and not isinstance(out["detection"], dict):
        raise ConfigError(f"{p}: 'detection' must be an object")
    if "queries" in out:
        q = out["queries"]
        if isinstance(q, str):
            out["queries"] = [q]
        elif not (isinstance(q, list) and all(isinstance(x, str) for x in q)):
            raise ConfigError(f"{p}: 'queries' must be a string or list of strings")
    if "threads" in out and (not isinstance(out["threads"], int) or out["threads"] < 1):
        raise ConfigError(f"{p}: 'threads' must be a positive integer")
    return out


def _resolve(root, value):
    p = Path(value)
    return p if p.is_absolute() else (root or Path.cwd()) / p


def _effective_config(cli_cfg, args):
    det = DetectionConfig.from_dict(cli_cfg.get("detection", {}))
    if getattr(args, "seed", None) is not None:
        det = det.with_overrides({"seed": args.seed}, where="--seed")
    return det


def _bank_path(cli_cfg, args):
    if getattr(args, "bank", None):
        return Path(args.bank)
    if "bank_manifest" in cli_cfg:
        return _resolve(cli_cfg.get("_root"), cli_cfg["bank_manifest"])
    raise _UsageError("no reference bank given (flag --bank or config bank_manifest)")


def _query_paths(cli_cfg, args):
    patterns = list(getattr(args, "queries", None) or [])
    root = Path.cwd()
    if not patterns and "queries" in cli_cfg:
        patterns = cli_cfg["queries"]
        root = cli_cfg.get("_root") or root
    if not patterns:
        raise _UsageError("no query manifests given (flag --queries or config queries)")
    paths = []
    for pat in patterns:
        pat = str(_resolve(root, pat))
        hits = sorted(glob.glob(pat))
        if not hits:
            raise _UsageError(f"query pattern matched nothing: {pat}")
        paths.extend(Path(h) for h in hits)
    return paths


def _out_dir(cli_cfg, args, required=True):
    if getattr(args, "out", None):
        return Path(args.out)
    if "output_dir" in cli_cfg:
        return _resolve(cli_cfg.get("_root"), cli_cfg["output_dir"])
    if required:
        raise _UsageError("no output directory given (flag --out or config output_dir)")
    return None


def _load_bank(bank_path, det_config, shots):
    manifest = ReferenceBankManifest.from_path(bank_path)
    config = det_config.with_overrides(manifest.config_overrides,
                                       where=f"{bank_path}: config_overrides")
    sample_manifests = list(manifest.samples)
    if shots is not None:
        if shots < 1 or shots > len(sample_manifests):
            raise _UsageError(
                f"--shots {shots} out of range [1, {len(sample_manifests)}]")
        sample_manifests = sample_manifests[:shots]
    samples = [load_sample(m) for m in sample_manifests]
    bank = build_reference_bank(samples, config, category=manifest.category)
    return bank, config, [s.sample_id for s in samples]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_validate(args):
    """Check every given manifest (sample or bank) and report diagnostics."""
    failures = 0
    for pattern in args.manifests:
        hits = sorted(glob.glob(pattern)) or [pattern]
        for path in hits:
            try:
                d = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as e:
                print(f"FAIL {path}: {e}")
                failures += 1
                continue
            try:
                if isinstance(d, dict) and "samples" in d:
                    manifest = ReferenceBankManifest.from_path(path)
                    for sm in manifest.samples:
                        load_sample(sm)
                    print(f"ok   {path} (bank, {len(manifest.samples)} samples)")
                else:
                    load_sample(path)
                    print(f"ok   {path} (sample)")
            except VALIDATION_ERRORS as e:
                print(f"FAIL {path}: {e}")
                failures += 1
    if failures:
        print(f"{failures} manifest(s) failed validation")
        return 1
    return 0


def cmd_segment(args):
    """Segment bank references (or explicit queries) and dump component masks."""
    from PIL import Image

    from .component_segmenter import segment as run_segment

    cli_cfg = _load_cli_config(args.config)
    config = _effective_config(cli_cfg, args)
    bank_path = _bank_path(cli_cfg, args)
    out = _out_dir(cli_cfg, args)
    bank, config, ref_ids = _load_bank(bank_path, config, getattr(args, "shots", None))
    if getattr(args, "queries", None) or "queries" in cli_cfg:
        targets = [load_sample(p) for p in _query_paths(cli_cfg, args)]
        comps_list = [
            run_segment(s.candidate_masks, s.cluster_features, bank.centroids,
                        config.segmenter, bank.image_hw)
            for s in targets]
        ids = [s.sample_id for s in targets]
    else:
        ids = ref_ids
        comps_list = bank.reference_components
    out.mkdir(parents=True, exist_ok=True)
    for sid, comps in zip(ids, comps_list):
        summary = {"sample_id": sid, "n_components": len(comps),
                   "labels": [int(x) for x in comps.labels],
                   "areas": [int(m.sum()) for m in comps.masks]}
        (out / f"{sid}.components.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n")
        for j, mask in enumerate(comps.masks):
            img = (mask * 255).astype(np.uint8)
            Image.fromarray(img, mode="L").save(out / f"{sid}.component{j}.png")
        log.info("segmented %s: %d component(s)", sid, len(comps))
    return 0


def _detect_all(queries, bank, config, threads):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda q: detect(q, bank, config), queries))
    return [detect(q, bank, config) for q in queries]


def cmd_detect(args):
    """Score queries against the bank; write maps, detections.json, timings."""
    cli_cfg = _load_cli_config(args.config)
    config = _effective_config(cli_cfg, args)
    bank_path = _bank_path(cli_cfg, args)
    query_paths = _query_paths(cli_cfg, args)
    out = _out_dir(cli_cfg, args)
    threads = args.threads or cli_cfg.get("threads", 1)

    t0 = time.perf_counter()
    bank, config, _ = _load_bank(bank_path, config, args.shots)
    bank_time = time.perf_counter() - t0
    queries = [load_sample(p) for p in query_paths]
    log.info("bank %s: %d reference(s); %d query(ies); %d thread(s)",
             bank.category, bank.n_references, len(queries), threads)

    t0 = time.perf_counter()
    results = _detect_all(queries, bank, config, threads)
    detect_time = time.perf_counter() - t0

    out.mkdir(parents=True, exist_ok=True)
    emit_outputs([(r.sample_id, r.final_map) for r in results], None, out)
    detections = {
        "category": bank.category,
        "config_fingerprint": config.fingerprint(),
        "detections": [
            {
                "sample_id": r.sample_id,
                "image_score": r.image_score,
                "label": q.label,
                "gt_mask_path": q.gt_mask_path,
                "map_tensor": f"{r.sample_id}.map.tnsr",
                "map_png": f"{r.sample_id}.map.png",
                "n_components": len(r.components),
            }
            for q, r in zip(queries, results)
        ],
    }
    (out / "detections.json").write_text(
        json.dumps(detections, indent=2, sort_keys=True) + "\n")

    stage_totals = {}
    for r in results:
        for stage, dt in r.timings.items():
            stage_totals[stage] = stage_totals.get(stage, 0.0) + dt
    timings = {"bank_seconds": bank_time, "detect_seconds": detect_time,
               "stage_seconds": stage_totals, "n_queries": len(results),
               "threads": threads}
    (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    log.info("detect: %d queries in %.3fs (bank %.3fs)",
             len(results), detect_time, bank_time)
    return 0


def cmd_evaluate(args):
    """Aggregate one or more detect runs into report.json / report.csv."""
    records = []
    fingerprints = {}
    for rdir in args.results:
        rdir = Path(rdir)
        dpath = rdir / "detections.json"
        try:
            d = json.loads(dpath.read_text())
        except OSError as e:
            raise ManifestError(f"cannot read {dpath}: {e}") from e
        except json.JSONDecodeError as e:
            raise ManifestError(f"{dpath}: invalid JSON: {e}") from e
        fingerprints[str(rdir)] = d.get("config_fingerprint", "")
        for rec in d.get("detections", []):
            if rec.get("label") is None:
                raise EvaluationError(
                    f"{dpath}: sample {rec.get('sample_id')} has no label; "
                    "evaluation needs labeled queries")
            pixel_scores = None
            gt = None
            if rec.get("gt_mask_path"):
                gt = read_tensor(rec["gt_mask_path"])
                pixel_scores = read_tensor(rdir / rec["map_tensor"]).astype(np.float64)
            records.append(EvalRecord(
                sample_id=rec["sample_id"],
                image_score=float(rec["image_score"]),
                label=rec["label"],
                category=d.get("category", ""),
                pixel_scores=pixel_scores,
                gt_mask=gt,
            ))
    distinct = sorted(set(fingerprints.values()))
    if len(distinct) > 1:
        lines = ", ".join(f"{k}: {v[:12]}" for k, v in sorted(fingerprints.items()))
        raise EvaluationError(
            f"results were produced under different config fingerprints ({lines}); "
            "refusing to pool them")
    report = evaluate_dataset(records, dataset=args.dataset,
                              config_fingerprint=distinct[0] if distinct else "")
    out = Path(args.out)
    emit_outputs([], report, out)
    print(evaluation.report_csv_text(report), end="")
    return 0


def cmd_bench(args):
    """Time the detection stages over the given queries."""
    cli_cfg = _load_cli_config(args.config)
    config = _effective_config(cli_cfg, args)
    bank_path = _bank_path(cli_cfg, args)
    query_paths = _query_paths(cli_cfg, args)
    out = _out_dir(cli_cfg, args, required=False)
    threads = args.threads or cli_cfg.get("threads", 1)

    t0 = time.perf_counter()
    bank, config, _ = _load_bank(bank_path, config, getattr(args, "shots", None))
    bank_time = time.perf_counter() - t0
    queries = [load_sample(p) for p in query_paths]

    t0 = time.perf_counter()
    results = _detect_all(queries, bank, config, threads)
    total = time.perf_counter() - t0
    stages = {}
    for r in results:
        for stage, dt in r.timings.items():
            stages[stage] = stages.get(stage, 0.0) + dt
    payload = {"bank_seconds": bank_time, "total_seconds": total,
               "stage_seconds": dict(sorted(stages.items())),
               "n_queries": len(results), "threads": threads}
    text = json.dumps(payload, indent=2)
    print(text, file=sys.stderr)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "timings.json").write_text(text + "\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="compvad",
        description="few-shot visual anomaly detection over precomputed features")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, queries=True, shots=True):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--bank", help="reference bank manifest")
        if queries:
            p.add_argument("--queries", nargs="+",
                           help="query manifest paths or glob patterns")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--threads", type=int, help="worker threads (default 1)")
        if shots:
            p.add_argument("--shots", type=int,
                           help="use only the first K bank samples")

    p = sub.add_parser("validate", help="check manifests and referenced tensors")
    p.add_argument("manifests", nargs="+", help="manifest paths or glob patterns")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("segment", help="write component masks for inspection")
    common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("detect", help="score queries against a reference bank")
    common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="compute AUC metrics over detect results")
    p.add_argument("--results", nargs="+", required=True,
                   help="one or more cmd-detect output directories")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--dataset", default="dataset", help="dataset name for the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="time detection stages")
    common(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad usage; bad arguments are validation
        # failures under this tool's exit-code contract (--help stays 0)
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except (_UsageError, *VALIDATION_ERRORS) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001 - runtime failures exit 2 by contract
        import traceback

        traceback.print_exc()
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
