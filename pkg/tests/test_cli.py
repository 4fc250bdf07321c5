"""Command-line behavior: subcommands, exit codes, output files."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from compvad.cli import main
from compvad.pipeline import DetectionConfig
from compvad.tensor_store import read_tensor

from conftest import load_fixture_config


def _detect_args(fx, out, extra=()):
    return ["detect",
            "--config", str(fx.config_path),
            "--bank", str(fx.bank_manifest),
            "--queries", *[str(p) for p in fx.query_manifests],
            "--out", str(out), *extra]


# ---------------------------------------------------------------------------
# validate


def test_validate_ok(basic_category, capsys):
    fx = basic_category
    code = main(["validate", str(fx.bank_manifest),
                 *[str(p) for p in fx.query_manifests]])
    out = capsys.readouterr().out
    assert code == 0
    assert out.count("ok   ") == 1 + len(fx.query_manifests)
    assert "FAIL" not in out


def test_validate_missing_tensor_names_the_file(basic_category, tmp_path, capsys):
    fx = basic_category
    src = json.loads(fx.query_manifests[0].read_text())
    src["image_path"] = "does_not_exist.tnsr"
    bad = tmp_path / "bad_sample.json"
    bad.write_text(json.dumps(src))
    code = main(["validate", str(bad)])
    out = capsys.readouterr().out
    assert code == 1
    assert "FAIL" in out
    assert "does_not_exist.tnsr" in out


def test_validate_mixed_set_reports_each_failure(basic_category, tmp_path, capsys):
    fx = basic_category
    bad1 = tmp_path / "not_json.json"
    bad1.write_text("{oops")
    src = json.loads(fx.query_manifests[0].read_text())
    src["label"] = "broken"
    src["image_path"] = str(fx.root / src["image_path"])
    src["cluster_feature_path"] = str(fx.root / src["cluster_feature_path"])
    bad2 = tmp_path / "bad_label.json"
    bad2.write_text(json.dumps(src))
    code = main(["validate", str(fx.bank_manifest), str(bad1), str(bad2)])
    out = capsys.readouterr().out
    assert code == 1
    assert out.count("FAIL") == 2
    assert out.count("ok   ") == 1
    assert "2 manifest(s) failed" in out


def test_validate_nonexistent_path_fails(tmp_path, capsys):
    code = main(["validate", str(tmp_path / "ghost.json")])
    assert code == 1
    assert "FAIL" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# detect


def test_detect_writes_expected_files(basic_category, tmp_path, capsys):
    fx = basic_category
    out = tmp_path / "run"
    assert main(_detect_args(fx, out)) == 0
    ids = [json.loads(p.read_text())["sample_id"] for p in fx.query_manifests]
    for sid in ids:
        assert (out / f"{sid}.map.png").exists()
        assert (out / f"{sid}.map.tnsr").exists()
        arr = read_tensor(out / f"{sid}.map.tnsr")
        assert arr.shape == (64, 64)
        assert arr.dtype == np.float32
    d = json.loads((out / "detections.json").read_text())
    assert d["category"] == "widgets"
    assert len(d["detections"]) == len(ids)
    for rec in d["detections"]:
        assert set(rec) == {"sample_id", "image_score", "label", "gt_mask_path",
                            "map_tensor", "map_png", "n_components"}
    assert (out / "timings.json").exists()
    # nothing but logging on the console, and logging goes to stderr
    assert capsys.readouterr().out == ""


def test_detect_fingerprint_matches_effective_config(basic_category, tmp_path):
    fx = basic_category
    out = tmp_path / "run"
    assert main(_detect_args(fx, out)) == 0
    d = json.loads((out / "detections.json").read_text())
    assert d["config_fingerprint"] == load_fixture_config(fx).fingerprint()


def test_detect_scores_order_queries_correctly(basic_category, tmp_path):
    fx = basic_category
    out = tmp_path / "run"
    assert main(_detect_args(fx, out)) == 0
    d = json.loads((out / "detections.json").read_text())
    scores = {r["sample_id"]: r["image_score"] for r in d["detections"]}
    labels = {r["sample_id"]: r["label"] for r in d["detections"]}
    normal = [s for s in scores if "normal" in s][0]
    for sid, score in scores.items():
        if sid == normal:
            assert labels[sid] == "normal"
        else:
            assert labels[sid] == "anomalous"
            assert score > scores[normal]


def test_detect_rerun_is_byte_identical(basic_category, tmp_path):
    fx = basic_category
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(_detect_args(fx, out1)) == 0
    assert main(_detect_args(fx, out2)) == 0
    assert ((out1 / "detections.json").read_bytes()
            == (out2 / "detections.json").read_bytes())
    for p in sorted(out1.glob("*.map.tnsr")):
        assert p.read_bytes() == (out2 / p.name).read_bytes()
    for p in sorted(out1.glob("*.map.png")):
        assert p.read_bytes() == (out2 / p.name).read_bytes()


def test_detect_shots_one_equals_single_sample_bank(basic_category, tmp_path):
    fx = basic_category
    bank = json.loads(fx.bank_manifest.read_text())
    bank["samples"] = [str((fx.bank_manifest.parent / s).resolve())
                       for s in bank["samples"][:1]]
    solo_manifest = tmp_path / "bank_solo.json"
    solo_manifest.write_text(json.dumps(bank))

    out_shots, out_solo = tmp_path / "shots", tmp_path / "solo"
    assert main(_detect_args(fx, out_shots, extra=["--shots", "1"])) == 0
    args = _detect_args(fx, out_solo)
    args[args.index("--bank") + 1] = str(solo_manifest)
    assert main(args) == 0
    assert ((out_shots / "detections.json").read_bytes()
            == (out_solo / "detections.json").read_bytes())
    for p in sorted(out_shots.glob("*.map.tnsr")):
        assert p.read_bytes() == (out_solo / p.name).read_bytes()


def test_detect_shots_out_of_range(basic_category, tmp_path, capsys):
    fx = basic_category
    code = main(_detect_args(fx, tmp_path / "x", extra=["--shots", "9"]))
    assert code == 1
    assert "out of range" in capsys.readouterr().err


def test_detect_seed_override_changes_fingerprint(basic_category, tmp_path):
    fx = basic_category
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(_detect_args(fx, out1)) == 0
    assert main(_detect_args(fx, out2, extra=["--seed", "123"])) == 0
    f1 = json.loads((out1 / "detections.json").read_text())["config_fingerprint"]
    f2 = json.loads((out2 / "detections.json").read_text())["config_fingerprint"]
    assert f1 != f2
    assert f2 == load_fixture_config(fx).with_overrides({"seed": 123}).fingerprint()


def test_detect_threads_do_not_change_output(basic_category, tmp_path):
    fx = basic_category
    out1, out4 = tmp_path / "t1", tmp_path / "t4"
    assert main(_detect_args(fx, out1, extra=["--threads", "1"])) == 0
    assert main(_detect_args(fx, out4, extra=["--threads", "4"])) == 0
    assert ((out1 / "detections.json").read_bytes()
            == (out4 / "detections.json").read_bytes())
    for p in sorted(out1.glob("*.map.tnsr")):
        assert p.read_bytes() == (out4 / p.name).read_bytes()


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_over_detect_results(basic_category, tmp_path, capsys):
    fx = basic_category
    run = tmp_path / "run"
    assert main(_detect_args(fx, run)) == 0
    rep = tmp_path / "report"
    code = main(["evaluate", "--results", str(run), "--out", str(rep),
                 "--dataset", "widgets-demo"])
    out = capsys.readouterr().out
    assert code == 0
    assert out.splitlines()[0] == "dataset,category,image_auc,pixel_auc,n_samples"
    report = json.loads((rep / "report.json").read_text())
    assert report["dataset"] == "widgets-demo"
    assert report["image_auc"] == 1.0
    # pooled pixels include the logical query, whose anomaly is an absent
    # part: its gt region is background in the map, so only range sanity here
    assert report["pixel_auc"] is not None
    assert 0.0 <= report["pixel_auc"] <= 1.0
    assert report["n_samples"] == 3
    assert (rep / "report.csv").read_text() == out


def test_evaluate_structural_only_localizes_pixels(basic_category, tmp_path, capsys):
    fx = basic_category
    structural = [p for p in fx.query_manifests if "structural" in str(p)]
    run = tmp_path / "run"
    args = ["detect", "--config", str(fx.config_path),
            "--bank", str(fx.bank_manifest),
            "--queries", *[str(p) for p in structural], "--out", str(run)]
    assert main(args) == 0
    rep = tmp_path / "rep"
    assert main(["evaluate", "--results", str(run), "--out", str(rep)]) == 0
    capsys.readouterr()
    report = json.loads((rep / "report.json").read_text())
    # a single anomalous sample: image AUC is undefined and says why,
    # while the pixel ranking inside the map is nearly perfect
    assert report["image_auc"] is None
    assert any("image AUC unavailable" in n for n in report["notes"])
    assert report["pixel_auc"] > 0.99


def test_evaluate_refuses_mixed_fingerprints(basic_category, tmp_path, capsys):
    fx = basic_category
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(_detect_args(fx, a)) == 0
    assert main(_detect_args(fx, b, extra=["--seed", "123"])) == 0
    code = main(["evaluate", "--results", str(a), str(b),
                 "--out", str(tmp_path / "rep")])
    assert code == 1
    assert "different config fingerprints" in capsys.readouterr().err


def test_evaluate_requires_labels(basic_category, tmp_path, capsys):
    fx = basic_category
    run = tmp_path / "run"
    assert main(_detect_args(fx, run)) == 0
    d = json.loads((run / "detections.json").read_text())
    d["detections"][0]["label"] = None
    (run / "detections.json").write_text(json.dumps(d))
    code = main(["evaluate", "--results", str(run), "--out", str(tmp_path / "r")])
    assert code == 1
    assert "no label" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# segment / bench


def test_segment_writes_component_masks(basic_category, tmp_path):
    fx = basic_category
    out = tmp_path / "seg"
    code = main(["segment", "--config", str(fx.config_path),
                 "--bank", str(fx.bank_manifest), "--out", str(out)])
    assert code == 0
    summaries = sorted(out.glob("*.components.json"))
    assert len(summaries) == 2  # one per bank reference
    for spath in summaries:
        summary = json.loads(spath.read_text())
        assert summary["n_components"] == 3
        assert len(summary["labels"]) == 3
        sid = summary["sample_id"]
        for j in range(summary["n_components"]):
            assert (out / f"{sid}.component{j}.png").exists()


def test_bench_reports_stage_totals(basic_category, tmp_path, capsys):
    fx = basic_category
    out = tmp_path / "bench"
    code = main(["bench", "--config", str(fx.config_path),
                 "--bank", str(fx.bank_manifest),
                 "--queries", *[str(p) for p in fx.query_manifests],
                 "--out", str(out)])
    captured = capsys.readouterr()
    assert code == 0
    assert captured.out == ""  # timings are not data: stderr only
    payload = json.loads((out / "timings.json").read_text())
    assert set(payload["stage_seconds"]) == {"segment", "structural",
                                             "logical", "fusion"}
    assert payload["n_queries"] == len(fx.query_manifests)
    stderr_payload = json.loads(captured.err[captured.err.index("{"):])
    assert set(stderr_payload) == set(payload)


# ---------------------------------------------------------------------------
# usage and exit codes


def test_missing_bank_is_validation_failure(basic_category, tmp_path, capsys):
    fx = basic_category
    code = main(["detect", "--queries", str(fx.query_manifests[0]),
                 "--out", str(tmp_path / "x")])
    assert code == 1
    assert "no reference bank" in capsys.readouterr().err


def test_empty_query_glob_is_validation_failure(basic_category, tmp_path, capsys):
    fx = basic_category
    code = main(["detect", "--bank", str(fx.bank_manifest),
                 "--queries", str(tmp_path / "nothing*.json"),
                 "--out", str(tmp_path / "x")])
    assert code == 1
    assert "matched nothing" in capsys.readouterr().err


def test_unknown_flag_is_validation_failure(capsys):
    assert main(["detect", "--frobnicate"]) == 1


def test_unknown_subcommand_is_validation_failure(capsys):
    assert main(["transmogrify"]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "validate" in capsys.readouterr().out


def test_bad_config_file_is_validation_failure(basic_category, tmp_path, capsys):
    fx = basic_category
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"detection": {"weight_structural": -1.0}}))
    code = main(["detect", "--config", str(cfg), "--bank", str(fx.bank_manifest),
                 "--queries", str(fx.query_manifests[0]),
                 "--out", str(tmp_path / "x")])
    assert code == 1
    assert "weight_structural" in capsys.readouterr().err


def test_module_entrypoint_subprocess(basic_category):
    fx = basic_category
    proc = subprocess.run(
        [sys.executable, "-m", "compvad.cli", "validate", str(fx.bank_manifest)],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert "ok" in proc.stdout
