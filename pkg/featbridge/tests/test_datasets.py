"""Dataset walking: layouts, labels, mask styles, and filters."""

import pytest
from PIL import Image

from featbridge.config import BridgeConfig
from featbridge.datasets import DatasetError, sanitize_id, walk_dataset
from featbridge.extract import ExtractionJob


def _touch_image(path):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("L", (8, 8), 0).save(path)


def test_walk_categorized_dataset(mini_dataset):
    cats = walk_dataset(mini_dataset, "mvtec_ad")
    assert sorted(cats) == ["gears", "widgets"]
    w = cats["widgets"]
    assert [r.sample_id for r in w.references] == ["train_good_000",
                                                   "train_good_001"]
    assert [q.sample_id for q in w.queries] == [
        "test_good_000", "test_good_001",
        "test_scratch_000", "test_scratch_001"]
    assert all(r.label == "normal" for r in w.references)
    labels = {q.sample_id: q.label for q in w.queries}
    assert labels["test_good_000"] == "normal"
    assert labels["test_scratch_000"] == "anomalous"


def test_mask_suffix_style_resolved_only_for_anomalous(mini_dataset):
    w = walk_dataset(mini_dataset, "mvtec_ad")["widgets"]
    by_id = {q.sample_id: q for q in w.queries}
    assert len(by_id["test_scratch_000"].gt_paths) == 1
    assert by_id["test_scratch_000"].gt_paths[0].name == "000_mask.png"
    assert by_id["test_good_000"].gt_paths == ()


def test_category_filter_selects_and_rejects(mini_dataset):
    cats = walk_dataset(mini_dataset, "mvtec_ad", categories=["widgets"])
    assert sorted(cats) == ["widgets"]
    with pytest.raises(DatasetError, match="not found"):
        walk_dataset(mini_dataset, "mvtec_ad", categories=["bolts"])


def test_subdir_mask_style_unions_all_files(tmp_path):
    root = tmp_path / "loco"
    cat = root / "box"
    _touch_image(cat / "train" / "good" / "000.png")
    _touch_image(cat / "test" / "logical_anomalies" / "000.png")
    gt = cat / "ground_truth" / "logical_anomalies" / "000"
    _touch_image(gt / "000.png")
    _touch_image(gt / "001.png")
    q = walk_dataset(root, "mvtec_loco")["box"].queries[0]
    assert len(q.gt_paths) == 2


def test_flat_kind_is_a_single_category_named_after_it(tmp_path):
    root = tmp_path / "slices"
    _touch_image(root / "train" / "good" / "a.png")
    _touch_image(root / "test" / "good" / "b.png")
    _touch_image(root / "test" / "ungood" / "c.png")
    cats = walk_dataset(root, "chestxray")
    assert sorted(cats) == ["chestxray"]
    q = {r.sample_id: r for r in cats["chestxray"].queries}
    assert q["test_ungood_c"].label == "anomalous"
    with pytest.raises(DatasetError, match="single category"):
        walk_dataset(root, "chestxray", categories=["lungs"])


def test_kinds_without_pixel_annotations_never_report_masks(tmp_path):
    root = tmp_path / "his"
    _touch_image(root / "train" / "good" / "a.png")
    _touch_image(root / "test" / "bad" / "b.png")
    _touch_image(root / "ground_truth" / "bad" / "b.png")
    q = walk_dataset(root, "his")["his"].queries[0]
    assert q.label == "anomalous"
    assert q.gt_paths == ()


def test_unknown_kind_and_bad_roots_rejected(tmp_path):
    with pytest.raises(DatasetError, match="unknown dataset kind"):
        walk_dataset(tmp_path, "imagenet")
    with pytest.raises(DatasetError, match="not a directory"):
        walk_dataset(tmp_path / "missing", "mvtec_ad")
    root = tmp_path / "empty"
    root.mkdir()
    with pytest.raises(DatasetError, match="no category directories"):
        walk_dataset(root, "mvtec_ad")
    cat = root / "obj"
    _touch_image(cat / "train" / "good" / "a.png")
    with pytest.raises(DatasetError, match="missing"):
        walk_dataset(root, "mvtec_ad")


def test_sample_ids_are_sanitized(tmp_path):
    root = tmp_path / "odd"
    cat = root / "obj"
    _touch_image(cat / "train" / "good" / "img 01 (copy).png")
    _touch_image(cat / "test" / "good" / "b.png")
    refs = walk_dataset(root, "mvtec_ad")["obj"].references
    assert refs[0].sample_id == "train_good_img_01_copy"
    assert sanitize_id("///") == "sample"


def test_shot_count_validated_against_references(mini_dataset):
    job = ExtractionJob(dataset_root=mini_dataset, dataset_kind="mvtec_ad",
                        output_root=mini_dataset / "out",
                        config=BridgeConfig(), categories=("widgets",),
                        shots=3)
    with pytest.raises(DatasetError, match="3 shot"):
        job.walk()
