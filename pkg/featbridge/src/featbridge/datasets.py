"""Dataset directory layouts and walking.

Every supported dataset is normalized to one of two shapes on disk:

  categorized   root/<category>/train/good/*.png
                root/<category>/test/<group>/*.png
                root/<category>/ground_truth/<group>/...
  flat          root/train/good/*.png
                root/test/<group>/*.png
                root/ground_truth/<group>/...

where `good` under test holds normal queries and any other group holds
anomalous ones. Flat datasets act as a single category named after the
dataset kind. Ground-truth masks are matched to an anomalous image by one of
three styles: a `<stem>_mask` sibling, a same-stem sibling, or a `<stem>/`
subdirectory whose mask images are unioned (some logical-anomaly ground
truth splits one image's annotation across several files). Kinds without
pixel annotations never report masks even if a ground_truth directory
exists.
"""

import re
from dataclasses import dataclass
from pathlib import Path

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DatasetError(ValueError):
    """Unknown kind, missing directories, or an unusable layout."""


@dataclass(frozen=True)
class KindSpec:
    categorized: bool
    mask_style: str | None     # "suffix" | "same_stem" | "subdir" | None


DATASET_KINDS = {
    "mvtec_ad": KindSpec(categorized=True, mask_style="suffix"),
    "visa": KindSpec(categorized=True, mask_style="same_stem"),
    "mvtec_loco": KindSpec(categorized=True, mask_style="subdir"),
    "brain_mri": KindSpec(categorized=False, mask_style="same_stem"),
    "liver_ct": KindSpec(categorized=False, mask_style="same_stem"),
    "resc": KindSpec(categorized=False, mask_style="same_stem"),
    "oct17": KindSpec(categorized=False, mask_style=None),
    "chestxray": KindSpec(categorized=False, mask_style=None),
    "his": KindSpec(categorized=False, mask_style=None),
}


@dataclass(frozen=True)
class ImageRecord:
    category: str
    sample_id: str
    image_path: Path
    split: str                # "train" | "test"
    label: str                # "normal" | "anomalous"
    gt_paths: tuple           # of Path; empty when no mask applies


@dataclass(frozen=True)
class CategoryRecords:
    category: str
    references: tuple         # train/good ImageRecords, sorted by sample_id
    queries: tuple            # test ImageRecords, sorted by sample_id


def sanitize_id(text):
    out = re.sub(r"[^A-Za-z0-9_.-]+", "_", text)
    return out.strip("_") or "sample"


def _image_files(directory):
    return sorted(p for p in directory.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_EXTS)


def _find_masks(gt_root, group, stem, style):
    if style is None or gt_root is None:
        return ()
    base = gt_root / group
    if style == "subdir":
        d = base / stem
        if d.is_dir():
            return tuple(_image_files(d))
        return ()
    if style == "suffix":
        candidates = sorted(base.glob(f"{stem}_mask.*"))
    else:
        candidates = sorted(base.glob(f"{stem}.*"))
    return tuple(p for p in candidates if p.suffix.lower() in IMAGE_EXTS)[:1]


def _walk_category(cat_root, category, spec):
    train_good = cat_root / "train" / "good"
    test_root = cat_root / "test"
    if not train_good.is_dir():
        raise DatasetError(f"{category}: missing {train_good}")
    if not test_root.is_dir():
        raise DatasetError(f"{category}: missing {test_root}")
    gt_root = cat_root / "ground_truth"
    gt_root = gt_root if gt_root.is_dir() else None

    refs = []
    for img in _image_files(train_good):
        sid = sanitize_id(f"train_good_{img.stem}")
        refs.append(ImageRecord(category, sid, img, "train", "normal", ()))

    queries = []
    for group_dir in sorted(p for p in test_root.iterdir() if p.is_dir()):
        group = group_dir.name
        anomalous = group != "good"
        for img in _image_files(group_dir):
            sid = sanitize_id(f"test_{group}_{img.stem}")
            gt = (_find_masks(gt_root, group, img.stem, spec.mask_style)
                  if anomalous else ())
            queries.append(ImageRecord(
                category, sid, img, "test",
                "anomalous" if anomalous else "normal", gt))

    if not refs:
        raise DatasetError(f"{category}: no reference images under {train_good}")
    if not queries:
        raise DatasetError(f"{category}: no query images under {test_root}")
    for records in (refs, queries):
        ids = [r.sample_id for r in records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"{category}: sample id collision {dupes}")
    return CategoryRecords(category,
                           tuple(sorted(refs, key=lambda r: r.sample_id)),
                           tuple(sorted(queries, key=lambda r: r.sample_id)))


def walk_dataset(root, kind, categories=None):
    """List every reference and query image, grouped by category.

    `categories` optionally restricts categorized datasets; naming a missing
    category is an error rather than a silent empty result.
    """
    if kind not in DATASET_KINDS:
        raise DatasetError(
            f"unknown dataset kind {kind!r}; known: {sorted(DATASET_KINDS)}")
    spec = DATASET_KINDS[kind]
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")

    if spec.categorized:
        found = sorted(p.name for p in root.iterdir()
                       if p.is_dir() and (p / "train").is_dir())
        if not found:
            raise DatasetError(
                f"{root}: no category directories with a train/ split")
        wanted = list(found)
        if categories:
            missing = sorted(set(categories) - set(found))
            if missing:
                raise DatasetError(
                    f"categories {missing} not found in {root} "
                    f"(available: {found})")
            wanted = [c for c in found if c in set(categories)]
        return {c: _walk_category(root / c, c, spec) for c in wanted}

    if categories and list(categories) != [kind]:
        raise DatasetError(
            f"dataset kind {kind!r} has a single category named {kind!r}")
    return {kind: _walk_category(root, kind, spec)}
