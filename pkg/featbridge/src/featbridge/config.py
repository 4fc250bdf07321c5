"""Bridge configuration and prompt sets.

The config JSON names the encoder and mask backends, the model identifiers,
resize geometry, and which prompt set to embed. Prompt sets live in versioned
JSON data files (featbridge/prompts/<id>.json or any path given directly) so
that emitted text features can always be traced back to exact prompt texts.
"""

import json
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path


class BridgeConfigError(ValueError):
    """Invalid bridge config or prompt set."""


@dataclass(frozen=True)
class BridgeConfig:
    backend: str = "offline"
    contrastive_model: str = "CLIP-L/14@336px"
    self_supervised_model: str = "DINOv2-G/14"
    feature_layers: tuple = (6, 12, 18, 24)
    image_size: int = 448
    patch_size: int = 14
    offline_channels: int = 32
    prompt_set: str = "v1"
    device: str = "cpu"
    min_mask_area: int = 64
    max_masks: int = 8
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.backend not in ("offline", "models"):
            raise BridgeConfigError(
                f"backend must be 'offline' or 'models', got {self.backend!r}")
        if self.image_size < 1 or self.patch_size < 1:
            raise BridgeConfigError("image_size and patch_size must be >= 1")
        if self.image_size % self.patch_size != 0:
            raise BridgeConfigError(
                f"image_size {self.image_size} is not a multiple of "
                f"patch_size {self.patch_size}")
        if not self.feature_layers:
            raise BridgeConfigError("feature_layers must be non-empty")
        if len(set(self.feature_layers)) != len(self.feature_layers):
            raise BridgeConfigError(
                f"duplicate feature_layers {list(self.feature_layers)}")
        if any(not isinstance(v, int) or v < 0 for v in self.feature_layers):
            raise BridgeConfigError("feature_layers must be non-negative ints")
        if self.offline_channels < 1:
            raise BridgeConfigError("offline_channels must be >= 1")
        if self.min_mask_area < 1:
            raise BridgeConfigError("min_mask_area must be >= 1")
        if self.max_masks < 1:
            raise BridgeConfigError("max_masks must be >= 1")
        if self.threads < 1:
            raise BridgeConfigError("threads must be >= 1")

    @property
    def grid_size(self):
        return self.image_size // self.patch_size

    @staticmethod
    def from_dict(d, where="bridge config"):
        if not isinstance(d, dict):
            raise BridgeConfigError(f"{where}: expected a JSON object")
        known = {f.name for f in fields(BridgeConfig)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise BridgeConfigError(f"{where}: unknown field(s) {unknown}")
        kwargs = dict(d)
        if "feature_layers" in kwargs:
            v = kwargs["feature_layers"]
            if not isinstance(v, (list, tuple)):
                raise BridgeConfigError(f"{where}: feature_layers must be a list")
            kwargs["feature_layers"] = tuple(v)
        try:
            return BridgeConfig(**kwargs)
        except TypeError as e:
            raise BridgeConfigError(f"{where}: {e}") from e

    @staticmethod
    def from_path(path):
        p = Path(path)
        try:
            d = json.loads(p.read_text())
        except OSError as e:
            raise BridgeConfigError(f"cannot read config {p}: {e}") from e
        except json.JSONDecodeError as e:
            raise BridgeConfigError(f"{p}: invalid JSON: {e}") from e
        return BridgeConfig.from_dict(d, where=str(p))

    def override(self, **kwargs):
        return replace(self, **kwargs)


@dataclass(frozen=True)
class PromptSet:
    id: str
    normal_templates: tuple
    anomalous_templates: tuple

    def render(self, category):
        """Fill templates with the category name, deduplicated in order."""
        normal = _dedup(t.format(category) for t in self.normal_templates)
        anomalous = _dedup(t.format(category) for t in self.anomalous_templates)
        return normal, anomalous


def _dedup(items):
    seen = {}
    for it in items:
        seen.setdefault(it, None)
    return tuple(seen)


def load_prompt_set(name_or_path):
    """Load a prompt set by bundled id ("v1") or by file path."""
    p = Path(name_or_path)
    if p.suffix == ".json":
        try:
            text = p.read_text()
        except OSError as e:
            raise BridgeConfigError(f"cannot read prompt set {p}: {e}") from e
    else:
        ref = resources.files("featbridge").joinpath(
            f"prompts/{name_or_path}.json")
        try:
            text = ref.read_text()
        except (FileNotFoundError, OSError) as e:
            raise BridgeConfigError(
                f"unknown prompt set {name_or_path!r}") from e
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise BridgeConfigError(f"prompt set {name_or_path}: invalid JSON: {e}") from e
    for key in ("id", "normal_templates", "anomalous_templates"):
        if key not in d:
            raise BridgeConfigError(f"prompt set {name_or_path}: missing {key!r}")
    normal = tuple(d["normal_templates"])
    anomalous = tuple(d["anomalous_templates"])
    if not normal or not anomalous:
        raise BridgeConfigError(
            f"prompt set {name_or_path}: template lists must be non-empty")
    if not all(isinstance(t, str) for t in normal + anomalous):
        raise BridgeConfigError(
            f"prompt set {name_or_path}: templates must be strings")
    return PromptSet(str(d["id"]), normal, anomalous)
