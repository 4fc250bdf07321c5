"""Feature extraction bridge for the anomaly detection engine.

Walks image datasets, runs encoder and segmentation backends, and writes the
tensor files and JSON manifests the engine consumes. The bridge computes no
anomaly scores; its whole contract is the engine's file formats, and every
file it emits is expected to pass the engine's `validate` command.
"""

from .config import BridgeConfig, BridgeConfigError, PromptSet, load_prompt_set
from .datasets import (DATASET_KINDS, CategoryRecords, DatasetError,
                       ImageRecord, walk_dataset)
from .encoders import (BridgeDependencyError, OfflineFeatureBackend,
                       encode_text_prompts, get_feature_backend)
from .extract import (ExtractionError, ExtractionJob, build_manifests,
                      extract_candidate_masks, extract_features, extract_text,
                      load_gt_mask, load_image)
from .masks import GroundedMaskBackend, OfflineMaskBackend, get_mask_backend
from .tensor_io import (TensorIOError, atomic_write_bytes, atomic_write_json,
                        parse_tensor, read_tensor, read_tensor_header,
                        tensor_bytes, write_tensor)

__version__ = "0.1.0"

__all__ = [
    "BridgeConfig", "BridgeConfigError", "BridgeDependencyError",
    "CategoryRecords", "DATASET_KINDS", "DatasetError", "ExtractionError",
    "ExtractionJob", "GroundedMaskBackend", "ImageRecord",
    "OfflineFeatureBackend", "OfflineMaskBackend", "PromptSet",
    "TensorIOError", "atomic_write_bytes", "atomic_write_json",
    "build_manifests", "encode_text_prompts", "extract_candidate_masks",
    "extract_features", "extract_text", "get_feature_backend",
    "get_mask_backend", "load_gt_mask", "load_image", "load_prompt_set",
    "parse_tensor", "read_tensor", "read_tensor_header", "tensor_bytes",
    "walk_dataset", "write_tensor", "__version__",
]
