"""Training-free few-shot visual anomaly detection over precomputed features.

The package scores query images against a small bank of normal references:
images are segmented into components by fusing candidate masks with k-means
cluster masks, patches are matched against pooled normal patches (globally,
per component, and against a text-embedding contrast), and whole components
are matched by graph-aggregated deep embeddings plus geometry.  Structural
and logical maps are fused into the final anomaly map.
"""

from .component_segmenter import (ComponentMaskSet, SegmenterConfig,
                                  build_cluster_masks, fit_centroids, segment)
from .evaluation import (EvalRecord, EvalReport, EvaluationError, emit_outputs,
                         evaluate_dataset, roc_auc)
from .pipeline import (AdapterWeights, ConfigError, DetectionConfig,
                       DetectionResult, ReferenceBank, apply_adapter,
                       build_reference_bank, detect, load_adapter)
from .structural_scorer import ScorerConfig
from .tensor_store import (ManifestError, ReferenceBankManifest, Sample,
                           SampleManifest, TensorFormatError, load_sample,
                           read_tensor, write_tensor)

__version__ = "0.1.0"

__all__ = [
    "AdapterWeights", "ComponentMaskSet", "ConfigError", "DetectionConfig",
    "DetectionResult", "EvalRecord", "EvalReport", "EvaluationError",
    "ManifestError", "ReferenceBank", "ReferenceBankManifest", "Sample",
    "SampleManifest", "ScorerConfig", "SegmenterConfig", "TensorFormatError",
    "apply_adapter", "build_cluster_masks", "build_reference_bank", "detect",
    "emit_outputs", "evaluate_dataset", "fit_centroids", "load_adapter",
    "load_sample", "read_tensor", "roc_auc", "segment", "write_tensor",
    "__version__",
]
