"""Candidate mask backends.

`candidate_masks(image, hint)` returns an (M, H, W) uint8 stack of binary
masks, possibly with M = 0; the manifest writer maps an empty stack to a null
candidate path, which the engine's segmenter handles with its fallback
branches. `hint` is free text describing what to look for (the dataset
category name in practice); backends may ignore it.

The offline backend estimates the background from the image border and keeps
connected components that stand out from it; it covers plain objects on
roughly uniform backgrounds, which is all the test fixtures need. The models
backend chains text-grounded detection with a promptable mask generator and
needs torch, transformers, and the model weights on disk.
"""

import numpy as np
from scipy import ndimage

from .encoders import BridgeDependencyError


class OfflineMaskBackend:
    """Threshold against border-estimated background, split into components."""

    def __init__(self, config):
        self.config = config

    def candidate_masks(self, image, hint=None):
        cfg = self.config
        if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
            raise ValueError(
                f"expected uint8 HxWx3 image, got {image.dtype} {image.shape}")
        gray = image.astype(np.float64).mean(axis=2)
        border = max(2, image.shape[0] // 56)
        frame = np.concatenate([
            gray[:border, :].ravel(), gray[-border:, :].ravel(),
            gray[:, :border].ravel(), gray[:, -border:].ravel()])
        bg_mean = frame.mean()
        bg_std = frame.std()
        threshold = max(6.0 * bg_std, 16.0)
        foreground = np.abs(gray - bg_mean) > threshold
        labels, count = ndimage.label(foreground)
        masks = []
        for lab in range(1, count + 1):
            mask = labels == lab
            if mask.sum() >= cfg.min_mask_area:
                masks.append(mask.astype(np.uint8))
        masks.sort(key=lambda m: int(m.sum()), reverse=True)
        masks = masks[:cfg.max_masks]
        if not masks:
            return np.zeros((0,) + gray.shape, dtype=np.uint8)
        return np.stack(masks)


class GroundedMaskBackend:
    """Text-grounded detection boxes refined into masks.

    The grounding text is the `hint` (category name) rather than an image
    tagger's output; with no tagger configured this keeps the chain usable
    with two models. Box and mask thresholds are fixed at common defaults.
    """

    DETECTOR_ID = "IDEA-Research/grounding-dino-base"
    SEGMENTER_ID = "facebook/sam-vit-huge"
    BOX_THRESHOLD = 0.3
    TEXT_THRESHOLD = 0.25

    def __init__(self, config):
        self.config = config
        try:
            import torch
            from transformers import (AutoProcessor,
                                      GroundingDinoForObjectDetection,
                                      SamModel, SamProcessor)
        except ImportError as e:
            raise BridgeDependencyError(
                "the models mask backend needs torch and transformers; "
                "install the 'models' extra or use the offline backend") from e
        self._torch = torch
        dev = config.device
        try:
            self.det = GroundingDinoForObjectDetection.from_pretrained(
                self.DETECTOR_ID).to(dev).eval()
            self.det_proc = AutoProcessor.from_pretrained(self.DETECTOR_ID)
            self.seg = SamModel.from_pretrained(self.SEGMENTER_ID).to(dev).eval()
            self.seg_proc = SamProcessor.from_pretrained(self.SEGMENTER_ID)
        except Exception as e:
            raise BridgeDependencyError(
                f"cannot load segmentation model weights ({e}); use the "
                "offline backend where weights are unavailable") from e

    def candidate_masks(self, image, hint=None):
        torch = self._torch
        cfg = self.config
        h, w = image.shape[:2]
        text = f"{hint or 'object'}."
        with torch.no_grad():
            inputs = self.det_proc(images=image, text=text,
                                   return_tensors="pt").to(cfg.device)
            out = self.det(**inputs)
            results = self.det_proc.post_process_grounded_object_detection(
                out, inputs["input_ids"], threshold=self.BOX_THRESHOLD,
                text_threshold=self.TEXT_THRESHOLD,
                target_sizes=[(h, w)])[0]
            boxes = results["boxes"].cpu().tolist()
            if not boxes:
                return np.zeros((0, h, w), dtype=np.uint8)
            boxes = boxes[:cfg.max_masks]
            seg_in = self.seg_proc(image, input_boxes=[boxes],
                                   return_tensors="pt").to(cfg.device)
            seg_out = self.seg(**seg_in, multimask_output=False)
            masks = self.seg_proc.image_processor.post_process_masks(
                seg_out.pred_masks.cpu(),
                seg_in["original_sizes"].cpu(),
                seg_in["reshaped_input_sizes"].cpu())[0]
        stack = masks[:, 0].numpy().astype(np.uint8)
        keep = [m for m in stack if m.sum() >= cfg.min_mask_area]
        if not keep:
            return np.zeros((0, h, w), dtype=np.uint8)
        return np.stack(keep)


def get_mask_backend(config):
    if config.backend == "offline":
        return OfflineMaskBackend(config)
    return GroundedMaskBackend(config)
