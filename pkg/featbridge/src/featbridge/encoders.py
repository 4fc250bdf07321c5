"""Feature encoder backends.

Two backends share one interface: `patch_grids(image)` returns the per-level
patch feature maps plus the clustering feature map for a resized RGB image,
and `text_pair(category, prompt_set)` returns the two unit-normalized text
embeddings (normal row first). Class tokens never appear in a grid; only
spatial tokens do.

The "offline" backend is a deterministic stand-in for the real encoders:
per-cell image statistics pushed through a seeded random projection. It needs
no model weights, is bit-reproducible for a given config, and produces
feature maps with the exact geometry the real models would (image_size /
patch_size grid). The "models" backend wraps pretrained vision transformers
through the transformers library and is only usable where torch and the
model weights are available; its outputs are reproducible within 1e-4 per
element across runs on one device, which is the tolerance documented for
downstream comparisons.
"""

import hashlib

import numpy as np

from .config import load_prompt_set


class BridgeDependencyError(RuntimeError):
    """A backend needs packages or weights that are not available."""


def _seed_from(text):
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _rng(text):
    return np.random.default_rng(_seed_from(text))


def level_tag(layer):
    return f"lv{layer:02d}"


class OfflineFeatureBackend:
    """Seeded projections of per-cell image statistics.

    Each (model, layer) stream gets its own fixed random projection, so the
    levels are genuinely different views of the image and two images differ
    wherever their local statistics differ.
    """

    def __init__(self, config):
        self.config = config

    def _cell_stats(self, image):
        """Per-cell statistics, (g*g, 10) float64 in roughly [-1, 1]."""
        cfg = self.config
        g, p = cfg.grid_size, cfg.patch_size
        img = image.astype(np.float64) / 255.0
        cells = img.reshape(g, p, g, p, 3)
        mean_rgb = cells.mean(axis=(1, 3)).reshape(g * g, 3)
        std_rgb = cells.std(axis=(1, 3)).reshape(g * g, 3)
        gray = img.mean(axis=2)
        dx = np.zeros_like(gray)
        dy = np.zeros_like(gray)
        dx[:, 1:] = np.abs(np.diff(gray, axis=1))
        dy[1:, :] = np.abs(np.diff(gray, axis=0))
        grad_x = dx.reshape(g, p, g, p).mean(axis=(1, 3)).reshape(g * g, 1)
        grad_y = dy.reshape(g, p, g, p).mean(axis=(1, 3)).reshape(g * g, 1)
        rows, cols = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
        pos_r = ((rows + 0.5) / g).reshape(g * g, 1)
        pos_c = ((cols + 0.5) / g).reshape(g * g, 1)
        return np.concatenate(
            [mean_rgb, std_rgb, grad_x, grad_y, pos_r, pos_c], axis=1)

    def _project(self, stats, stream):
        cfg = self.config
        rng = _rng(f"{stream}|seed{cfg.seed}")
        dim = stats.shape[1]
        w = rng.standard_normal((dim, cfg.offline_channels)) / np.sqrt(dim)
        b = 0.1 * rng.standard_normal(cfg.offline_channels)
        g = cfg.grid_size
        out = np.tanh(stats @ w + b)
        return out.reshape(g, g, cfg.offline_channels).astype(np.float32)

    def patch_grids(self, image):
        cfg = self.config
        expect = (cfg.image_size, cfg.image_size, 3)
        if image.shape != expect or image.dtype != np.uint8:
            raise ValueError(
                f"expected uint8 image of dims {expect}, got "
                f"{image.dtype} {image.shape}")
        stats = self._cell_stats(image)
        levels = {}
        for layer in cfg.feature_layers:
            stream = f"feat|{cfg.contrastive_model}|layer{layer}"
            levels[level_tag(layer)] = self._project(stats, stream)
        cluster = self._project(stats, f"cluster|{cfg.self_supervised_model}")
        return levels, cluster

    def _text_vector(self, prompt):
        cfg = self.config
        rng = _rng(f"text|{cfg.contrastive_model}|{prompt}")
        v = rng.standard_normal(cfg.offline_channels)
        return v / np.linalg.norm(v)

    def text_pair(self, category, prompt_set):
        normal, anomalous = prompt_set.render(category)
        rows = []
        for prompts in (normal, anomalous):
            mean = np.mean([self._text_vector(p) for p in prompts], axis=0)
            norm = np.linalg.norm(mean)
            if norm == 0.0:
                raise ValueError("prompt ensemble averaged to a zero vector")
            rows.append(mean / norm)
        return np.stack(rows).astype(np.float32)


class ModelFeatureBackend:
    """Pretrained vision transformers through the transformers library.

    Patch tokens from the configured intermediate layers of the contrastive
    encoder form the feature levels (each token passed through the final
    layernorm and the visual projection so text and patch features share an
    embedding space); final-layer patch tokens of the self-supervised
    encoder form the clustering map. Class tokens are dropped everywhere.
    """

    MODEL_IDS = {
        "CLIP-L/14@336px": "openai/clip-vit-large-patch14-336",
        "DINOv2-G/14": "facebook/dinov2-giant",
    }

    def __init__(self, config):
        self.config = config
        try:
            import torch
            from transformers import AutoImageProcessor, AutoModel, CLIPModel
            from transformers import CLIPProcessor
        except ImportError as e:
            raise BridgeDependencyError(
                "the models backend needs torch and transformers; install "
                "the 'models' extra or use the offline backend") from e
        self._torch = torch
        clip_id = self.MODEL_IDS.get(config.contrastive_model,
                                     config.contrastive_model)
        ssl_id = self.MODEL_IDS.get(config.self_supervised_model,
                                    config.self_supervised_model)
        try:
            self.clip = CLIPModel.from_pretrained(clip_id).to(config.device).eval()
            self.clip_proc = CLIPProcessor.from_pretrained(clip_id)
            self.ssl = AutoModel.from_pretrained(ssl_id).to(config.device).eval()
            self.ssl_proc = AutoImageProcessor.from_pretrained(ssl_id)
        except Exception as e:
            raise BridgeDependencyError(
                f"cannot load model weights ({e}); use the offline backend "
                "where weights are unavailable") from e

    def _grid_from_tokens(self, tokens, side):
        arr = tokens.detach().cpu().numpy().astype(np.float32)
        n, c = arr.shape
        if n != side * side:
            raise ValueError(f"{n} patch tokens do not fill a {side}x{side} grid")
        return arr.reshape(side, side, c)

    def patch_grids(self, image):
        torch = self._torch
        cfg = self.config
        side = cfg.grid_size
        with torch.no_grad():
            pix = self.clip_proc(images=image, return_tensors="pt",
                                 do_resize=True,
                                 size={"height": cfg.image_size,
                                       "width": cfg.image_size})
            pix = {k: v.to(cfg.device) for k, v in pix.items()
                   if k == "pixel_values"}
            vision = self.clip.vision_model(output_hidden_states=True, **pix)
            levels = {}
            for layer in cfg.feature_layers:
                hidden = vision.hidden_states[layer][0]
                tokens = self.clip.vision_model.post_layernorm(hidden[1:])
                tokens = self.clip.visual_projection(tokens)
                levels[level_tag(layer)] = self._grid_from_tokens(tokens, side)

            pix = self.ssl_proc(images=image, return_tensors="pt",
                                size={"height": cfg.image_size,
                                      "width": cfg.image_size})
            pix = {k: v.to(cfg.device) for k, v in pix.items()
                   if k == "pixel_values"}
            out = self.ssl(**pix)
            cluster = self._grid_from_tokens(out.last_hidden_state[0][1:], side)
        return levels, cluster

    def text_pair(self, category, prompt_set):
        torch = self._torch
        normal, anomalous = prompt_set.render(category)
        rows = []
        with torch.no_grad():
            for prompts in (normal, anomalous):
                toks = self.clip_proc(text=list(prompts), return_tensors="pt",
                                      padding=True)
                toks = {k: v.to(self.config.device) for k, v in toks.items()}
                emb = self.clip.get_text_features(**toks)
                emb = emb / emb.norm(dim=-1, keepdim=True)
                mean = emb.mean(dim=0)
                mean = mean / mean.norm()
                rows.append(mean.cpu().numpy())
        return np.stack(rows).astype(np.float32)


def get_feature_backend(config):
    if config.backend == "offline":
        return OfflineFeatureBackend(config)
    return ModelFeatureBackend(config)


def encode_text_prompts(category, config, backend=None):
    """Embed the configured prompt set for one category, (2, C) float32."""
    backend = backend or get_feature_backend(config)
    prompt_set = load_prompt_set(config.prompt_set)
    pair = backend.text_pair(category, prompt_set)
    if pair.shape[0] != 2 or pair.ndim != 2:
        raise ValueError(f"text backend returned dims {pair.shape}")
    return pair
