"""Frozen vision backbones and how to pull patch tokens out of them.

Each registry entry knows its patch size, feature width, preprocessing
stats, and how to run the encoder so that only the spatial patch tokens
survive (class/global tokens are dropped; alignment is per-location).

``pretrained=False`` builds the architecture from its config with a fixed
torch seed -- fully offline and deterministic, which is what the format
round-trip tests exercise.  ``tiny-p4`` is a miniature patch encoder for
fast tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass
class Backbone:
    name: str
    patch: int
    width: int
    mean: tuple
    std: tuple
    model: torch.nn.Module
    runner: callable  # (model, pixel_values) -> (n, tokens, width)
    pretrained: bool

    @torch.no_grad()
    def patch_tokens(self, pixel_values):
        tokens = self.runner(self.model, pixel_values)
        n, count, width = tokens.shape
        if width != self.width:
            raise RuntimeError(f"{self.name}: expected width {self.width}, got {width}")
        return tokens


class TinyPatchEncoder(torch.nn.Module):
    """Deterministic stand-in backbone: conv patchify + a token MLP."""

    def __init__(self, patch=4, width=32, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.patchify = torch.nn.Conv2d(3, width, kernel_size=patch, stride=patch)
        self.norm = torch.nn.LayerNorm(width)
        self.mix = torch.nn.Linear(width, width)

    def forward(self, x):
        tok = self.patchify(x).flatten(2).transpose(1, 2)
        return self.mix(torch.nn.functional.gelu(self.norm(tok)))


def _load_transformers(config_cls, model_cls, hub_id, pretrained, seed=0, **config_kw):
    if pretrained:
        return model_cls.from_pretrained(hub_id)
    torch.manual_seed(seed)
    return model_cls(config_cls(**config_kw))


def _run_dinov2(model, pixels):
    # dinov2 interpolates its position grid for any input size; token 0 is CLS
    return model(pixel_values=pixels).last_hidden_state[:, 1:, :]


def _run_mae(model, pixels):
    # mask_ratio=0 keeps every token, but the masking gather still permutes
    # them by a noise argsort; monotone noise pins the identity order
    b = pixels.shape[0]
    tokens = (pixels.shape[2] // model.config.patch_size) * (pixels.shape[3] // model.config.patch_size)
    noise = torch.arange(tokens, dtype=torch.float32).unsqueeze(0).expand(b, -1)
    out = model(pixel_values=pixels, noise=noise, interpolate_pos_encoding=True)
    return out.last_hidden_state[:, 1:, :]


def _run_clip(model, pixels):
    return model(pixel_values=pixels, interpolate_pos_encoding=True).last_hidden_state[:, 1:, :]


def _run_tiny(model, pixels):
    return model(pixels)


def load_backbone(name, pretrained=True):
    """Instantiate a registry backbone in eval mode."""
    if name not in REGISTRY:
        known = ", ".join(sorted(REGISTRY))
        raise ValueError(f"unknown backbone {name!r}; available: {known}")
    spec = REGISTRY[name]
    model = spec["build"](pretrained)
    model.eval()
    return Backbone(
        name=name, patch=spec["patch"], width=spec["width"], mean=spec["mean"],
        std=spec["std"], model=model, runner=spec["runner"], pretrained=pretrained,
    )


def _build_dinov2_small(pretrained):
    from transformers import Dinov2Config, Dinov2Model

    return _load_transformers(
        Dinov2Config, Dinov2Model, "facebook/dinov2-small", pretrained,
        hidden_size=384, num_hidden_layers=12, num_attention_heads=6, patch_size=14,
    )


def _build_dinov2_base(pretrained):
    from transformers import Dinov2Config, Dinov2Model

    return _load_transformers(
        Dinov2Config, Dinov2Model, "facebook/dinov2-base", pretrained,
        hidden_size=768, num_hidden_layers=12, num_attention_heads=12, patch_size=14,
    )


def _build_mae_base(pretrained):
    from transformers import ViTMAEConfig, ViTMAEModel

    model = _load_transformers(
        ViTMAEConfig, ViTMAEModel, "facebook/vit-mae-base", pretrained,
        hidden_size=768, num_hidden_layers=12, num_attention_heads=12, patch_size=16,
        mask_ratio=0.0,
    )
    model.config.mask_ratio = 0.0  # keep every patch token
    return model


def _build_clip_b16(pretrained):
    from transformers import CLIPVisionConfig, CLIPVisionModel

    return _load_transformers(
        CLIPVisionConfig, CLIPVisionModel, "openai/clip-vit-base-patch16", pretrained,
        hidden_size=768, num_hidden_layers=12, num_attention_heads=12, patch_size=16,
    )


def _build_tiny(pretrained):
    # no published weights; always the seeded random encoder
    return TinyPatchEncoder(patch=4, width=32, seed=0)


REGISTRY = {
    "dinov2-small": {
        "patch": 14, "width": 384, "mean": IMAGENET_MEAN, "std": IMAGENET_STD,
        "build": _build_dinov2_small, "runner": _run_dinov2,
    },
    "dinov2-base": {
        "patch": 14, "width": 768, "mean": IMAGENET_MEAN, "std": IMAGENET_STD,
        "build": _build_dinov2_base, "runner": _run_dinov2,
    },
    "mae-base": {
        "patch": 16, "width": 768, "mean": IMAGENET_MEAN, "std": IMAGENET_STD,
        "build": _build_mae_base, "runner": _run_mae,
    },
    "clip-b16": {
        "patch": 16, "width": 768, "mean": CLIP_MEAN, "std": CLIP_STD,
        "build": _build_clip_b16, "runner": _run_clip,
    },
    "tiny-p4": {
        "patch": 4, "width": 32, "mean": (0.5, 0.5, 0.5), "std": (0.5, 0.5, 0.5),
        "build": _build_tiny, "runner": _run_tiny,
    },
}
