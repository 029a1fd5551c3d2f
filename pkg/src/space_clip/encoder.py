"""Frozen vision-transformer backbones exposed as hidden-state extractors.

Two backbones share one contract: given a batch of prepared 224x224 images
they return all 13 hidden states (index 0 is the patch-embedding output,
index 12 the last transformer layer) with the class token at position 0.
:func:`extract_features` strips the class token and packs the requested
levels into a :class:`FeatureBundle`.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class BackboneLoadError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    model_id: str = "openai/clip-vit-base-patch16"
    patch_size: int = 16
    input_side: int = 224
    hidden_dim: int = 768
    num_hidden_states: int = 13
    mean: tuple[float, float, float] = CLIP_MEAN
    std: tuple[float, float, float] = CLIP_STD

    def __post_init__(self):
        if self.input_side % self.patch_size:
            raise ValueError(
                f"input_side {self.input_side} not divisible by patch_size {self.patch_size}"
            )

    @property
    def grid_side(self) -> int:
        return self.input_side // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side**2


@dataclass
class FeatureBundle:
    states: dict[int, torch.Tensor]  # index -> (B, num_patches, hidden_dim)
    cls_vector: torch.Tensor  # (B, hidden_dim)
    grid_side: int = 14

    def __post_init__(self):
        shapes = {tuple(t.shape) for t in self.states.values()}
        if len(shapes) > 1:
            raise ValueError(f"token matrices have differing shapes: {sorted(shapes)}")
        for t in self.states.values():
            if t.shape[-2] != self.grid_side**2:
                raise ValueError(
                    f"token count {t.shape[-2]} != grid_side^2 = {self.grid_side ** 2}"
                )

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.states[index]


def prepare_encoder_input(
    image: torch.Tensor, mode: str = "center_crop", spec: BackboneSpec = BackboneSpec()
) -> torch.Tensor:
    """Crop or resize ``(B, 3, H, W)`` images in [0, 1] to the backbone input and normalize."""
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    side = spec.input_side
    h, w = image.shape[-2:]
    if mode == "center_crop":
        if h < side:
            raise ValueError(f"image height {h} is smaller than the {side}px center crop")
        if w < side:
            raise ValueError(f"image width {w} is smaller than the {side}px center crop")
        top = (h - side) // 2
        left = (w - side) // 2
        x = image[..., top : top + side, left : left + side]
    elif mode == "resize":
        x = F.interpolate(image, size=(side, side), mode="bilinear", align_corners=False)
    else:
        raise ValueError(f"unknown encoder input mode {mode!r}")
    mean = torch.tensor(spec.mean, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    std = torch.tensor(spec.std, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    x = (x - mean) / std
    return x.squeeze(0) if squeeze else x


class Backbone(nn.Module):
    """Base class: subclasses implement ``hidden_states`` and set ``spec``."""

    spec: BackboneSpec

    def freeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # always eval: the backbone is a fixed feature extractor
        return super().train(False)

    def hidden_states(self, pixels: torch.Tensor) -> list[torch.Tensor]:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError


class StubBackbone(Backbone):
    """Seeded random ViT-shaped feature extractor for fast tests.

    Weights are drawn from a PCG64 stream so a given seed yields the same
    function on every platform and library version. Each of the 12 layers is
    a residual token-mixing step followed by a residual channel MLP, so deeper
    states depend on more of the image, like a real transformer.
    """

    def __init__(self, seed: int = 7, hidden_dim: int = 64, num_layers: int = 12):
        super().__init__()
        self.seed = seed
        self.spec = BackboneSpec(
            model_id=f"stub:{seed}", hidden_dim=hidden_dim, num_hidden_states=num_layers + 1
        )
        rng = np.random.default_rng(seed)
        d = hidden_dim
        patch_in = 3 * self.spec.patch_size**2
        n = self.spec.num_patches + 1

        def tensor(*shape, scale):
            return torch.from_numpy(rng.standard_normal(shape) * scale).float()

        self.register_buffer("patch_weight", tensor(patch_in, d, scale=patch_in**-0.5))
        self.register_buffer("cls_token", tensor(d, scale=0.5))
        self.register_buffer("pos_embed", tensor(n, d, scale=0.5))
        self.register_buffer("token_mix", tensor(num_layers, n, n, scale=n**-0.5))
        self.register_buffer("channel_in", tensor(num_layers, d, d, scale=d**-0.5))
        self.register_buffer("channel_out", tensor(num_layers, d, d, scale=d**-0.5))
        self.num_layers = num_layers
        self.freeze()

    def hidden_states(self, pixels: torch.Tensor) -> list[torch.Tensor]:
        p = self.spec.patch_size
        b = pixels.shape[0]
        patches = F.unfold(pixels, kernel_size=p, stride=p).transpose(1, 2)  # (B, 196, 3*p*p)
        x = patches @ self.patch_weight
        x = torch.cat([self.cls_token.expand(b, 1, -1), x], dim=1) + self.pos_embed
        states = [x]
        for i in range(self.num_layers):
            h = F.layer_norm(x, x.shape[-1:])
            x = x + 0.5 * torch.tanh(torch.einsum("nm,bmd->bnd", self.token_mix[i], h))
            h = F.layer_norm(x, x.shape[-1:])
            x = x + 0.5 * torch.tanh(h @ self.channel_in[i]) @ self.channel_out[i]
            states.append(x)
        return states

    def describe(self) -> dict:
        return {"kind": "stub", "stub_seed": self.seed, "stub_hidden_dim": self.spec.hidden_dim}


class ClipBackbone(Backbone):
    """Wraps a Hugging Face ``CLIPVisionModel``.

    ``model`` may be passed directly (used by tests with a randomly initialized
    config); otherwise weights are loaded from ``model_id``, which can be a hub
    identifier or a local directory. ``SPACE_CLIP_BACKBONE_DIR`` sets the cache.
    """

    def __init__(self, model_id: str = "openai/clip-vit-base-patch16", model: nn.Module | None = None):
        super().__init__()
        if model is None:
            from transformers import CLIPVisionModel

            cache_dir = os.environ.get("SPACE_CLIP_BACKBONE_DIR")
            try:
                model = CLIPVisionModel.from_pretrained(model_id, cache_dir=cache_dir)
            except Exception as exc:
                where = cache_dir or "the default hub cache"
                raise BackboneLoadError(
                    f"could not load backbone weights {model_id!r} (cache: {where}): {exc}"
                ) from exc
        self.model = model
        cfg = model.config
        self.model_id = model_id
        self.spec = BackboneSpec(
            model_id=model_id,
            patch_size=cfg.patch_size,
            input_side=cfg.image_size,
            hidden_dim=cfg.hidden_size,
            num_hidden_states=cfg.num_hidden_layers + 1,
        )
        self.freeze()

    def hidden_states(self, pixels: torch.Tensor) -> list[torch.Tensor]:
        out = self.model(pixel_values=pixels, output_hidden_states=True)
        return list(out.hidden_states)

    def describe(self) -> dict:
        return {"kind": "clip", "model_id": self.model_id}


def stub_backbone(seed: int = 7, hidden_dim: int = 64) -> StubBackbone:
    return StubBackbone(seed=seed, hidden_dim=hidden_dim)


def extract_features(backbone: Backbone, pixels: torch.Tensor, indices) -> FeatureBundle:
    """Run the frozen backbone on prepared pixels and collect the requested levels."""
    valid = range(backbone.spec.num_hidden_states)
    indices = sorted(set(int(i) for i in indices))
    bad = [i for i in indices if i not in valid]
    if bad:
        raise IndexError(f"hidden-state indices {bad} out of range; valid range is [0, {valid[-1]}]")
    with torch.no_grad():
        states = backbone.hidden_states(pixels)
    return FeatureBundle(
        states={i: states[i][:, 1:, :] for i in indices},
        cls_vector=states[-1][:, 0, :],
        grid_side=backbone.spec.grid_side,
    )


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(list(module.named_parameters()) + list(module.named_buffers())):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_backbone(cfg) -> Backbone:
    """Construct a backbone from a :class:`~space_clip.config.BackboneConfig`."""
    if cfg.kind == "stub":
        return stub_backbone(cfg.stub_seed, cfg.stub_hidden_dim)
    return ClipBackbone(cfg.model_id)


def tensor_checksum(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


__all__ = [
    "BackboneSpec",
    "FeatureBundle",
    "prepare_encoder_input",
    "extract_features",
    "stub_backbone",
    "StubBackbone",
    "ClipBackbone",
    "BackboneLoadError",
    "build_backbone",
    "parameter_checksum",
    "tensor_checksum",
]
