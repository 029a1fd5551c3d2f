"""The dense predictor: dual-pathway decoder, fusion stages, and depth head.

All backbone levels share the 14x14 patch grid. Stage ``k`` (1-based) works at
``14 * 2**(k-1)`` and emits ``14 * 2**k``; semantic and structural skips are
projected to the stage width and bilinearly resized to the working resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError, ModelConfig
from .encoder import Backbone, FeatureBundle, extract_features, prepare_encoder_input
from .film import FilmBank


@dataclass
class DepthMap:
    """Metric depth in meters with a validity mask, both ``(rows, cols)`` numpy arrays."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise ValueError(f"values {self.values.shape} and mask {self.valid.shape} differ in shape")

    @classmethod
    def dense(cls, values) -> "DepthMap":
        values = np.asarray(values)
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def tokens_to_grid(tokens: torch.Tensor, grid_side: int) -> torch.Tensor:
    """``(B, N, C)`` row-major tokens -> ``(B, C, side, side)`` map. ``(N, C)`` -> ``(C, side, side)``."""
    n = tokens.shape[-2]
    if n != grid_side * grid_side:
        raise ValueError(f"token count {n} != grid_side^2 = {grid_side * grid_side}")
    grid = tokens.unflatten(-2, (grid_side, grid_side))  # (..., side, side, C)
    return grid.movedim(-1, -3)


def grid_to_tokens(grid: torch.Tensor) -> torch.Tensor:
    return grid.movedim(-3, -1).flatten(-3, -2)


def _resize(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ResidualBlock(nn.Module):
    """GN -> GELU -> conv3x3 -> dropout -> GN -> GELU -> conv3x3, plus identity.

    The second convolution is zero-initialized so the block starts as the identity.
    Used for both the semantic and the structural blocks.
    """

    def __init__(self, channels: int, dropout: float = 0.1, groups: int = 8):
        super().__init__()
        self.channels = channels
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.dropout = nn.Dropout(dropout)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.GELU()
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"block expects {self.channels} channels, got {x.shape[1]}")
        h = self.conv1(self.act(self.norm1(x)))
        h = self.dropout(h)
        h = self.conv2(self.act(self.norm2(h)))
        return x + h


SemanticBlock = ResidualBlock
StructuralBlock = ResidualBlock


class PredictionHead(nn.Module):
    def __init__(self, channels: int, cfg: ModelConfig):
        super().__init__()
        self.channels = channels
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.GELU()
        self.out = nn.Conv2d(channels, 1, 1)
        self.min_depth = cfg.min_depth
        self.max_depth = cfg.max_depth
        self.output_size = tuple(cfg.output_size)

    def logits_to_depth(self, logits: torch.Tensor) -> torch.Tensor:
        return self.min_depth + torch.sigmoid(logits) * (self.max_depth - self.min_depth)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"head expects {self.channels} channels, got {x.shape[1]}")
        depth = self.logits_to_depth(self.out(self.act(self.conv(x))))
        return _resize(depth, self.output_size).squeeze(1)


class DensePredictor(nn.Module):
    def __init__(self, hidden_dim: int, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.decoder_channels
        self.semantic_proj = nn.ModuleList(nn.Conv2d(hidden_dim, c, 1) for c in ch)
        fusion_in = []
        for k, c in enumerate(ch):
            n = c if k == 0 else ch[k - 1] + c + (c if cfg.use_structural else 0)
            fusion_in.append(n)
        self.fusion = nn.ModuleList(nn.Conv2d(n, c, 3, padding=1) for n, c in zip(fusion_in, ch))
        self.semantic_blocks = nn.ModuleList(
            SemanticBlock(c, cfg.dropout, cfg.norm_groups) for c in ch
        )
        self.head = PredictionHead(ch[-1], cfg)
        if cfg.use_structural:
            self.structural_proj = nn.ModuleList(nn.Conv2d(hidden_dim, c, 1) for c in ch[1:])
            self.structural_blocks = nn.ModuleList(
                StructuralBlock(c, cfg.dropout, cfg.norm_groups) for c in ch[1:]
            )
        else:
            self.structural_proj = None
            self.structural_blocks = None

    def structural_skip(self, grid: torch.Tensor, stage: int) -> torch.Tensor:
        i = stage - 2
        return self.structural_blocks[i](self.structural_proj[i](grid))

    def fuse_stage(
        self,
        prev: torch.Tensor | None,
        semantic_grid: torch.Tensor | None,
        structural_grid: torch.Tensor | None,
        stage: int,
    ) -> torch.Tensor:
        """Run one coarse-to-fine stage and return its 2x-upsampled output.

        ``semantic_grid``/``structural_grid`` are backbone-width maps on the
        patch grid (FiLM already applied to the semantic one).
        """
        if not 1 <= stage <= self.cfg.num_stages:
            raise ConfigError(f"stage {stage} out of range [1, {self.cfg.num_stages}]")
        if semantic_grid is None:
            raise ConfigError(f"stage {stage}: missing semantic skip")
        if stage == 1:
            if prev is not None:
                raise ConfigError("stage 1: takes no previous decoder state")
            size = tuple(semantic_grid.shape[-2:])
        else:
            if prev is None:
                raise ConfigError(f"stage {stage}: missing previous decoder state")
            size = tuple(prev.shape[-2:])
        parts = [] if prev is None else [prev]
        parts.append(_resize(self.semantic_proj[stage - 1](semantic_grid), size))
        if self.cfg.use_structural and stage > 1:
            if structural_grid is None:
                raise ConfigError(f"stage {stage}: missing structural skip")
            parts.append(_resize(self.structural_skip(structural_grid, stage), size))
        elif structural_grid is not None:
            raise ConfigError(f"stage {stage}: unexpected structural skip")
        x = self.fusion[stage - 1](torch.cat(parts, dim=1))
        x = self.semantic_blocks[stage - 1](x)
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

    def forward(self, semantic: list[torch.Tensor], structural: list[torch.Tensor] | None = None,
                return_stages: bool = False):
        x = None
        stages = []
        for k in range(1, self.cfg.num_stages + 1):
            s = structural[k - 2] if (structural is not None and k > 1) else None
            x = self.fuse_stage(x, semantic[k - 1], s, k)
            stages.append(x)
        depth = self.head(x)
        return (depth, stages) if return_stages else depth


class SpaceClip(nn.Module):
    """Frozen backbone + FiLM generators + dense predictor.

    ``forward`` maps ``(B, 3, H, W)`` images in [0, 1] to ``(B, rows, cols)``
    metric depth. Only ``decoder`` and ``film`` hold trainable parameters.
    """

    def __init__(self, backbone: Backbone, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        spec = backbone.spec
        top = max(cfg.semantic_indices + cfg.structural_indices)
        if top >= spec.num_hidden_states:
            raise ConfigError(
                f"layer index {top} needs {top + 1} hidden states; backbone has {spec.num_hidden_states}"
            )
        self.cfg = cfg
        self.backbone = backbone
        self.decoder = DensePredictor(spec.hidden_dim, cfg)
        # built last so toggling FiLM does not shift the decoder's random init
        self.film = (
            FilmBank(spec.hidden_dim, len(cfg.semantic_indices), cfg.film_hidden_width)
            if cfg.use_film
            else None
        )

    def trainable_modules(self) -> dict[str, nn.Module]:
        mods = {"decoder": self.decoder}
        if self.film is not None:
            mods["film"] = self.film
        return mods

    def trainable_parameters(self):
        for mod in self.trainable_modules().values():
            yield from mod.parameters()

    def num_trainable_parameters(self) -> int:
        return sum(p.numel() for p in self.trainable_parameters())

    def encode(self, images: torch.Tensor) -> FeatureBundle:
        pixels = prepare_encoder_input(images, self.cfg.encoder_mode, self.backbone.spec)
        return extract_features(self.backbone, pixels, self.cfg.required_indices)

    def decode(self, bundle: FeatureBundle, return_stages: bool = False):
        side = bundle.grid_side
        semantic = []
        for level, idx in enumerate(self.cfg.semantic_indices):
            tokens = bundle.states[idx]
            if self.film is not None:
                tokens = self.film(tokens, bundle.cls_vector, level)
            semantic.append(tokens_to_grid(tokens, side))
        structural = None
        if self.cfg.use_structural:
            # structural_indices[j] feeds stage j + 2: shallowest level at the finest stage
            structural = [tokens_to_grid(bundle.states[i], side) for i in self.cfg.structural_indices]
        return self.decoder(semantic, structural, return_stages=return_stages)

    def forward(self, images: torch.Tensor, return_stages: bool = False):
        return self.decode(self.encode(images), return_stages=return_stages)

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> list[DepthMap]:
        was_training = self.training
        self.eval()
        try:
            depth = self(images).cpu().numpy()
        finally:
            self.train(was_training)
        return [DepthMap.dense(d) for d in depth]
