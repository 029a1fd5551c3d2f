"""Monocular depth from a frozen CLIP vision encoder with a dual-pathway decoder."""

from .config import LossConfig, ModelConfig, RunConfig, TrainConfig
from .decoder import DepthMap, SpaceClip
from .encoder import BackboneSpec, FeatureBundle, stub_backbone

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec",
    "DepthMap",
    "FeatureBundle",
    "LossConfig",
    "ModelConfig",
    "RunConfig",
    "SpaceClip",
    "TrainConfig",
    "stub_backbone",
]
