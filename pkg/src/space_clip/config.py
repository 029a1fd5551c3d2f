"""Configuration dataclasses and TOML (de)serialization.

Every run is fully described by a :class:`RunConfig`. The TOML layout mirrors
the dataclass field names one to one, so an echoed config can be fed back to
the CLI to reproduce a run.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass
class ModelConfig:
    semantic_indices: list[int] = field(default_factory=lambda: [12, 9, 6, 3])
    structural_indices: list[int] = field(default_factory=lambda: [2, 1, 0])
    decoder_channels: list[int] = field(default_factory=lambda: [256, 128, 64, 32])
    dropout: float = 0.1
    use_film: bool = True
    use_structural: bool = True
    min_depth: float = 1e-3
    max_depth: float = 80.0
    output_size: tuple[int, int] = (352, 704)
    encoder_mode: str = "center_crop"
    film_hidden_width: int | None = None  # None -> backbone hidden_dim
    norm_groups: int = 8

    def __post_init__(self):
        self.semantic_indices = [int(i) for i in self.semantic_indices]
        self.structural_indices = [int(i) for i in self.structural_indices]
        self.decoder_channels = [int(c) for c in self.decoder_channels]
        self.output_size = tuple(int(s) for s in self.output_size)
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.decoder_channels)

    def validate(self) -> None:
        if len(self.semantic_indices) != len(self.decoder_channels):
            raise ConfigError(
                f"semantic_indices ({len(self.semantic_indices)}) and decoder_channels "
                f"({len(self.decoder_channels)}) must have the same length"
            )
        if len(self.structural_indices) != self.num_stages - 1:
            raise ConfigError(
                f"structural_indices must have {self.num_stages - 1} entries, "
                f"got {len(self.structural_indices)}"
            )
        if not 0 < self.min_depth < self.max_depth:
            raise ConfigError(f"need 0 < min_depth < max_depth, got {self.min_depth}, {self.max_depth}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.encoder_mode not in ("center_crop", "resize"):
            raise ConfigError(f"encoder_mode must be 'center_crop' or 'resize', got {self.encoder_mode!r}")
        for c in self.decoder_channels:
            if c % self.norm_groups:
                raise ConfigError(f"decoder channel {c} not divisible by norm_groups={self.norm_groups}")

    @property
    def required_indices(self) -> list[int]:
        idx = list(self.semantic_indices)
        if self.use_structural:
            idx += self.structural_indices
        return sorted(set(idx))


@dataclass
class LossConfig:
    lambda_ssim: float = 0.5
    silog_lambda: float = 0.85
    silog_alpha: float = 10.0
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    dynamic_range: float = 80.0
    min_depth: float = 1e-3
    max_depth: float = 80.0

    def __post_init__(self):
        if not 0 <= self.lambda_ssim <= 1:
            raise ConfigError(f"lambda_ssim must lie in [0, 1], got {self.lambda_ssim}")
        if not 0 <= self.silog_lambda <= 1:
            raise ConfigError(f"silog_lambda must lie in [0, 1], got {self.silog_lambda}")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ConfigError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")

    @property
    def ssim_c1(self) -> float:
        return (self.ssim_k1 * self.dynamic_range) ** 2

    @property
    def ssim_c2(self) -> float:
        return (self.ssim_k2 * self.dynamic_range) ** 2


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    scheduler_step_epochs: int = 2
    scheduler_gamma: float = 0.5
    epochs: int = 10
    batch_size: int = 64
    seed: int = 42
    clip_norm: float = 1.0
    steps_per_epoch: int | None = None  # None -> one pass over the training set
    val_fraction: float = 0.05
    num_workers: int = 0
    deterministic: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.betas = tuple(float(b) for b in self.betas)
        for name in ("lr", "scheduler_step_epochs", "epochs", "batch_size", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.scheduler_gamma <= 0:
            raise ConfigError("weight_decay must be >= 0 and scheduler_gamma > 0")


@dataclass
class DataConfig:
    root: str | None = None
    train_split: str | None = None
    test_split: str | None = None
    synthetic_n: int | None = 4
    synthetic_seed: int = 42
    synthetic_keep: float = 1.0
    repeat: int = 1


@dataclass
class EvalConfig:
    min_depth: float = 1e-3
    max_depth: float = 80.0
    crop: str = "garg"

    def __post_init__(self):
        if self.crop not in ("garg", "none"):
            raise ConfigError(f"eval.crop must be 'garg' or 'none', got {self.crop!r}")


@dataclass
class BackboneConfig:
    kind: str = "stub"  # "stub" or "clip"
    model_id: str = "openai/clip-vit-base-patch16"
    stub_seed: int = 7
    stub_hidden_dim: int = 64

    def __post_init__(self):
        if self.kind not in ("stub", "clip"):
            raise ConfigError(f"backbone.kind must be 'stub' or 'clip', got {self.kind!r}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    output_dir: str = "runs/default"


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
    "backbone": BackboneConfig,
}


def _build(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown field(s) in [{where}]: {', '.join(sorted(unknown))}")
    return cls(**values)


def run_config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    kwargs: dict[str, Any] = {}
    for key, cls in _SECTIONS.items():
        section = dict(raw.pop(key, {}))
        if key == "train" and "loss" in section:
            section["loss"] = _build(LossConfig, section["loss"], "train.loss")
        kwargs[key] = _build(cls, section, key)
    if "output_dir" in raw:
        kwargs["output_dir"] = str(raw.pop("output_dir"))
    if raw:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(raw))}")
    return RunConfig(**kwargs)


def _strip_none(obj):
    # TOML has no null; absent keys fall back to dataclass defaults on load.
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_strip_none(v) for v in obj]
    return obj


def to_dict(cfg) -> dict:
    return _strip_none(dataclasses.asdict(cfg))


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def parse_override(text: str) -> tuple[list[str], Any]:
    """Split ``a.b.c=value`` into a key path and a TOML-parsed value.

    Values that are not valid TOML literals are taken as bare strings, so
    ``--override backbone.kind=stub`` works without quoting.
    """
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, value = text.split("=", 1)
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    return key.strip().split("."), parsed


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    for item in overrides:
        path, value = parse_override(item)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {'.'.join(path)}: {part} is not a table")
        node[path[-1]] = value
    return raw


def load_run_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    raw = apply_overrides(raw, list(overrides))
    return run_config_from_dict(raw)
