"""KITTI Eigen-split ingestion, augmentation, and a procedural synthetic set."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import Dataset

from .decoder import DepthMap

log = logging.getLogger(__name__)

PROCESS_SIZE = (352, 704)


class DepthFormatError(ValueError):
    pass


class DataSetupError(RuntimeError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    gt: DepthMap
    source_id: str = ""


@dataclass
class SplitManifest:
    root: Path
    train_list: list[tuple[Path, Path]] = field(default_factory=list)
    test_list: list[tuple[Path, Path]] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


# ---------------------------------------------------------------- depth I/O


def load_depth_png(path: str | Path) -> DepthMap:
    """Read a KITTI-style 16-bit depth PNG: meters = raw / 256, raw 0 = no data."""
    path = Path(path)
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
            raise DepthFormatError(f"{path}: expected single-channel 16-bit PNG, got mode {im.mode}")
        raw = np.array(im)
    if raw.ndim != 2:
        raise DepthFormatError(f"{path}: expected one channel, got shape {raw.shape}")
    if raw.dtype != np.uint16:
        if raw.min() < 0 or raw.max() > 65535:
            raise DepthFormatError(f"{path}: values outside the 16-bit range")
        raw = raw.astype(np.uint16)
    return DepthMap(raw.astype(np.float32) / 256.0, raw > 0)


def save_depth_png(depth: np.ndarray, path: str | Path, valid: np.ndarray | None = None) -> None:
    """Write meters as ``round(meters * 256)`` into a 16-bit PNG (0 where invalid)."""
    raw = np.clip(np.round(np.asarray(depth, dtype=np.float64) * 256.0), 0, 65535).astype(np.uint16)
    if valid is not None:
        raw[~valid] = 0
    Image.fromarray(raw).save(path)


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


# ---------------------------------------------------------------- geometry


def _image_to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).unsqueeze(0)


def resize_sample(image: np.ndarray, gt: DepthMap, target=PROCESS_SIZE, source_id: str = "") -> Sample:
    """Bilinear for the image, nearest neighbor for depth and its mask."""
    target = tuple(target)
    if image.shape[:2] != target:
        t = F.interpolate(_image_to_tensor(image.astype(np.float32)), size=target,
                          mode="bilinear", align_corners=False)
        image = t[0].permute(1, 2, 0).clamp(0, 1).numpy()
    if gt.shape != target:
        vals = torch.from_numpy(np.where(gt.valid, gt.values, 0).astype(np.float32))[None, None]
        mask = torch.from_numpy(gt.valid.astype(np.float32))[None, None]
        vals = F.interpolate(vals, size=target, mode="nearest")[0, 0].numpy()
        mask = F.interpolate(mask, size=target, mode="nearest")[0, 0].numpy() > 0.5
        gt = DepthMap(np.where(mask, vals, 0).astype(np.float32), mask)
    return Sample(image.astype(np.float32), gt, source_id)


def hflip(sample: Sample) -> Sample:
    return Sample(
        sample.image[:, ::-1].copy(),
        DepthMap(sample.gt.values[:, ::-1].copy(), sample.gt.valid[:, ::-1].copy()),
        sample.source_id,
    )


def rotate(sample: Sample, degrees: float) -> Sample:
    """Rotate about the image center; pixels sourced from outside become invalid depth."""
    h, w = sample.gt.shape
    theta = np.deg2rad(degrees)
    # normalized coordinates are anisotropic; rotate in pixel units
    cos, sin = np.cos(theta), np.sin(theta)
    affine = torch.tensor(
        [[cos, -sin * h / w, 0.0], [sin * w / h, cos, 0.0]], dtype=torch.float32
    ).unsqueeze(0)
    grid = F.affine_grid(affine, (1, 1, h, w), align_corners=False)
    img = F.grid_sample(_image_to_tensor(sample.image), grid, mode="bilinear",
                        padding_mode="zeros", align_corners=False)
    vals = torch.from_numpy(np.where(sample.gt.valid, sample.gt.values, 0).astype(np.float32))[None, None]
    mask = torch.from_numpy(sample.gt.valid.astype(np.float32))[None, None]
    vals = F.grid_sample(vals, grid, mode="nearest", padding_mode="zeros", align_corners=False)[0, 0]
    mask = F.grid_sample(mask, grid, mode="nearest", padding_mode="zeros", align_corners=False)[0, 0]
    valid = mask.numpy() > 0.5
    return Sample(
        img[0].permute(1, 2, 0).clamp(0, 1).numpy(),
        DepthMap(np.where(valid, vals.numpy(), 0).astype(np.float32), valid),
        sample.source_id,
    )


def augment(sample: Sample, rng: np.random.Generator, max_rotation: float = 1.0) -> Sample:
    """Random horizontal flip (p = 0.5) and a small rotation, applied jointly."""
    if rng.random() < 0.5:
        sample = hflip(sample)
    angle = float(rng.uniform(-max_rotation, max_rotation))
    return rotate(sample, angle)


# ---------------------------------------------------------------- synthetic scenes


def synthetic_sample(rng: np.random.Generator, size=PROCESS_SIZE, keep: float = 1.0,
                     source_id: str = "") -> Sample:
    """Road-like scene: ground plane receding to a horizon plus box obstacles."""
    h, w = size
    near, far = 5.0, 80.0
    horizon = int(h * rng.uniform(0.3, 0.4))
    rows = np.arange(h, dtype=np.float64)
    # inverse depth is linear in image row for a flat ground plane
    t = np.clip((rows - horizon) / (h - 1 - horizon), 0, 1)
    inv = 1 / far + t * (1 / near - 1 / far)
    depth = np.repeat((1 / inv)[:, None], w, axis=1)
    tint = np.ones((h, w, 3)) * np.array([0.45, 0.45, 0.5])
    tint[:horizon] = [0.55, 0.7, 0.9]

    for _ in range(int(rng.integers(2, 6))):
        bottom = int(rng.integers(horizon + 10, h))
        d = float(1 / inv[bottom])
        obj_h = int(np.clip(rng.uniform(1.5, 4.0) * h * 0.4 * near / d, 4, bottom))
        obj_w = int(np.clip(rng.uniform(1.5, 5.0) * w * 0.1 * near / d, 4, w // 2))
        left = int(rng.integers(0, w - obj_w))
        top = max(bottom - obj_h, 0)
        region = depth[top:bottom, left : left + obj_w]
        closer = region > d
        region[closer] = d
        tint[top:bottom, left : left + obj_w][closer] = rng.uniform(0.1, 0.9, size=3)

    shade = 1.0 - 0.6 * (np.log(depth) - np.log(near)) / (np.log(far) - np.log(near))
    image = tint * np.clip(shade, 0.2, 1.0)[..., None]
    image = image + rng.normal(0, 0.03, size=image.shape)
    image = np.clip(image, 0, 1).astype(np.float32)

    depth = np.clip(depth, 1e-3, far).astype(np.float32)
    valid = rng.random(size) < keep if keep < 1.0 else np.ones(size, dtype=bool)
    return Sample(image, DepthMap(np.where(valid, depth, 0).astype(np.float32), valid), source_id)


def synthetic_dataset(n: int, seed: int = 42, size=PROCESS_SIZE, keep: float = 1.0) -> list[Sample]:
    rng = np.random.default_rng(seed)
    return [synthetic_sample(rng, size, keep, source_id=f"synthetic/{seed}/{i:04d}") for i in range(n)]


# ---------------------------------------------------------------- split files


def _read_split(root: Path, split_file: Path, skipped: list[str]) -> list[tuple[Path, Path]]:
    entries = []
    for lineno, line in enumerate(Path(split_file).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 2:
            raise DataSetupError(f"{split_file}:{lineno}: expected two paths, got {line!r}")
        img, dep = root / parts[0], root / parts[1]
        if not dep.exists():
            log.warning("skipping %s: depth file %s is missing", parts[0], dep)
            skipped.append(str(dep))
            continue
        entries.append((img, dep))
    return entries


def load_split(root: str | Path | None, train_file: str | Path | None = None,
               test_file: str | Path | None = None) -> SplitManifest:
    """Resolve split list files against ``root`` (or ``$SPACE_CLIP_DATA_ROOT``)."""
    root = root or os.environ.get("SPACE_CLIP_DATA_ROOT")
    if root is None:
        raise DataSetupError("no data root given and SPACE_CLIP_DATA_ROOT is unset")
    root = Path(root)
    if not root.is_dir():
        raise DataSetupError(f"data root does not exist: {root}")
    manifest = SplitManifest(root=root)
    for attr, f in (("train_list", train_file), ("test_list", test_file)):
        if f is None:
            continue
        f = Path(f)
        if not f.is_absolute() and not f.exists():
            f = root / f
        if not f.exists():
            raise DataSetupError(f"split file not found: {f}")
        entries = _read_split(root, f, manifest.skipped)
        if not entries:
            raise DataSetupError(f"split file {f} yielded no usable entries")
        setattr(manifest, attr, entries)
    return manifest


# ---------------------------------------------------------------- torch datasets


class DepthDataset(Dataset):
    """Serves samples as tensors; augmentation is seeded per item and epoch."""

    def __init__(self, samples=None, entries=None, train: bool = False, seed: int = 42,
                 size=PROCESS_SIZE, repeat: int = 1):
        if (samples is None) == (entries is None):
            raise ValueError("pass exactly one of samples or entries")
        self.samples = samples
        self.entries = entries
        self.train = train
        self.seed = seed
        self.size = tuple(size)
        self.repeat = repeat
        self.epoch = 0

    def __len__(self) -> int:
        base = len(self.samples) if self.samples is not None else len(self.entries)
        return base * self.repeat

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def load(self, index: int) -> Sample:
        index %= len(self.samples) if self.samples is not None else len(self.entries)
        if self.samples is not None:
            s = self.samples[index]
            return resize_sample(s.image, s.gt, self.size, s.source_id)
        img_path, dep_path = self.entries[index]
        return resize_sample(load_image(img_path), load_depth_png(dep_path), self.size, str(img_path))

    def __getitem__(self, index: int) -> dict:
        sample = self.load(index)
        if self.train:
            rng = np.random.default_rng([self.seed, self.epoch, index])
            sample = augment(sample, rng)
        return {
            "image": torch.from_numpy(np.ascontiguousarray(sample.image)).permute(2, 0, 1),
            "depth": torch.from_numpy(np.ascontiguousarray(sample.gt.values)),
            "valid": torch.from_numpy(np.ascontiguousarray(sample.gt.valid)),
            "index": index,
            "source_id": sample.source_id,
        }
