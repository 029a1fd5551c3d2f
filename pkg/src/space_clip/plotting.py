"""Figures and colorized depth images written next to the tabular reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

_CMAP = matplotlib.colormaps["turbo"]


def colorize_depth(depth: np.ndarray, min_depth: float = 1e-3, max_depth: float = 80.0,
                   valid: np.ndarray | None = None) -> np.ndarray:
    """8-bit RGB with a fixed turbo colormap; near is red, far is blue. Invalid pixels are black."""
    t = np.clip((np.asarray(depth, dtype=np.float64) - min_depth) / (max_depth - min_depth), 0, 1)
    rgb = (_CMAP(1.0 - t)[..., :3] * 255).round().astype(np.uint8)
    if valid is not None:
        rgb[~valid] = 0
    return rgb


def save_colorized(depth: np.ndarray, path: str | Path, min_depth: float = 1e-3,
                   max_depth: float = 80.0) -> None:
    Image.fromarray(colorize_depth(depth, min_depth, max_depth)).save(path)


def plot_triptych(image: np.ndarray, gt, pred: np.ndarray, path: str | Path,
                  max_depth: float = 80.0, title: str | None = None) -> None:
    """Input image, ground truth, prediction stacked vertically."""
    fig, axes = plt.subplots(3, 1, figsize=(8, 6.5))
    axes[0].imshow(np.clip(image, 0, 1))
    axes[0].set_title("Input")
    gt_rgb = colorize_depth(gt.values, max_depth=max_depth, valid=gt.valid)
    axes[1].imshow(gt_rgb)
    axes[1].set_title("Ground truth")
    axes[2].imshow(colorize_depth(pred, max_depth=max_depth))
    axes[2].set_title("Prediction")
    for ax in axes:
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_training_curves(steps, history, path: str | Path) -> None:
    fig, (ax_loss, ax_lr) = plt.subplots(1, 2, figsize=(10, 3.5))
    x = [s.step for s in steps]
    ax_loss.plot(x, [s.loss for s in steps], label="total")
    ax_loss.plot(x, [s.silog for s in steps], label="SILog")
    ax_loss.plot(x, [s.ssim for s in steps], label="1 - SSIM")
    ax_loss.set_xlabel("step")
    ax_loss.set_yscale("log")
    ax_loss.legend(frameon=False)
    ax_lr.step([h.epoch for h in history], [h.lr for h in history], where="post")
    ax_lr.set_xlabel("epoch")
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_ablation(results, path: str | Path, reference: dict[str, float] | None = None) -> None:
    names = [r.row.name for r in results]
    ours = [r.report.abs_rel for r in results]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(8, 3.5))
    width = 0.4 if reference else 0.6
    ax.bar(x - (width / 2 if reference else 0), ours, width, label="this run")
    if reference:
        ax.bar(x + width / 2, [reference.get(n, np.nan) for n in names], width,
               label="reference (full scale)")
        ax.legend(frameon=False)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=15, ha="right", fontsize=8)
    ax.set_ylabel("AbsRel")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_error_histogram(per_image, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist([r.abs_rel for r in per_image], bins=min(30, max(5, len(per_image))))
    ax.set_xlabel("per-image AbsRel")
    ax.set_ylabel("images")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
