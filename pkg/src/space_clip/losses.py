"""SILog, SSIM, and their weighted combination, all aware of sparse ground truth.

Inputs are ``(B, H, W)`` or ``(H, W)`` tensors of meters. ``valid`` marks
supervised pixels; it is intersected with ``min_depth <= gt <= max_depth``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import LossConfig


class DegenerateBatchError(ValueError):
    pass


def _batched(*tensors):
    return [t.unsqueeze(0) if t is not None and t.dim() == 2 else t for t in tensors]


def supervision_mask(gt: torch.Tensor, valid: torch.Tensor | None, cfg: LossConfig) -> torch.Tensor:
    mask = (gt >= cfg.min_depth) & (gt <= cfg.max_depth)
    if valid is not None:
        mask = mask & valid.bool()
    return mask


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # zero subgradient at (and below) zero instead of inf * 0 = nan
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


def silog_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    valid: torch.Tensor | None = None,
    cfg: LossConfig = LossConfig(),
) -> torch.Tensor:
    """Scale-invariant log loss, computed per image and averaged over the batch."""
    pred, gt, valid = _batched(pred, gt, valid)
    mask = supervision_mask(gt, valid, cfg)
    losses = []
    for p, g, m in zip(pred, gt, mask):
        n = int(m.sum())
        if n < 2:
            raise DegenerateBatchError(f"SILog needs at least 2 valid pixels, got {n}")
        pv = p[m]
        if bool((pv <= 0).any()):
            raise ValueError("SILog: nonpositive predicted depth inside the valid mask")
        d = torch.log(pv) - torch.log(g[m])
        radicand = (d * d).sum() / n - cfg.silog_lambda * d.sum() ** 2 / n**2
        losses.append(cfg.silog_alpha * _safe_sqrt(radicand))
    return torch.stack(losses).mean()


def gaussian_window(size: int, sigma: float, dtype=torch.float32, device=None) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    # separable Gaussian on (B, 1, H, W) with reflection padding -> same-size output
    r = g.numel() // 2
    x = F.pad(x, (r, r, r, r), mode="reflect")
    x = F.conv2d(x, g.view(1, 1, 1, -1))
    return F.conv2d(x, g.view(1, 1, -1, 1))


def ssim_map(x: torch.Tensor, y: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Per-pixel SSIM of ``(B, H, W)`` maps using a Gaussian window."""
    x, y = _batched(x, y)
    h, w = x.shape[-2:]
    if h < cfg.ssim_window or w < cfg.ssim_window:
        raise ValueError(f"map size {h}x{w} is smaller than the SSIM window {cfg.ssim_window}")
    g = gaussian_window(cfg.ssim_window, cfg.ssim_sigma, x.dtype, x.device)
    x, y = x.unsqueeze(1), y.unsqueeze(1)
    mu_x, mu_y = _blur(x, g), _blur(y, g)
    var_x = _blur(x * x, g) - mu_x**2
    var_y = _blur(y * y, g) - mu_y**2
    cov = _blur(x * y, g) - mu_x * mu_y
    c1, c2 = cfg.ssim_c1, cfg.ssim_c2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return (num / den).squeeze(1)


def ssim_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    valid: torch.Tensor | None = None,
    cfg: LossConfig = LossConfig(),
) -> torch.Tensor:
    """Mean of ``1 - SSIM``; unsupervised pixels take the (detached) prediction."""
    pred, gt, valid = _batched(pred, gt, valid)
    mask = supervision_mask(gt, valid, cfg)
    target = torch.where(mask, gt, pred.detach())
    return (1 - ssim_map(pred, target, cfg)).mean()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    silog: torch.Tensor
    ssim: torch.Tensor


def total_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    valid: torch.Tensor | None = None,
    cfg: LossConfig = LossConfig(),
) -> LossBreakdown:
    si = silog_loss(pred, gt, valid, cfg)
    ss = ssim_loss(pred, gt, valid, cfg)
    return LossBreakdown(total=combine(si, ss, cfg.lambda_ssim), silog=si, ssim=ss)


def combine(silog, ssim, lambda_ssim: float):
    return (1 - lambda_ssim) * silog + lambda_ssim * ssim
