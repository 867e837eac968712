"""Objective terms: reconstruction, depth, grey-world, edge-aware smoothness and frame weighting."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from ._validation import DTYPE, ContractViolation, NonFiniteError, as_tensor
from .metrics import ssim_map

log = logging.getLogger(__name__)

MASK_EPS = 1e-8


@dataclass
class LossWeights:
    lambda_r: float = 0.8
    lambda_d: float = 0.1
    lambda_ca: float = 1.0
    lambda_s: float = 0.2
    lambda_b: float = 2.0
    alpha_afw: float = 0.5

    def __post_init__(self):
        for name in ("lambda_r", "lambda_d", "lambda_ca", "lambda_s", "lambda_b", "alpha_afw"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be non-negative")
        if self.alpha_afw > 1:
            raise ContractViolation("alpha_afw must lie in [0, 1]")
        if self.lambda_b > 5:
            raise ContractViolation("lambda_b must lie in [0, 5]")


@dataclass
class LossReport:
    rec: float
    depth: float
    grey: float
    smooth: float
    total: float
    afw_gamma_used: float = float("nan")
    total_tensor: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    CSV_HEADER = ("iter", "rec", "depth", "grey", "smooth", "total", "gamma")

    def csv_row(self, iteration: int) -> str:
        vals = (self.rec, self.depth, self.grey, self.smooth, self.total, self.afw_gamma_used)
        return ",".join([str(iteration)] + [repr(float(v)) for v in vals])


def _masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask if x.ndim == mask.ndim else mask[..., None].expand_as(x)
    return (x * m).sum() / torch.clamp_min(m.sum(), MASK_EPS)


def l1_masked(rendered, target, mask) -> torch.Tensor:
    r, t, m = as_tensor(rendered), as_tensor(target), as_tensor(mask)
    return _masked_mean((r - t).abs(), m)


def ssim_loss_masked(rendered, target, mask) -> torch.Tensor:
    """``(1 - SSIM) / 2`` averaged over masked pixels."""
    r, t, m = as_tensor(rendered), as_tensor(target), as_tensor(mask)
    return _masked_mean((1.0 - ssim_map(r, t)) / 2.0, m)


def combine_rec(l1, l_ssim, lambda_r: float):
    return lambda_r * l1 + (1.0 - lambda_r) * l_ssim


def loss_rec(rendered, target, mask=None, lambda_r: float = 0.8) -> torch.Tensor:
    """Masked ``lambda_r * L1 + (1 - lambda_r) * L_SSIM``."""
    r, t = as_tensor(rendered), as_tensor(target)
    if r.shape != t.shape:
        raise ContractViolation(f"rendered {tuple(r.shape)} and target {tuple(t.shape)} differ")
    m = torch.ones(r.shape[:2], dtype=DTYPE) if mask is None else as_tensor(mask)
    if tuple(m.shape) != tuple(r.shape[:2]):
        raise ContractViolation("mask does not match image size")
    if float(m.sum()) == 0.0:
        log.warning("motion mask is empty; reconstruction loss defined as 0")
        return (r * 0.0).sum()
    return combine_rec(l1_masked(r, t, m), ssim_loss_masked(r, t, m), lambda_r)


def loss_depth(rendered_depth, channel_depths, pseudo, lambda_d: float = 0.1, lambda_ca: float = 1.0) -> torch.Tensor:
    """``lambda_d * |D_hat - D| + lambda_ca * sum_{ch,n} |z_ch^n - D|`` with mean absolute norms."""
    d_hat, zc, d = as_tensor(rendered_depth), as_tensor(channel_depths), as_tensor(pseudo)
    if d_hat.shape != d.shape or tuple(zc.shape) != tuple(d.shape) + (3, 2):
        raise ContractViolation("depth maps have mismatched shapes")
    main = (d_hat - d).abs().mean()
    per_term = (zc - d[..., None, None]).abs().mean(dim=(0, 1))  # (3, 2)
    return lambda_d * main + lambda_ca * per_term.sum()


def align_pseudo_depth(pseudo, rendered, mask=None) -> tuple[np.ndarray, float, float]:
    """Least-squares affine fit ``a * pseudo + c`` to ``rendered`` over masked pixels.

    Returns ``(aligned, a, c)``. A constant pseudo depth cannot carry scale, so
    a shift-only fit (``a = 0``) is returned in that case.
    """
    p = np.asarray(pseudo, dtype=np.float64)
    r = np.asarray(rendered, dtype=np.float64)
    if p.shape != r.shape:
        raise ContractViolation("pseudo and rendered depth shapes differ")
    m = np.ones(p.shape, bool) if mask is None else np.asarray(mask) > 0
    pv, rv = p[m], r[m]
    if pv.size < 2:
        raise ContractViolation("need at least two valid pixels to align depth")
    pm, rm = pv.mean(), rv.mean()
    var = ((pv - pm) ** 2).sum()
    if var <= 1e-12 * max(1.0, pm * pm) * pv.size:
        a, c = 0.0, float(rm)
    else:
        a = float(((pv - pm) * (rv - rm)).sum() / var)
        c = float(rm - a * pm)
    return a * p + c, a, c


def loss_grey(restored) -> torch.Tensor:
    """Grey-world penalty ``sum_ch (mean(J_ch) - 0.5)^2``."""
    J = as_tensor(restored)
    mu = J.reshape(-1, 3).mean(0)
    return ((mu - 0.5) ** 2).sum()


def smooth_weights(depth, lambda_b: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Edge-aware weights ``exp(-lambda_b |dD|)`` for horizontal and vertical neighbours."""
    D = as_tensor(depth)
    wx = torch.exp(-lambda_b * (D[:, :-1] - D[:, 1:]).abs())
    wy = torch.exp(-lambda_b * (D[:-1, :] - D[1:, :]).abs())
    return wx, wy


def loss_smooth(image, pseudo_depth, lambda_b: float = 2.0, reduction: str = "sum") -> torch.Tensor:
    """Depth-edge-aware anisotropic total variation.

    Colour differences are summed over channels. ``reduction="mean"`` divides
    the sum by the pixel count.
    """
    I = as_tensor(image)
    if I.ndim == 2:
        I = I[..., None]
    D = as_tensor(pseudo_depth)
    if tuple(I.shape[:2]) != tuple(D.shape):
        raise ContractViolation("image and depth sizes differ")
    wx, wy = smooth_weights(D, lambda_b)
    gx = (I[:, :-1] - I[:, 1:]).abs().sum(-1)
    gy = (I[:-1, :] - I[1:, :]).abs().sum(-1)
    total = (wx * gx).sum() + (wy * gy).sum()
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / (I.shape[0] * I.shape[1])
    raise ContractViolation(f"unknown reduction {reduction!r}")


def loss_afw(base_loss, gamma, alpha_afw: float):
    """Uncertainty-weighted frame loss ``0.5 * gamma * L - 0.5 * alpha * log(gamma)``."""
    if isinstance(gamma, torch.Tensor):
        if bool((gamma <= 0).any()):
            raise ContractViolation("gamma must be positive")
        return 0.5 * gamma * base_loss - 0.5 * alpha_afw * torch.log(gamma)
    if gamma <= 0:
        raise ContractViolation("gamma must be positive")
    return 0.5 * gamma * base_loss - 0.5 * alpha_afw * math.log(gamma)


def loss_final(
    rec, depth, grey, smooth, weights: LossWeights, is_interpolated: bool = False, gamma=None
) -> LossReport:
    """Compose the per-view objective; interpolated views get the frame-weighting wrapper."""
    parts = [p if isinstance(p, torch.Tensor) else torch.as_tensor(float(p), dtype=DTYPE) for p in (rec, depth, grey, smooth)]
    total = parts[0] + parts[1] + parts[2] + weights.lambda_s * parts[3]
    gamma_used = float("nan")
    if is_interpolated:
        if gamma is None:
            gamma = torch.ones((), dtype=DTYPE)
        gamma = gamma if isinstance(gamma, torch.Tensor) else torch.as_tensor(float(gamma), dtype=DTYPE)
        total = loss_afw(total, gamma, weights.alpha_afw)
        gamma_used = float(gamma.detach())
    if not bool(torch.isfinite(total)):
        names = ("rec", "depth", "grey", "smooth")
        bad = [n for n, p in zip(names, parts) if not bool(torch.isfinite(p))]
        raise NonFiniteError(f"non-finite loss; offending terms: {bad or ['total']}")
    return LossReport(
        rec=float(parts[0].detach()),
        depth=float(parts[1].detach()),
        grey=float(parts[2].detach()),
        smooth=float(parts[3].detach()),
        total=float(total.detach()),
        afw_gamma_used=gamma_used,
        total_tensor=total,
    )
