"""PSNR and SSIM on [0, 1] images."""
from __future__ import annotations

import math

import torch
from torch.nn import functional as F

from ._validation import DTYPE, ContractViolation, as_tensor

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=DTYPE) - (size - 1) / 2.0
    g = torch.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    # x: (C, H, W); separable zero-padded "same" convolution
    k = window.numel()
    c = x.shape[0]
    x = F.conv2d(x[None], window.reshape(1, 1, 1, k).expand(c, 1, 1, k), padding=(0, k // 2), groups=c)
    x = F.conv2d(x, window.reshape(1, 1, k, 1).expand(c, 1, k, 1), padding=(k // 2, 0), groups=c)
    return x[0]


def ssim_map(a, b) -> torch.Tensor:
    """Per-pixel, per-channel SSIM map ``(H, W, C)``; differentiable."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = gaussian_window()
    x, y = a.permute(2, 0, 1), b.permute(2, 0, 1)
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mu_x * mu_x
    syy = _filter(y * y, win) - mu_y * mu_y
    sxy = _filter(x * y, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).permute(1, 2, 0)


def ssim(a, b) -> float:
    with torch.no_grad():
        a, b = as_tensor(a), as_tensor(b)
        if torch.equal(a, b):
            return 1.0
        return float(ssim_map(a, b).mean())


def psnr(a, b) -> float:
    with torch.no_grad():
        a, b = as_tensor(a), as_tensor(b)
        if a.shape != b.shape:
            raise ContractViolation(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        mse = float(((a - b) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))
