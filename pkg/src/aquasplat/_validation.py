"""Input validation helpers shared by the estimators, renderer and loaders."""
from __future__ import annotations

import numpy as np
import torch

DTYPE = torch.float64


class ContractViolation(ValueError):
    """Raised when a caller breaks an operation's precondition."""


class NonFiniteError(FloatingPointError):
    """Raised when a computation produces NaN or infinite values."""


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    arr = np.asarray(x)
    if not arr.flags.writeable:
        arr = arr.copy()
    return torch.as_tensor(arr, dtype=dtype)


def to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def check_image(image, name: str = "image") -> np.ndarray:
    """Return ``image`` as a float64 H x W x 3 array clipped to [0, 1]."""
    arr = np.asarray(to_numpy(image), dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ContractViolation(f"{name} must be H x W x 3, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return np.clip(arr, 0.0, 1.0)


def check_map(arr, shape: tuple[int, int], name: str) -> np.ndarray:
    """Validate a single-channel H x W map against an expected image shape."""
    out = np.asarray(to_numpy(arr), dtype=np.float64)
    if out.ndim == 3 and out.shape[2] == 1:
        out = out[..., 0]
    if out.shape != tuple(shape):
        raise ContractViolation(f"{name} has shape {out.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return out


def check_mask(mask, shape: tuple[int, int]) -> np.ndarray:
    out = check_map(mask, shape, "motion_mask")
    if not np.all((out == 0) | (out == 1)):
        raise ContractViolation("motion_mask values must be 0 or 1")
    return out


def check_rotation(R, atol: float = 1e-6) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ContractViolation(f"rotation must be 3x3, got {R.shape}")
    if not np.allclose(R @ R.T, np.eye(3), atol=atol) or np.linalg.det(R) < 0:
        raise ContractViolation("rotation is not orthonormal")
    return R


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"non-finite values in {what}")
    return t
