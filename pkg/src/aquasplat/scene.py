"""Scene representation: Gaussians, cameras, spherical harmonics and projection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from ._validation import (
    DTYPE,
    ContractViolation,
    as_tensor,
    check_image,
    check_map,
    check_mask,
    check_rotation,
)

MAX_SH_DEGREE = 3
NEAR_PLANE = 0.01
COV2D_BLUR = 0.3
SH_OFFSET = 0.5

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def n_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_of(n_coeffs: int) -> int:
    degree = int(round(math.sqrt(n_coeffs))) - 1
    if n_sh_coeffs(degree) != n_coeffs:
        raise ContractViolation(f"{n_coeffs} is not a valid SH coefficient count")
    return degree


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# --------------------------------------------------------------------------
# spherical harmonics
# --------------------------------------------------------------------------


def sh_basis(dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """Real SH basis up to ``degree`` for unit directions ``(..., 3)`` -> ``(..., K)``."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [torch.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out += [
            SH_C2[0] * xy,
            SH_C2[1] * yz,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * xz,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * xy * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    return torch.stack(out, dim=-1)


def eval_sh(coeffs, view_dir, degree: int) -> torch.Tensor:
    """Evaluate view-dependent colour from SH coefficients.

    ``coeffs`` has shape ``(..., K, 3)`` (one column per colour channel) and
    ``view_dir`` shape ``(..., 3)``. Returns ``max(SH(v) + 0.5, 0)`` per channel.
    """
    coeffs = as_tensor(coeffs)
    view_dir = as_tensor(view_dir)
    if coeffs.shape[-1] != 3:
        raise ContractViolation("SH coefficients must have a trailing channel axis of 3")
    stored = sh_degree_of(coeffs.shape[-2])
    if not 0 <= degree <= stored:
        raise ContractViolation(f"requested SH degree {degree} but coefficients store degree {stored}")
    basis = sh_basis(view_dir, degree)
    k = n_sh_coeffs(degree)
    rgb = (basis.unsqueeze(-1) * coeffs[..., :k, :]).sum(dim=-2)
    return torch.clamp_min(rgb + SH_OFFSET, 0.0)


def rgb_to_sh_dc(rgb):
    """Inverse of the degree-0 colour mapping (ignores the clamp)."""
    return (np.asarray(rgb, dtype=np.float64) - SH_OFFSET) / SH_C0


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices from (w, x, y, z) quaternions; input need not be unit."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R) -> np.ndarray:
    """Unit (w, x, y, z) quaternion with non-negative w."""
    from scipy.spatial.transform import Rotation

    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    q = np.array([w, x, y, z])
    return q if w >= 0 else -q


def covariance_3d(log_scales: torch.Tensor, quats: torch.Tensor) -> torch.Tensor:
    """Sigma = R diag(s^2) R^T, symmetric positive definite by construction."""
    R = quat_to_rotmat(quats)
    M = R * torch.exp(log_scales).unsqueeze(-2)
    return M @ M.transpose(-1, -2)


# --------------------------------------------------------------------------
# types
# --------------------------------------------------------------------------


@dataclass
class Gaussian3D:
    """A single Gaussian in plain numpy form."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray  # (K, 3)
    backscatter_colour_logit: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        if np.any(self.scale <= 0):
            raise ContractViolation("Gaussian scales must be positive")
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm < 1e-12:
            raise ContractViolation("rotation quaternion must be non-zero and finite")
        self.rotation = q / norm
        self.opacity_logit = float(self.opacity_logit)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64).reshape(-1, 3)
        sh_degree_of(self.sh_coeffs.shape[0])
        self.backscatter_colour_logit = np.asarray(
            self.backscatter_colour_logit, dtype=np.float64
        ).reshape(3)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def backscatter_colour(self) -> np.ndarray:
        return sigmoid(self.backscatter_colour_logit)

    @property
    def covariance(self) -> np.ndarray:
        return covariance_3d(
            torch.as_tensor(np.log(self.scale)), torch.as_tensor(self.rotation)
        ).numpy()


PARAM_NAMES = ("means", "log_scales", "quats", "opacity_logits", "sh", "bs_logits")


@dataclass
class GaussianCloud:
    """Optimisable scene: one row per Gaussian in every tensor.

    ``sh`` holds ``(N, K, 3)`` coefficients for the maximum degree; renders may
    use a lower active degree.
    """

    means: torch.Tensor
    log_scales: torch.Tensor
    quats: torch.Tensor
    opacity_logits: torch.Tensor
    sh: torch.Tensor
    bs_logits: torch.Tensor

    def __post_init__(self):
        n = self.means.shape[0]
        if n == 0:
            raise ContractViolation("GaussianCloud must not be empty")
        expected = {
            "means": (n, 3),
            "log_scales": (n, 3),
            "quats": (n, 4),
            "opacity_logits": (n,),
            "bs_logits": (n, 3),
        }
        for name, shape in expected.items():
            if tuple(getattr(self, name).shape) != shape:
                raise ContractViolation(f"{name} has shape {tuple(getattr(self, name).shape)}, expected {shape}")
        if self.sh.ndim != 3 or self.sh.shape[0] != n or self.sh.shape[2] != 3:
            raise ContractViolation(f"sh must be (N, K, 3), got {tuple(self.sh.shape)}")
        sh_degree_of(self.sh.shape[1])

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def sh_degree(self) -> int:
        return sh_degree_of(self.sh.shape[1])

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def backscatter_colours(self) -> torch.Tensor:
        return torch.sigmoid(self.bs_logits)

    def covariances(self) -> torch.Tensor:
        return covariance_3d(self.log_scales, self.quats)

    def params(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def requires_grad_(self, flag: bool = True) -> "GaussianCloud":
        for t in self.params().values():
            t.requires_grad_(flag)
        return self

    def detach(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.detach().clone() for k, v in self.params().items()})

    def select(self, index) -> "GaussianCloud":
        return GaussianCloud(**{k: v.detach()[index].clone() for k, v in self.params().items()})

    @classmethod
    def concat(cls, clouds: Sequence["GaussianCloud"]) -> "GaussianCloud":
        return cls(**{k: torch.cat([c.params()[k].detach() for c in clouds]) for k in PARAM_NAMES})

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian3D]) -> "GaussianCloud":
        if not gaussians:
            raise ContractViolation("GaussianCloud must not be empty")
        degrees = {sh_degree_of(g.sh_coeffs.shape[0]) for g in gaussians}
        if len(degrees) != 1:
            raise ContractViolation("all Gaussians must share one SH degree")
        stack = lambda f: torch.as_tensor(np.stack([f(g) for g in gaussians]), dtype=DTYPE)
        return cls(
            means=stack(lambda g: g.position),
            log_scales=stack(lambda g: np.log(g.scale)),
            quats=stack(lambda g: g.rotation),
            opacity_logits=stack(lambda g: np.float64(g.opacity_logit)),
            sh=stack(lambda g: g.sh_coeffs),
            bs_logits=stack(lambda g: g.backscatter_colour_logit),
        )

    def gaussian(self, i: int) -> Gaussian3D:
        p = {k: v.detach()[i].cpu().numpy() for k, v in self.params().items()}
        return Gaussian3D(
            position=p["means"],
            scale=np.exp(p["log_scales"]),
            rotation=p["quats"],
            opacity_logit=float(p["opacity_logits"]),
            sh_coeffs=p["sh"],
            backscatter_colour_logit=p["bs_logits"],
        )


@dataclass
class FrameWeight:
    """Learnable per-frame uncertainty weight, gamma = exp(gamma_logparam)."""

    frame_id: str
    gamma_logparam: torch.Tensor = field(default_factory=lambda: torch.zeros((), dtype=DTYPE))

    @property
    def gamma(self) -> torch.Tensor:
        return torch.exp(self.gamma_logparam)


@dataclass
class CameraView:
    """A posed pinhole camera, optionally carrying a target image and supervision maps.

    ``R`` and ``t`` map world to camera coordinates: ``x_cam = R @ x_world + t``.
    The camera looks along +z with +y pointing down the image.
    """

    id: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray
    t: np.ndarray
    image: Optional[np.ndarray] = None
    pseudo_depth: Optional[np.ndarray] = None
    motion_mask: Optional[np.ndarray] = None
    is_interpolated: bool = False
    weight_handle: Optional[FrameWeight] = None

    def __post_init__(self):
        self.R = check_rotation(self.R)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        shape = (self.height, self.width)
        if self.image is not None:
            self.image = check_image(self.image)
            if self.image.shape[:2] != shape:
                raise ContractViolation(f"image shape {self.image.shape[:2]} does not match camera {shape}")
        if self.pseudo_depth is not None:
            self.pseudo_depth = check_map(self.pseudo_depth, shape, "pseudo_depth")
        if self.motion_mask is not None:
            self.motion_mask = check_mask(self.motion_mask, shape)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def mask_or_ones(self) -> np.ndarray:
        if self.motion_mask is None:
            return np.ones(self.shape)
        return self.motion_mask

    def with_pose(self, R, t, **changes) -> "CameraView":
        return replace(self, R=np.asarray(R), t=np.asarray(t), **changes)


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth_z: float


def camera_tensors(cam: CameraView) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.as_tensor(cam.R, dtype=DTYPE), torch.as_tensor(cam.t, dtype=DTYPE)


def project(means: torch.Tensor, cov3d: torch.Tensor, cam: CameraView, blur: float = COV2D_BLUR):
    """Batched pinhole projection of Gaussian centres and covariances.

    Returns ``(mean2d (N,2), cov2d (N,2,2), z (N,), in_front (N,) bool)``. Culled
    Gaussians still get finite values so that batched code can mask them.
    """
    R, t = camera_tensors(cam)
    p = means @ R.T + t
    z = p[:, 2]
    in_front = z > NEAR_PLANE
    zs = torch.where(in_front, z, torch.ones_like(z))
    x, y = p[:, 0], p[:, 1]
    mean2d = torch.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], dim=-1)
    zero = torch.zeros_like(zs)
    J = torch.stack(
        [
            cam.fx / zs, zero, -cam.fx * x / (zs * zs),
            zero, cam.fy / zs, -cam.fy * y / (zs * zs),
        ],
        dim=-1,
    ).reshape(-1, 2, 3)
    M = J @ R
    cov2d = M @ cov3d @ M.transpose(-1, -2)
    cov2d = cov2d + blur * torch.eye(2, dtype=cov2d.dtype)
    return mean2d, cov2d, z, in_front


def project_gaussian(g: Gaussian3D, cam: CameraView, blur: float = COV2D_BLUR) -> Optional[Splat2D]:
    """Project one Gaussian; returns ``None`` when it is culled by the near plane."""
    means = torch.as_tensor(g.position, dtype=DTYPE)[None]
    cov = torch.as_tensor(g.covariance, dtype=DTYPE)[None]
    mean2d, cov2d, z, in_front = project(means, cov, cam, blur)
    if not bool(in_front[0]):
        return None
    return Splat2D(mean2d[0].numpy(), cov2d[0].numpy(), float(z[0]))


def gaussian_weight(splat: Splat2D, x) -> float:
    d = np.asarray(x, dtype=np.float64) - splat.mean2d
    try:
        m = d @ np.linalg.solve(splat.cov2d, d)
    except np.linalg.LinAlgError as exc:
        raise ContractViolation("singular 2D covariance") from exc
    return float(np.exp(-0.5 * m))
