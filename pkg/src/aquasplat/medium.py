"""Water-medium model: per-channel attenuation/backscatter MLP and colour correction."""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ._validation import DTYPE, ContractViolation, as_tensor, check_finite

N_INPUTS = 4  # normalised depth + camera position xyz
N_OUTPUTS = 9  # beta_d (3), beta_b (3), b_inf (3)
BACKSCATTER_MODES = ("blend", "per-gaussian", "global")


@dataclass
class MediumSample:
    beta_d: torch.Tensor
    beta_b: torch.Tensor
    b_inf: torch.Tensor

    @classmethod
    def constant(cls, beta_d, beta_b, b_inf) -> "MediumSample":
        return cls(as_tensor(beta_d), as_tensor(beta_b), as_tensor(b_inf))


def encode_inputs(depth_z, cam_pos, pe_freqs: int = 4, depth_scale: float = 1.0) -> torch.Tensor:
    """Sinusoidal encoding of normalised depth and camera position.

    ``depth_z`` has shape ``(M,)``; ``cam_pos`` is ``(3,)`` or ``(M, 3)``. Depth
    is divided by ``depth_scale`` and clamped to [0, 1] so the lowest
    frequency stays injective. Output shape ``(M, 2 * pe_freqs * 4)``.
    """
    z = as_tensor(depth_z).reshape(-1)
    if bool((z < 0).any()):
        raise ContractViolation("depth_z must be non-negative")
    pos = as_tensor(cam_pos)
    if pos.ndim == 1:
        pos = pos.expand(z.shape[0], 3)
    u = torch.cat([torch.clamp(z / depth_scale, 0.0, 1.0)[:, None], pos / depth_scale], dim=1)
    freqs = (2.0 ** torch.arange(pe_freqs, dtype=DTYPE)) * math.pi
    ang = u[:, :, None] * freqs  # (M, 4, F)
    return torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).reshape(z.shape[0], -1)


class MediumNet(nn.Module):
    """MLP mapping encoded depth and viewpoint to per-channel medium parameters.

    Hidden layers use ReLU; the 9 outputs go through softplus (six betas) and
    sigmoid (three veiling-light values). With ``decouple=False`` the three
    channel pre-activations of each beta are averaged, tying the channels.
    """

    def __init__(
        self,
        n_layers: int = 5,
        hidden: int = 64,
        pe_freqs: int = 4,
        depth_scale: float = 1.0,
        decouple: bool = True,
        seed: int = 0,
    ):
        super().__init__()
        if n_layers < 1:
            raise ContractViolation("MediumNet needs at least one layer")
        self.n_layers = n_layers
        self.hidden = hidden
        self.pe_freqs = pe_freqs
        self.depth_scale = float(np.float32(depth_scale))
        self.decouple = decouple
        widths = [2 * pe_freqs * N_INPUTS] + [hidden] * (n_layers - 1) + [N_OUTPUTS]
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:])
        )
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in self.layers[:-1]:
                bound = math.sqrt(6.0 / layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=gen)
                layer.bias.zero_()
            self.layers[-1].weight.zero_()
            self.layers[-1].bias.zero_()
        self.snap_float32_()

    def forward(self, depth_z, cam_pos) -> MediumSample:
        h = encode_inputs(depth_z, cam_pos, self.pe_freqs, self.depth_scale)
        for layer in self.layers[:-1]:
            h = F.relu(layer(h))
        out = self.layers[-1](h)
        pre_d, pre_b, pre_inf = out[:, 0:3], out[:, 3:6], out[:, 6:9]
        if not self.decouple:
            pre_d = pre_d.mean(dim=1, keepdim=True).expand(-1, 3)
            pre_b = pre_b.mean(dim=1, keepdim=True).expand(-1, 3)
        return MediumSample(F.softplus(pre_d), F.softplus(pre_b), torch.sigmoid(pre_inf))

    @torch.no_grad()
    def snap_float32_(self) -> "MediumNet":
        """Round weights to float32-representable values so checkpoints are lossless."""
        for p in self.parameters():
            p.copy_(p.float().to(DTYPE))
        return self


def sample_medium(net: MediumNet, depth_z, cam_pos) -> MediumSample:
    s = net(depth_z, cam_pos)
    for name in ("beta_d", "beta_b", "b_inf"):
        check_finite(getattr(s, name), f"medium output {name}")
    return s


def medium_for_depths(
    net: "MediumNet | MediumSample", z: torch.Tensor, cam_pos, n_buckets: Optional[int] = 64
) -> MediumSample:
    """Per-Gaussian medium parameters for camera-space depths ``z``.

    A constant ``MediumSample`` (3-vectors) is broadcast to every depth.

    ``n_buckets`` >= 2 evaluates the MLP at evenly spaced depth nodes over the
    normalisation range and interpolates linearly; 1 evaluates once at the mean
    depth (a per-view medium); ``None`` or 0 evaluates every depth directly.
    """
    if isinstance(net, MediumSample):
        n = z.shape[0]
        return MediumSample(*(v.reshape(1, 3).expand(n, 3) for v in (net.beta_d, net.beta_b, net.b_inf)))
    zc = torch.clamp_min(z, 0.0)
    if not n_buckets:
        return sample_medium(net, zc, cam_pos)
    if n_buckets == 1:
        s = sample_medium(net, zc.detach().mean().reshape(1), cam_pos)
        n = z.shape[0]
        return MediumSample(s.beta_d.expand(n, 3), s.beta_b.expand(n, 3), s.b_inf.expand(n, 3))
    nodes = torch.linspace(0.0, net.depth_scale, n_buckets, dtype=DTYPE)
    s = sample_medium(net, nodes, cam_pos)
    pos = torch.clamp(zc / net.depth_scale, 0.0, 1.0) * (n_buckets - 1)
    lo = torch.clamp(pos.detach().floor().long(), max=n_buckets - 2)
    frac = (pos - lo.to(DTYPE))[:, None]

    def lerp(v):
        return v[lo] * (1.0 - frac) + v[lo + 1] * frac

    return MediumSample(lerp(s.beta_d), lerp(s.beta_b), lerp(s.b_inf))


def transmission(sample: MediumSample, z) -> tuple[torch.Tensor, torch.Tensor]:
    """Direct and backscatter transmissions ``exp(-beta * z)`` per channel."""
    z = as_tensor(z)
    if bool((z < 0).any()):
        raise ContractViolation("distance must be non-negative")
    z = z.unsqueeze(-1) if z.ndim > 0 else z
    return torch.exp(-sample.beta_d * z), torch.exp(-sample.beta_b * z)


def correct_colour(c, T_d, T_b, b, clamp: bool = True) -> torch.Tensor:
    """Attenuate the object colour and add backscatter: ``T_d * c + (1 - T_b) * b``."""
    out = as_tensor(T_d) * as_tensor(c) + (1.0 - as_tensor(T_b)) * as_tensor(b)
    return torch.clamp(out, 0.0, 1.0) if clamp else out


def backscatter_colour(mode: str, gaussian_b: torch.Tensor, b_inf: torch.Tensor) -> torch.Tensor:
    if mode == "blend":
        return 0.5 * (gaussian_b + b_inf)
    if mode == "per-gaussian":
        return gaussian_b
    if mode == "global":
        return b_inf
    raise ContractViolation(f"unknown backscatter mode {mode!r}; choose from {BACKSCATTER_MODES}")


def _broadcast_sample(sample: MediumSample, depth: torch.Tensor):
    bd, bb, binf = (torch.as_tensor(v, dtype=DTYPE) for v in (sample.beta_d, sample.beta_b, sample.b_inf))
    if bd.ndim == 1:
        bd, bb, binf = (v.expand(depth.shape + (3,)) for v in (bd, bb, binf))
    return bd, bb, binf


def degrade_image(clean, depth, sample: MediumSample) -> torch.Tensor:
    """Per-pixel image formation ``I = J * T_d + B_inf * (1 - T_b)``.

    ``sample`` fields are either 3-vectors (homogeneous water) or ``H x W x 3``.
    """
    J = as_tensor(clean)
    z = as_tensor(depth)
    if J.shape[:2] != z.shape:
        raise ContractViolation(f"image {tuple(J.shape)} and depth {tuple(z.shape)} disagree")
    if bool((z < 0).any()):
        raise ContractViolation("depth must be non-negative")
    bd, bb, binf = _broadcast_sample(sample, z)
    zz = z.unsqueeze(-1)
    return J * torch.exp(-bd * zz) + binf * (1.0 - torch.exp(-bb * zz))


def restore_image(image, depth, sample: MediumSample, min_transmission: float = 1e-3, clamp: bool = True):
    """Analytic inverse of :func:`degrade_image`: ``J = (I - B_inf (1 - T_b)) / T_d``."""
    I = as_tensor(image)
    z = as_tensor(depth)
    if I.shape[:2] != z.shape:
        raise ContractViolation(f"image {tuple(I.shape)} and depth {tuple(z.shape)} disagree")
    bd, bb, binf = _broadcast_sample(sample, z)
    zz = torch.clamp_min(z, 0.0).unsqueeze(-1)
    T_d = torch.clamp_min(torch.exp(-bd * zz), min_transmission)
    J = (I - binf * (1.0 - torch.exp(-bb * zz))) / T_d
    return torch.clamp(J, 0.0, 1.0) if clamp else J


def pixel_medium(net: MediumNet, depth: torch.Tensor, cam_pos) -> MediumSample:
    """Evaluate the medium at every pixel of a depth map; fields are ``H x W x 3``."""
    h, w = depth.shape
    s = sample_medium(net, torch.clamp_min(depth, 0.0).reshape(-1), cam_pos)
    return MediumSample(*(v.reshape(h, w, 3) for v in (s.beta_d, s.beta_b, s.b_inf)))


# --------------------------------------------------------------------------
# checkpoint format: "AQMD" + version + header + per-layer (out, in, weights, bias)
# --------------------------------------------------------------------------

MAGIC = b"AQMD"
VERSION = 1


def medium_to_bytes(net: MediumNet) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BBHHf", VERSION, int(net.decouple), net.pe_freqs, net.n_layers, net.depth_scale))
    for layer in net.layers:
        w = layer.weight.detach().cpu().numpy()
        buf.write(struct.pack("<II", *w.shape))
        buf.write(w.astype("<f4").tobytes())
        buf.write(layer.bias.detach().cpu().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def medium_from_bytes(data: bytes) -> MediumNet:
    if data[:4] != MAGIC:
        raise ValueError("not a medium checkpoint (bad magic)")
    head = struct.calcsize("<BBHHf")
    if len(data) < 4 + head:
        raise ValueError("truncated medium checkpoint")
    version, decouple, pe_freqs, n_layers, depth_scale = struct.unpack_from("<BBHHf", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported medium checkpoint version {version}")
    off = 4 + head
    shapes, arrays = [], []
    for _ in range(n_layers):
        if len(data) < off + 8:
            raise ValueError("truncated medium checkpoint")
        out_f, in_f = struct.unpack_from("<II", data, off)
        off += 8
        n = out_f * in_f + out_f
        if len(data) < off + 4 * n:
            raise ValueError("truncated medium checkpoint")
        flat = np.frombuffer(data, dtype="<f4", count=n, offset=off)
        off += 4 * n
        shapes.append((out_f, in_f))
        arrays.append((flat[: out_f * in_f].reshape(out_f, in_f), flat[out_f * in_f:]))
    if off != len(data):
        raise ValueError("trailing bytes in medium checkpoint")
    hidden = shapes[0][0] if n_layers > 1 else 64
    net = MediumNet(n_layers, hidden, pe_freqs, depth_scale, bool(decouple))
    if [tuple(l.weight.shape) for l in net.layers] != shapes:
        raise ValueError("layer shapes in medium checkpoint are inconsistent")
    with torch.no_grad():
        for layer, (w, b) in zip(net.layers, arrays):
            layer.weight.copy_(torch.from_numpy(w.astype(np.float64)))
            layer.bias.copy_(torch.from_numpy(b.astype(np.float64)))
    net.depth_scale = float(depth_scale)
    return net


def save_medium(net: MediumNet, path) -> None:
    with open(path, "wb") as f:
        f.write(medium_to_bytes(net))


def load_medium(path) -> MediumNet:
    with open(path, "rb") as f:
        return medium_from_bytes(f.read())
