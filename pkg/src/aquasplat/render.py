"""Tile-based differentiable rasterisation of medium-corrected Gaussians.

The forward pass is written with torch tensor ops so reverse-mode gradients
come from autograd; :func:`render_backward` packages them per parameter group.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from ._validation import DTYPE, ContractViolation, NonFiniteError, as_tensor
from .medium import MediumNet, MediumSample, backscatter_colour, correct_colour, medium_for_depths
from .scene import CameraView, GaussianCloud, eval_sh, project

TILE_SIZE = 16
MIN_TRANSMITTANCE = 1e-4
DEPTH_EPS = 1e-6
CULL_SIGMA = 3.0


@dataclass
class RenderOutput:
    colour: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    channel_depth: torch.Tensor  # (H, W, 3, 2): [..., 0] direct, [..., 1] backscatter
    alpha_acc: torch.Tensor  # (H, W)
    means2d: Optional[torch.Tensor] = field(default=None, repr=False)
    radii: Optional[torch.Tensor] = field(default=None, repr=False)
    visible: Optional[torch.Tensor] = field(default=None, repr=False)


def alpha_blend(alpha_hat: torch.Tensor, values: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Front-to-back compositing along the last Gaussian axis.

    ``alpha_hat`` is ``(..., G)`` sorted front to back; ``values`` is ``(..., G)``
    or ``(..., G, C)``. Returns ``(blended, alpha_acc)``; contributions stop once
    the transmittance in front of a Gaussian drops below ``MIN_TRANSMITTANCE``.
    """
    w, t_final = blend_weights(alpha_hat)
    if values.ndim == alpha_hat.ndim:
        return (w * values).sum(-1), 1.0 - t_final
    return (w.unsqueeze(-1) * values).sum(-2), 1.0 - t_final


def blend_weights(alpha_hat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    one_minus = 1.0 - alpha_hat
    t_incl = torch.cumprod(one_minus, dim=-1)
    t_excl = torch.cat([torch.ones_like(t_incl[..., :1]), t_incl[..., :-1]], dim=-1)
    include = t_excl.detach() >= MIN_TRANSMITTANCE
    w = torch.where(include, alpha_hat * t_excl, torch.zeros_like(alpha_hat))
    t_final = torch.prod(torch.where(include, one_minus, torch.ones_like(one_minus)), dim=-1)
    return w, t_final


def _conic_and_radius(cov2d: torch.Tensor):
    a, b, d = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * d - b * b
    conic = torch.stack([d / det, -b / det, a / det], dim=-1)
    with torch.no_grad():
        mid = 0.5 * (a + d)
        lam = mid + torch.sqrt(torch.clamp_min(mid * mid - det, 0.0))
        radius = CULL_SIGMA * torch.sqrt(lam)
    return conic, radius


def _tile_terms(mean2d, conic, radius, idx, valid, x0, y0, tile_size):
    """Exponent coefficients ``(T, G, 6)``, pixel features ``(P, 6)`` and the per-pixel 3-sigma box mask.

    The exponent is a quadratic form in tile-local pixel coordinates, so it is
    evaluated as one batched matrix product.
    """
    loc = torch.arange(tile_size, dtype=DTYPE) + 0.5
    mx = mean2d[idx][..., 0] - x0[:, None]  # (T, G), tile-local
    my = mean2d[idx][..., 1] - y0[:, None]
    con = conic[idx]
    a, b, c = con[..., 0], con[..., 1], con[..., 2]
    # -0.5 (a dx^2 + c dy^2) - b dx dy with dx = u - mx, dy = v - my
    coef = torch.stack([
        -0.5 * (a * mx * mx + c * my * my) - b * mx * my,
        a * mx + b * my,
        c * my + b * mx,
        -0.5 * a,
        -0.5 * c,
        -b,
    ], dim=-1)
    v, u = torch.meshgrid(loc, loc, indexing="ij")
    u, v = u.reshape(-1), v.reshape(-1)
    feats = torch.stack([torch.ones_like(u), u, v, u * u, v * v, u * v], dim=-1)
    with torch.no_grad():
        # per-pixel box, so the result does not depend on the tiling
        r = radius[idx]
        in_x = ((loc[None, :, None] - mx.detach()[:, None, :]).abs() <= r[:, None, :]) & valid[:, None, :]
        in_y = (loc[None, :, None] - my.detach()[:, None, :]).abs() <= r[:, None, :]
        inside = (in_y[:, :, None, :] & in_x[:, None, :, :]).reshape(len(idx), -1, idx.shape[1])
    return coef, feats, inside


def _tile_alpha(mean2d, conic, radius, opac, idx, valid, x0, y0, tile_size):
    """Per (tile, pixel, entry) opacity inside each splat's 3-sigma box."""
    coef, feats, inside = _tile_terms(mean2d, conic, radius, idx, valid, x0, y0, tile_size)
    power = torch.matmul(feats, coef.transpose(1, 2))  # (T, P, G)
    return inside, torch.where(inside, opac[idx][:, None, :] * torch.exp(power), torch.zeros_like(power))


def _live_entries(mean2d, conic, radius, opac, idx, valid, x0, y0, tile_size) -> torch.Tensor:
    """Superset of the entries with non-zero blending weight in some pixel, ``(T, G)``.

    The exponential and transmittance are screened in float32 against half the
    cut-off, a margin far above float32 rounding, so no weighted entry is dropped.
    """
    with torch.no_grad():
        coef, feats, inside = _tile_terms(mean2d.detach(), conic.detach(), radius, idx, valid, x0, y0, tile_size)
        power = torch.matmul(feats, coef.transpose(1, 2)).float()
        alpha = torch.where(inside, opac.detach().float()[idx][:, None, :] * torch.exp(power), torch.zeros_like(power))
        t_incl = torch.cumprod(1.0 - alpha, dim=-1)
        t_excl = torch.cat([torch.ones_like(t_incl[..., :1]), t_incl[..., :-1]], dim=-1)
        return (inside & (t_excl >= 0.5 * MIN_TRANSMITTANCE)).any(dim=1)


def gaussian_colours(cloud: GaussianCloud, cam: CameraView, sh_degree: int) -> torch.Tensor:
    center = torch.as_tensor(cam.center, dtype=DTYPE)
    dirs = cloud.means - center
    dirs = dirs / dirs.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return eval_sh(cloud.sh, dirs, sh_degree)


def render(
    cloud: GaussianCloud,
    medium: "Optional[MediumNet | MediumSample]",
    cam: CameraView,
    *,
    sh_degree: Optional[int] = None,
    backscatter_mode: str = "blend",
    depth_buckets: Optional[int] = 64,
    tile_size: int = TILE_SIZE,
) -> RenderOutput:
    """Render colour, depth, per-channel medium depths and accumulated opacity.

    ``medium=None`` is the identity medium (all transmissions 1), which reduces
    to plain Gaussian splatting. A ``MediumSample`` is a constant medium.
    """
    if len(cloud) == 0:
        raise ContractViolation("cannot render an empty cloud")
    degree = cloud.sh_degree if sh_degree is None else sh_degree
    H, W = cam.height, cam.width
    n = len(cloud)

    mean2d, cov2d, z, in_front = project(cloud.means, cloud.covariances(), cam)
    conic, radius = _conic_and_radius(cov2d)
    colours = gaussian_colours(cloud, cam, degree)
    zpos = torch.where(in_front, z, torch.zeros_like(z))
    if medium is None:
        corrected = colours
        T_d = T_b = torch.ones(n, 3, dtype=DTYPE)
    else:
        sample = medium_for_depths(medium, zpos, cam.center, depth_buckets)
        T_d = torch.exp(-sample.beta_d * zpos[:, None])
        T_b = torch.exp(-sample.beta_b * zpos[:, None])
        b = backscatter_colour(backscatter_mode, cloud.backscatter_colours, sample.b_inf)
        corrected = correct_colour(colours, T_d, T_b, b)
    opac = cloud.opacities

    with torch.no_grad():
        m2 = mean2d.detach()
        lo = m2 - radius[:, None]
        hi = m2 + radius[:, None]
        on_screen = (hi[:, 0] >= 0) & (lo[:, 0] <= W) & (hi[:, 1] >= 0) & (lo[:, 1] <= H)
        visible = in_front & on_screen & torch.isfinite(radius)

    tx, ty = math.ceil(W / tile_size), math.ceil(H / tile_size)
    out_colour = torch.zeros(ty * tile_size, tx * tile_size, 3, dtype=DTYPE)
    out_depth = torch.zeros(ty * tile_size, tx * tile_size, dtype=DTYPE)
    out_cdepth = torch.zeros(ty * tile_size, tx * tile_size, 3, 2, dtype=DTYPE)
    out_alpha = torch.zeros(ty * tile_size, tx * tile_size, dtype=DTYPE)

    vis_idx = torch.nonzero(visible).flatten()
    if vis_idx.numel() > 0:
        # global stable depth sort, ties broken by index
        order = vis_idx[torch.sort(z.detach()[vis_idx], stable=True).indices]
        n_tiles = tx * ty
        t_ids = torch.arange(n_tiles)
        x0 = (t_ids % tx).to(DTYPE) * tile_size
        y0 = (t_ids // tx).to(DTYPE) * tile_size
        x1, y1 = x0 + tile_size, y0 + tile_size
        lo_o, hi_o = lo[order], hi[order]
        overlap = (
            (hi_o[None, :, 0] >= x0[:, None])
            & (lo_o[None, :, 0] <= x1[:, None])
            & (hi_o[None, :, 1] >= y0[:, None])
            & (lo_o[None, :, 1] <= y1[:, None])
        )
        counts = overlap.sum(1)
        g_max = max(int(counts.max()), 1)
        big = order.numel()
        rank = torch.arange(big).expand(n_tiles, big)
        key = torch.where(overlap, rank, torch.full_like(rank, big))
        key = torch.sort(key, dim=1).values[:, :g_max]
        valid = key < big
        idx = order[key.clamp(max=big - 1)]  # (T, G)

        # drop entries that touch no pixel or lie past termination; exact, they carry zero weight
        with torch.no_grad():
            live = _live_entries(mean2d, conic, radius, opac, idx, valid, x0, y0, tile_size)
            g_live = max(int(live.sum(1).max()), 1)
            if g_live < live.shape[1]:
                cols = torch.arange(live.shape[1]).expand_as(live)
                pick = torch.where(live, cols, torch.full_like(cols, live.shape[1]))
                pick = torch.sort(pick, dim=1).values[:, :g_live]
                valid = pick < live.shape[1]
                idx = idx.gather(1, pick.clamp(max=live.shape[1] - 1))

        _, alpha_hat = _tile_alpha(mean2d, conic, radius, opac, idx, valid, x0, y0, tile_size)

        w, t_final = blend_weights(alpha_hat)
        colour = torch.einsum("tpg,tgc->tpc", w, corrected[idx])
        w_sum = w.sum(-1)
        zi = zpos[idx]
        depth = torch.einsum("tpg,tg->tp", w, zi) / torch.clamp_min(w_sum, DEPTH_EPS)
        cdepth = []
        for trans in (T_d, T_b):
            tn = trans[idx]  # (T, G, 3)
            num = torch.einsum("tpg,tgc->tpc", w, tn * zi[:, :, None])
            den = torch.einsum("tpg,tgc->tpc", w, tn)
            cdepth.append(num / torch.clamp_min(den, DEPTH_EPS))
        cdepth = torch.stack(cdepth, dim=-1)  # (T, P, 3, 2)

        def untile(t):
            t = t.reshape((ty, tx, tile_size, tile_size) + t.shape[2:])
            t = t.permute((0, 2, 1, 3) + tuple(range(4, t.ndim)))
            return t.reshape((ty * tile_size, tx * tile_size) + t.shape[4:])

        out_colour = untile(colour)
        out_depth = untile(depth)
        out_cdepth = untile(cdepth)
        out_alpha = untile(1.0 - t_final)

    return RenderOutput(
        colour=out_colour[:H, :W],
        depth=out_depth[:H, :W],
        channel_depth=out_cdepth[:H, :W],
        alpha_acc=out_alpha[:H, :W],
        means2d=mean2d,
        radii=radius,
        visible=visible,
    )


@dataclass
class GradientBuffer:
    gaussians: dict[str, torch.Tensor]
    medium: dict[str, torch.Tensor] = field(default_factory=dict)
    frame_weights: dict[str, torch.Tensor] = field(default_factory=dict)

    def all_finite(self) -> bool:
        groups = (self.gaussians, self.medium, self.frame_weights)
        return all(bool(torch.isfinite(g).all()) for d in groups for g in d.values())

    def is_zero(self) -> bool:
        groups = (self.gaussians, self.medium, self.frame_weights)
        return all(bool((g == 0).all()) for d in groups for g in d.values())


def render_backward(
    cloud: GaussianCloud,
    medium: Optional[MediumNet],
    cam: CameraView,
    grad_colour,
    grad_depth=None,
    frame_weights: Optional[dict] = None,
    **render_kwargs,
) -> GradientBuffer:
    """Reverse-mode gradients of ``<grad_colour, colour> + <grad_depth, depth>``.

    The forward pass is recomputed from detached copies, so ``cloud`` is left
    untouched.
    """
    gc = as_tensor(grad_colour)
    if tuple(gc.shape) != (cam.height, cam.width, 3):
        raise ContractViolation(f"colour gradient has shape {tuple(gc.shape)}")
    gd = torch.zeros(cam.height, cam.width, dtype=DTYPE) if grad_depth is None else as_tensor(grad_depth)
    if tuple(gd.shape) != (cam.height, cam.width):
        raise ContractViolation(f"depth gradient has shape {tuple(gd.shape)}")
    if not (bool(torch.isfinite(gc).all()) and bool(torch.isfinite(gd).all())):
        raise NonFiniteError("upstream gradients contain non-finite values")

    leaf = cloud.detach().requires_grad_(True)
    g_names = list(leaf.params())
    inputs = list(leaf.params().values())
    m_names: list[str] = []
    if medium is not None:
        for name, p in medium.named_parameters():
            m_names.append(name)
            inputs.append(p)
    out = render(leaf, medium, cam, **render_kwargs)
    scalar = (out.colour * gc).sum() + (out.depth * gd).sum()
    if scalar.requires_grad:
        grads = torch.autograd.grad(scalar, inputs, allow_unused=True)
    else:
        grads = [None] * len(inputs)
    grads = [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, grads)]
    fw = {}
    for fid, weight in (frame_weights or {}).items():
        fw[fid] = torch.zeros_like(weight.gamma_logparam)
    buf = GradientBuffer(
        gaussians=dict(zip(g_names, grads[: len(g_names)])),
        medium=dict(zip(m_names, grads[len(g_names):])),
        frame_weights=fw,
    )
    if not buf.all_finite():
        raise NonFiniteError("non-finite gradients produced by render_backward")
    return buf
