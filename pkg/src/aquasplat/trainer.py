"""Optimisation loop: initialisation, Adam updates, densification, evaluation, synthetic data."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from ._validation import DTYPE, ContractViolation, NonFiniteError
from .config import TrainConfig
from .dataio import views_to_colmap, write_colmap, write_image, write_pfm, write_ply
from .interp import enrich_point_cloud, interpolate_sequence
from .losses import (
    LossReport,
    LossWeights,
    align_pseudo_depth,
    loss_depth,
    loss_final,
    loss_grey,
    loss_rec,
    loss_smooth,
)
from .medium import MediumNet, MediumSample, medium_for_depths, pixel_medium, restore_image
from .metrics import psnr, ssim
from .render import RenderOutput, render
from .scene import (
    PARAM_NAMES,
    CameraView,
    FrameWeight,
    NEAR_PLANE,
    GaussianCloud,
    logit,
    n_sh_coeffs,
    quat_to_rotmat,
    rgb_to_sh_dc,
)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class OptimState:
    """Adam moments per named parameter plus per-name learning rates."""

    lrs: dict[str, float]
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-15
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adam_step(params: dict[str, torch.Tensor], state: OptimState) -> None:
    """One Adam update for every parameter that has a gradient.

    Parameters without a gradient (``.grad is None``) are left bit-unchanged
    and their moments do not decay.
    """
    b1, b2 = state.betas
    state.step += 1
    with torch.no_grad():
        for name, p in params.items():
            if p.grad is None:
                continue
            lr = state.lrs[name]
            g = p.grad
            if name not in state.m or state.m[name].shape != p.shape:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
                state.t[name] = 0
            state.t[name] += 1
            k = state.t[name]
            m = state.m[name].mul_(b1).add_(g, alpha=1 - b1)
            v = state.v[name].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**k)
            v_hat = v / (1 - b2**k)
            if lr != 0.0:
                p.sub_(lr * m_hat / (v_hat.sqrt() + state.eps))


def position_lr(cfg: TrainConfig, step: int, spatial_scale: float) -> float:
    """Log-linear decay from the initial to the final position learning rate."""
    t = min(max(step / max(cfg.iterations, 1), 0.0), 1.0)
    lr0, lr1 = cfg.lr_position_init, cfg.lr_position_final
    if lr0 <= 0 or lr1 <= 0:
        return lr0 * (1 - t) + lr1 * t
    return spatial_scale * math.exp((1 - t) * math.log(lr0) + t * math.log(lr1))


# --------------------------------------------------------------------------
# initialisation
# --------------------------------------------------------------------------


def init_from_points(points, colours, sh_degree: int = 3, init_opacity: float = 0.1, default_scale: float = 0.01) -> GaussianCloud:
    """One isotropic Gaussian per point, scaled to the distance of its third nearest neighbour."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = np.asarray(colours, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise ContractViolation("cannot initialise from an empty point set")
    if len(cols) != n:
        raise ContractViolation("points and colours differ in length")
    scale = np.full(n, float(default_scale))
    if n > 1:
        k = min(3, n - 1)
        d, _ = cKDTree(pts).query(pts, k=k + 1)
        nn = d[:, k]
        scale = np.where(nn > 0, nn, default_scale)
    sh = np.zeros((n, n_sh_coeffs(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh_dc(cols)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    t = lambda a: torch.as_tensor(a, dtype=DTYPE)
    return GaussianCloud(
        means=t(pts.copy()),
        log_scales=t(np.repeat(np.log(scale)[:, None], 3, axis=1)),
        quats=t(quats),
        opacity_logits=t(np.full(n, float(logit(init_opacity)))),
        sh=t(sh),
        bs_logits=t(np.zeros((n, 3))),
    )


def percentile_depth(points, views: Sequence[CameraView], q: float = 95.0) -> float:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    zs = [(pts @ v.R.T + v.t)[:, 2] for v in views]
    z = np.concatenate(zs) if zs else np.zeros(0)
    z = z[z > 0]
    return float(np.percentile(z, q)) if z.size else 1.0


def scene_extent(views: Sequence[CameraView]) -> float:
    """Radius of the camera centres around their mean, enlarged by 10% (3DGS convention)."""
    c = np.stack([v.center for v in views])
    r = float(np.linalg.norm(c - c.mean(0), axis=1).max()) if len(c) > 1 else 0.0
    return 1.1 * r if r > 0 else 1.0


# --------------------------------------------------------------------------
# per-view objective
# --------------------------------------------------------------------------


def view_pixel_medium(cloud: GaussianCloud, medium: MediumNet, view: CameraView, depth: torch.Tensor,
                      depth_buckets: Optional[int] = None) -> MediumSample:
    """Per-pixel medium for restoration, evaluated the way the render evaluates it.

    With one depth bucket (a per-view medium) every pixel gets the sample taken
    at the mean Gaussian depth; otherwise the network is queried per pixel.
    """
    if depth_buckets != 1:
        return pixel_medium(medium, depth, view.center)
    R, t = (torch.as_tensor(a, dtype=DTYPE) for a in (view.R, view.t))
    z = (cloud.means.detach() @ R.T + t)[:, 2]
    s = medium_for_depths(medium, torch.where(z > NEAR_PLANE, z, torch.zeros_like(z)), view.center, 1)
    h, w = depth.shape
    return MediumSample(*(v[0].reshape(1, 1, 3).expand(h, w, 3) for v in (s.beta_d, s.beta_b, s.b_inf)))


def view_loss(
    cloud: GaussianCloud,
    medium: Optional[MediumNet],
    view: CameraView,
    cfg: TrainConfig,
    *,
    gamma: Optional[torch.Tensor] = None,
    depth_target: Optional[np.ndarray] = None,
    sh_degree: Optional[int] = None,
) -> tuple[LossReport, RenderOutput, torch.Tensor]:
    """Render ``view`` and evaluate the full objective against its image.

    Returns the report, the render and the reconstruction term as a tensor.
    """
    weights = cfg.loss_weights()
    out = render(
        cloud, medium, view, sh_degree=sh_degree, backscatter_mode=cfg.backscatter_mode,
        depth_buckets=cfg.depth_buckets or None,
    )
    if view.image is None:
        raise ContractViolation(f"view {view.id} has no target image")
    target = torch.as_tensor(view.image, dtype=DTYPE)
    mask = torch.as_tensor(view.mask_or_ones(), dtype=DTYPE)
    zero = torch.zeros((), dtype=DTYPE)

    rec = loss_rec(out.colour, target, mask, weights.lambda_r)
    depth_t = torch.as_tensor(depth_target, dtype=DTYPE) if depth_target is not None else None
    depth = zero
    if cfg.use_depth and depth_t is not None:
        depth = loss_depth(out.depth, out.channel_depth, depth_t, weights.lambda_d, weights.lambda_ca)
    grey = zero
    if cfg.use_grey and medium is not None:
        restored = restore_image(out.colour, out.depth, view_pixel_medium(cloud, medium, view, out.depth, cfg.depth_buckets))
        grey = loss_grey(restored)
    smooth = zero
    if weights.lambda_s > 0:
        edges = depth_t if depth_t is not None else out.depth.detach()
        smooth = loss_smooth(out.colour, edges, weights.lambda_b, reduction="mean")
    use_afw = view.is_interpolated and cfg.afw
    report = loss_final(rec, depth, grey, smooth, weights, is_interpolated=use_afw, gamma=gamma)
    return report, out, rec


# --------------------------------------------------------------------------
# training state and step
# --------------------------------------------------------------------------


@dataclass
class TrainState:
    cloud: GaussianCloud
    medium: Optional[MediumNet]
    config: TrainConfig
    optim: OptimState
    frame_weights: dict[str, FrameWeight] = field(default_factory=dict)
    spatial_scale: float = 1.0
    iteration: int = 0
    grad_accum: Optional[torch.Tensor] = None
    grad_count: Optional[torch.Tensor] = None
    aligned_depth: dict[str, np.ndarray] = field(default_factory=dict)
    aligned_at: dict[str, int] = field(default_factory=dict)
    train_cloud: bool = True
    train_medium: bool = True

    @property
    def active_sh_degree(self) -> int:
        every = max(self.config.sh_increase_every, 1)
        return min(self.iteration // every, self.config.sh_degree, self.cloud.sh_degree)

    def named_params(self) -> dict[str, torch.Tensor]:
        params: dict[str, torch.Tensor] = {}
        if self.train_cloud:
            params.update(self.cloud.params())
        if self.medium is not None and self.train_medium:
            params.update({f"medium.{n}": p for n, p in self.medium.named_parameters()})
        params.update({f"gamma.{k}": w.gamma_logparam for k, w in self.frame_weights.items()})
        return params


def default_lrs(cfg: TrainConfig, state: TrainState) -> dict[str, float]:
    lrs = {
        "means": position_lr(cfg, 0, state.spatial_scale),
        "log_scales": cfg.lr_scale,
        "quats": cfg.lr_rotation,
        "opacity_logits": cfg.lr_opacity,
        "sh": cfg.lr_sh,
        "bs_logits": cfg.lr_backscatter,
    }
    if state.medium is not None:
        lrs.update({f"medium.{n}": cfg.lr_medium for n, _ in state.medium.named_parameters()})
    lrs.update({f"gamma.{k}": cfg.lr_gamma for k in state.frame_weights})
    return lrs


def make_state(
    cloud: GaussianCloud,
    medium: Optional[MediumNet],
    cfg: TrainConfig,
    frame_weights: Optional[dict[str, FrameWeight]] = None,
    spatial_scale: float = 1.0,
) -> TrainState:
    state = TrainState(cloud, medium, cfg, OptimState(lrs={}), dict(frame_weights or {}), spatial_scale)
    state.optim.lrs = default_lrs(cfg, state)
    return state


def _depth_misfit(out: RenderOutput, target: np.ndarray, cfg: TrainConfig) -> float:
    w = cfg.loss_weights()
    return float(loss_depth(out.depth, out.channel_depth, torch.as_tensor(target, dtype=DTYPE), w.lambda_d, w.lambda_ca))


def _depth_target(state: TrainState, view: CameraView) -> Optional[np.ndarray]:
    if view.pseudo_depth is None or (not state.config.use_depth and not state.config.esl):
        return None
    every = max(state.config.depth_align_every, 1)
    last = state.aligned_at.get(view.id)
    if last is None or state.iteration - last >= every:
        with torch.no_grad():
            out = render(
                state.cloud.detach(), state.medium, view, sh_degree=0,
                backscatter_mode=state.config.backscatter_mode, depth_buckets=state.config.depth_buckets or None,
            )
        valid = out.alpha_acc.numpy() > 0.5
        if valid.sum() >= 2:
            aligned, a, _ = align_pseudo_depth(view.pseudo_depth, out.depth.numpy(), valid)
            if a <= 0:
                aligned = view.pseudo_depth
        else:
            aligned = view.pseudo_depth
        aligned = np.clip(aligned, 0.0, None)
        prev = state.aligned_depth.get(view.id)
        # the fit matches rendered depth only; keep a re-fit only if the full depth loss drops
        if prev is None or _depth_misfit(out, aligned, state.config) < _depth_misfit(out, prev, state.config):
            state.aligned_depth[view.id] = aligned
        state.aligned_at[view.id] = state.iteration
    return state.aligned_depth[view.id]


def train_step(state: TrainState, view: CameraView) -> LossReport:
    """Forward render, composite loss, backward pass and one Adam update."""
    cfg = state.config
    for t in state.cloud.params().values():
        t.requires_grad_(state.train_cloud)
        t.grad = None
    if state.medium is not None:
        for p in state.medium.parameters():
            p.requires_grad_(state.train_medium)
            p.grad = None
    fw = view.weight_handle if (view.is_interpolated and cfg.afw) else None
    for w in state.frame_weights.values():
        w.gamma_logparam.grad = None
        w.gamma_logparam.requires_grad_(w is fw)
    gamma = fw.gamma if fw is not None else None

    depth_target = _depth_target(state, view)
    report, out, rec = view_loss(
        state.cloud, state.medium, view, cfg, gamma=gamma, depth_target=depth_target,
        sh_degree=state.active_sh_degree,
    )
    # densification statistics use the photometric term only, the scale its threshold was tuned for
    if _collect_stats(state) and rec.requires_grad and out.means2d.requires_grad:
        (g2d,) = torch.autograd.grad(rec, out.means2d, retain_graph=True, allow_unused=True)
        _accumulate_grad_stats(state, g2d, out.visible, view)
    total = report.total_tensor
    if total.requires_grad:
        total.backward()
    for name, p in state.named_params().items():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NonFiniteError(f"non-finite gradient for {name} at iteration {state.iteration}: {report}")

    if state.train_cloud:
        state.optim.lrs["means"] = position_lr(cfg, state.iteration, state.spatial_scale)
    adam_step(state.named_params(), state.optim)
    if state.medium is not None and state.train_medium:
        state.medium.snap_float32_()
    state.iteration += 1
    return report


def _collect_stats(state: TrainState) -> bool:
    cfg = state.config
    return (
        cfg.densify and state.train_cloud
        and cfg.densify_from - cfg.densify_every <= state.iteration <= cfg.densify_until
    )


def _accumulate_grad_stats(state: TrainState, grad2d: Optional[torch.Tensor], vis: torch.Tensor, view: CameraView) -> None:
    n = len(state.cloud)
    if state.grad_accum is None or state.grad_accum.shape[0] != n:
        state.grad_accum = torch.zeros(n, dtype=DTYPE)
        state.grad_count = torch.zeros(n, dtype=DTYPE)
    if grad2d is None:
        return
    # pixel-space gradient rescaled to normalised device coordinates
    g = grad2d * torch.tensor([0.5 * view.width, 0.5 * view.height], dtype=DTYPE)
    state.grad_accum[vis] += g[vis].norm(dim=-1)
    state.grad_count[vis] += 1


# --------------------------------------------------------------------------
# densification
# --------------------------------------------------------------------------


def densify_and_prune(
    cloud: GaussianCloud,
    grad_accum: torch.Tensor,
    grad_count: torch.Tensor,
    cfg: TrainConfig,
    extent: float = 1.0,
    generator: Optional[torch.Generator] = None,
) -> tuple[GaussianCloud, torch.Tensor, torch.Tensor]:
    """Clone small / split large high-gradient Gaussians, then prune transparent ones.

    Returns ``(new_cloud, source_index, is_new)``: row ``k`` of the new cloud
    derives from row ``source_index[k]`` of the old one.
    """
    c = cloud.detach()
    avg = torch.where(grad_count > 0, grad_accum / grad_count.clamp_min(1), torch.zeros_like(grad_accum))
    selected = avg >= cfg.densify_grad_threshold
    big = c.scales.max(dim=1).values > cfg.percent_dense * extent
    clone = selected & ~big
    split = selected & big

    raw = c.params()
    keep_idx = torch.nonzero(~split).flatten()
    clone_idx = torch.nonzero(clone).flatten()
    split_idx = torch.nonzero(split).flatten().repeat(2)
    split_part = {k: v[split_idx].clone() for k, v in raw.items()}
    if len(split_idx):
        noise = torch.randn((len(split_idx), 3), dtype=DTYPE, generator=generator) * split_part["log_scales"].exp()
        offsets = (quat_to_rotmat(split_part["quats"]) @ noise[:, :, None])[:, :, 0]
        split_part["means"] = split_part["means"] + offsets
        split_part["log_scales"] = split_part["log_scales"] - math.log(1.6)
    merged = {k: torch.cat([raw[k][keep_idx], raw[k][clone_idx], split_part[k]]) for k in PARAM_NAMES}
    src_t = torch.cat([keep_idx, clone_idx, split_idx])
    fresh_t = torch.cat([
        torch.zeros(len(keep_idx), dtype=torch.bool),
        torch.ones(len(clone_idx) + len(split_idx), dtype=torch.bool),
    ])
    opac = torch.sigmoid(merged["opacity_logits"])
    keep = opac >= cfg.prune_opacity
    if not bool(keep.any()):
        keep[int(torch.argmax(opac))] = True
    merged = {k: v[keep].clone() for k, v in merged.items()}
    new = GaussianCloud(**merged)
    for k, v in new.params().items():
        if not bool(torch.isfinite(v).all()):
            raise NonFiniteError(f"densification produced non-finite {k}")
    return new, src_t[keep], fresh_t[keep]


def _remap_optimizer(state: TrainState, src: torch.Tensor, fresh: torch.Tensor) -> None:
    for name in PARAM_NAMES:
        if name in state.optim.m:
            for buf in (state.optim.m, state.optim.v):
                moved = buf[name][src].clone()
                moved[fresh] = 0.0
                buf[name] = moved


def maybe_densify(state: TrainState, generator: Optional[torch.Generator] = None) -> bool:
    cfg = state.config
    it = state.iteration
    if not (cfg.densify and state.train_cloud):
        return False
    if it < cfg.densify_from or it > cfg.densify_until or it % max(cfg.densify_every, 1):
        return False
    if state.grad_accum is None:
        return False
    new, src, fresh = densify_and_prune(state.cloud, state.grad_accum, state.grad_count, cfg, state.spatial_scale, generator)
    state.cloud = new
    _remap_optimizer(state, src, fresh)
    state.grad_accum = torch.zeros(len(new), dtype=DTYPE)
    state.grad_count = torch.zeros(len(new), dtype=DTYPE)
    return True


# --------------------------------------------------------------------------
# full runs
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    cloud: GaussianCloud
    medium: Optional[MediumNet]
    frame_weights: dict[str, FrameWeight]
    history: list[LossReport]
    config: TrainConfig
    n_init_points: int
    n_interpolated: int
    sh_degree: int


def prepare_views(
    views: Sequence[CameraView], points, colours, cfg: TrainConfig, import_dir=None
) -> tuple[list[CameraView], np.ndarray, np.ndarray, dict[str, FrameWeight]]:
    """Add interpolated frames (and their points) when IFI is enabled."""
    views = list(views)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = np.asarray(colours, dtype=np.float64).reshape(-1, 3)
    weights: dict[str, FrameWeight] = {}
    if not cfg.ifi or len(views) < 2:
        return views, pts, cols, weights
    frames = interpolate_sequence(views, cfg.interp_mode, import_dir)
    pts, cols = enrich_point_cloud(pts, cols, frames, target_ratio=cfg.ifi_ratio)
    extra = [f.as_view() for f in frames]
    if cfg.afw:
        weights = {f.camera.id: f.weight for f in frames}
    return views + extra, pts, cols, weights


def train(
    views: Sequence[CameraView],
    points,
    colours,
    cfg: TrainConfig,
    *,
    import_dir=None,
    log_path=None,
    callback: Optional[Callable[[TrainState, LossReport], None]] = None,
) -> TrainResult:
    """Optimise a cloud and medium against ``views`` (training views only)."""
    if not views:
        raise ContractViolation("no training views")
    torch.manual_seed(cfg.seed)
    all_views, pts, cols, fweights = prepare_views(views, points, colours, cfg, import_dir)
    if len(pts) == 0:
        raise ContractViolation("no initialisation points")
    cloud = init_from_points(pts, cols, cfg.sh_degree, cfg.init_opacity, cfg.init_scale)
    medium = MediumNet(
        n_layers=cfg.mlp_layers, hidden=cfg.mlp_hidden, pe_freqs=cfg.pe_freqs,
        depth_scale=percentile_depth(pts, views), decouple=cfg.decouple, seed=cfg.seed,
    )
    state = make_state(cloud, medium, cfg, fweights, scene_extent(views))
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    history: list[LossReport] = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        if log_file:
            log_file.write(",".join(LossReport.CSV_HEADER) + "\n")
        order: list[int] = []
        while state.iteration < cfg.iterations:
            if not order:
                order = list(rng.permutation(len(all_views)))
            view = all_views[order.pop()]
            report = train_step(state, view)
            report.total_tensor = None
            history.append(report)
            if log_file:
                log_file.write(report.csv_row(state.iteration) + "\n")
            if callback is not None:
                callback(state, report)
            maybe_densify(state, gen)
    finally:
        if log_file:
            log_file.close()
    return TrainResult(
        state.cloud.detach(), medium, fweights, history, cfg, len(pts),
        len(all_views) - len(views), state.active_sh_degree,
    )


def fit_medium(
    cloud: GaussianCloud,
    views: Sequence[CameraView],
    cfg: TrainConfig,
    iterations: Optional[int] = None,
    medium: Optional[MediumNet] = None,
) -> tuple[MediumNet, list[LossReport]]:
    """Optimise only the medium network against ``views`` with the cloud frozen."""
    if medium is None:
        medium = MediumNet(
            n_layers=cfg.mlp_layers, hidden=cfg.mlp_hidden, pe_freqs=cfg.pe_freqs,
            depth_scale=percentile_depth(cloud.means.detach().numpy(), views), decouple=cfg.decouple, seed=cfg.seed,
        )
    state = make_state(cloud.detach(), medium, cfg)
    state.train_cloud = False
    rng = np.random.default_rng(cfg.seed)
    history = []
    n_iter = cfg.iterations if iterations is None else iterations
    order: list[int] = []
    for _ in range(n_iter):
        if not order:
            order = list(rng.permutation(len(views)))
        report = train_step(state, views[order.pop()])
        report.total_tensor = None
        history.append(report)
    return medium, history


def medium_summary(cloud: GaussianCloud, medium: MediumNet, views: Sequence[CameraView], depth_buckets: Optional[int] = None) -> MediumSample:
    """Mean medium parameters over all (Gaussian, view) pairs in front of the camera."""
    acc = []
    with torch.no_grad():
        for v in views:
            R, t = (torch.as_tensor(a, dtype=DTYPE) for a in (v.R, v.t))
            z = (cloud.means.detach() @ R.T + t)[:, 2]
            z = z[z > 0.01]
            s = medium_for_depths(medium, z, v.center, depth_buckets)
            acc.append(torch.cat([s.beta_d, s.beta_b, s.b_inf], dim=1))
    allv = torch.cat(acc).mean(0)
    return MediumSample(allv[0:3], allv[3:6], allv[6:9])


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    rows: list[dict]
    mean_psnr: float = float("nan")
    mean_ssim: float = float("nan")

    def to_csv(self) -> str:
        lines = ["view,psnr,ssim"]
        lines += [f"{r['view']},{r['psnr']!r},{r['ssim']!r}" for r in self.rows]
        if self.rows:
            lines.append(f"mean,{self.mean_psnr!r},{self.mean_ssim!r}")
        return "\n".join(lines) + "\n"


def render_view(cloud, medium, view, cfg: Optional[TrainConfig] = None, sh_degree=None) -> RenderOutput:
    cfg = cfg or TrainConfig()
    with torch.no_grad():
        return render(
            cloud, medium, view, sh_degree=sh_degree, backscatter_mode=cfg.backscatter_mode,
            depth_buckets=cfg.depth_buckets or None,
        )


def restored_view(cloud, medium: MediumNet, view: CameraView, cfg: Optional[TrainConfig] = None, sh_degree=None) -> np.ndarray:
    """Medium-free image: the analytic inverse of the formation model on the render."""
    out = render_view(cloud, medium, view, cfg, sh_degree)
    with torch.no_grad():
        buckets = (cfg or TrainConfig()).depth_buckets
        J = restore_image(out.colour, out.depth, view_pixel_medium(cloud, medium, view, out.depth, buckets))
    return J.numpy()


def evaluate(
    cloud: GaussianCloud,
    medium: Optional[MediumNet],
    test_views: Sequence[CameraView],
    cfg: Optional[TrainConfig] = None,
    out_dir=None,
    sh_degree=None,
) -> EvalReport:
    if not test_views:
        log.warning("empty test set; nothing to evaluate")
        return EvalReport([])
    rows = []
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    for v in test_views:
        img = render_view(cloud, medium, v, cfg, sh_degree).colour.numpy()
        rows.append({"view": v.id, "psnr": psnr(img, v.image), "ssim": ssim(img, v.image)})
        if out_dir is not None:
            write_image(Path(out_dir) / f"{v.id}.png", img)
    report = EvalReport(
        rows,
        float(np.mean([r["psnr"] for r in rows])),
        float(np.mean([r["ssim"] for r in rows])),
    )
    if out_dir is not None:
        (Path(out_dir) / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    return report


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------


@dataclass
class SyntheticScene:
    views: list[CameraView]  # degraded images, ground-truth depth as pseudo depth
    clean: list[np.ndarray]
    depths: list[np.ndarray]
    cloud: GaussianCloud
    points: np.ndarray
    colours: np.ndarray
    medium: MediumSample


def look_at(center, target, up=(0.0, -1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``center`` looking at ``target`` (+y down)."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ center


def _colour_field(p: np.ndarray, phase: np.ndarray) -> np.ndarray:
    f = np.stack([np.sin(1.3 * p[:, 0] + phase[0]) * np.cos(0.9 * p[:, 1] + phase[1]),
                  np.sin(0.8 * p[:, 1] + phase[2]) * np.cos(1.1 * p[:, 2] + phase[3]),
                  np.cos(1.0 * p[:, 0] + 0.7 * p[:, 2] + phase[4])], axis=1)
    return 0.5 + 0.3 * f


def make_synthetic_scene(
    seed: int,
    n_gaussians: int,
    n_views: int,
    medium_truth: MediumSample,
    out_dir=None,
    width: int = 64,
    height: int = 48,
    point_noise: float = 0.01,
) -> SyntheticScene:
    """Random Gaussian scene (back wall plus foreground blobs) seen through a known medium.

    Clean images are rendered without medium; degraded images are rendered
    with the known constant medium applied per Gaussian (global backscatter),
    the same image formation the medium network is fitted through. Writes a
    scene directory when ``out_dir`` is given.
    """
    if n_gaussians < 1 or n_views < 2:
        raise ContractViolation("need at least one Gaussian and two views")
    rng = np.random.default_rng(seed)
    n_wall = max(1, int(round(0.6 * n_gaussians)))
    n_obj = n_gaussians - n_wall
    phase = rng.uniform(0, 2 * np.pi, 5)

    # back wall on the plane z = 2, facing the cameras
    side = int(math.ceil(math.sqrt(n_wall * 10.0 / 7.0)))
    gx, gy = np.meshgrid(np.linspace(-5, 5, side), np.linspace(-3.5, 3.5, max(2, int(math.ceil(n_wall / side)))))
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)[:n_wall]
    spacing = 10.0 / max(side - 1, 1)
    wall = np.column_stack([grid + rng.normal(0, 0.1 * spacing, grid.shape), 2.0 + rng.normal(0, 0.02, len(grid))])
    wall_scale = np.column_stack([np.full((len(grid), 2), 0.6 * spacing), np.full(len(grid), 0.05)])

    # foreground blobs
    n_blobs = 4
    centres = rng.uniform([-1.5, -1.0, -1.0], [1.5, 1.0, 1.0], size=(n_blobs, 3))
    owner = rng.integers(0, n_blobs, n_obj)
    obj = centres[owner] + rng.normal(0, 0.35, (n_obj, 3))
    obj_scale = rng.uniform(0.08, 0.2, (n_obj, 3))

    means = np.concatenate([wall, obj]) if n_obj else wall
    scales = np.concatenate([wall_scale, obj_scale]) if n_obj else wall_scale
    quats = np.zeros((n_gaussians, 4))
    quats[:, 0] = 1.0
    if n_obj:
        q = rng.normal(size=(n_obj, 4))
        quats[n_wall:] = q / np.linalg.norm(q, axis=1, keepdims=True)
    colours = np.clip(_colour_field(means, phase) + rng.normal(0, 0.05, (n_gaussians, 3)), 0.05, 0.95)
    opac = np.concatenate([np.full(n_wall, 0.98), np.full(n_obj, 0.92)])
    sh = np.zeros((n_gaussians, 1, 3))
    sh[:, 0, :] = rgb_to_sh_dc(colours)
    t = lambda a: torch.as_tensor(a, dtype=DTYPE)
    cloud = GaussianCloud(
        means=t(means), log_scales=t(np.log(scales)), quats=t(quats),
        opacity_logits=t(logit(opac)), sh=t(sh), bs_logits=t(np.zeros((n_gaussians, 3))),
    )

    f = 0.9 * width
    views, clean, depths = [], [], []
    for i in range(n_views):
        az = np.deg2rad(-20.0 + 40.0 * i / (n_views - 1))
        el = np.deg2rad(4.0 * np.sin(2.0 * np.pi * i / n_views))
        center = 4.5 * np.array([np.sin(az) * np.cos(el), np.sin(el), -np.cos(az) * np.cos(el)])
        R, tv = look_at(center, np.zeros(3))
        cam = CameraView(f"view_{i:03d}", f, f, width / 2, height / 2, width, height, R, tv)
        with torch.no_grad():
            out = render(cloud, None, cam)
            deg = render(cloud, medium_truth, cam, backscatter_mode="global").colour.numpy()
        img = out.colour.numpy()
        dep = out.depth.numpy()
        clean.append(img)
        depths.append(dep)
        views.append(CameraView(cam.id, f, f, width / 2, height / 2, width, height, R, tv,
                                image=np.clip(deg, 0, 1), pseudo_depth=dep))
    points = means + rng.normal(0, point_noise, means.shape)
    scene = SyntheticScene(views, clean, depths, cloud, points, colours, medium_truth)
    if out_dir is not None:
        write_synthetic_scene(scene, out_dir)
    return scene


def write_synthetic_scene(scene: SyntheticScene, out_dir) -> None:
    import json

    root = Path(out_dir)
    for sub in ("images", "clean", "depth", "sparse/0"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for v, c, d in zip(scene.views, scene.clean, scene.depths):
        write_image(root / "images" / f"{v.id}.png", v.image)
        write_image(root / "clean" / f"{v.id}.png", c)
        write_pfm(root / "depth" / f"{v.id}.pfm", d)
    write_colmap(views_to_colmap(scene.views, scene.points, scene.colours), root / "sparse" / "0")
    cloud = scene.cloud
    props = {k: np.ascontiguousarray(v) for k, v in cloud_to_ply_props(cloud).items()}
    write_ply(root / "gt_cloud.ply", props)
    m = scene.medium
    truth = {
        "beta_d": [float(x) for x in np.asarray(m.beta_d)],
        "beta_b": [float(x) for x in np.asarray(m.beta_b)],
        "b_inf": [float(x) for x in np.asarray(m.b_inf)],
    }
    (root / "medium_truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cloud_to_ply_props(cloud: GaussianCloud) -> dict[str, np.ndarray]:
    """Gaussian parameters as float64 PLY vertex properties (3DGS-style names)."""
    c = {k: v.detach().cpu().numpy().astype(np.float64) for k, v in cloud.params().items()}
    props = {"x": c["means"][:, 0], "y": c["means"][:, 1], "z": c["means"][:, 2]}
    k = c["sh"].shape[1]
    for ch in range(3):
        props[f"f_dc_{ch}"] = c["sh"][:, 0, ch]
    n = 0
    for ch in range(3):
        for j in range(1, k):
            props[f"f_rest_{n}"] = c["sh"][:, j, ch]
            n += 1
    props["opacity"] = c["opacity_logits"]
    for i in range(3):
        props[f"scale_{i}"] = c["log_scales"][:, i]
    for i in range(4):
        props[f"rot_{i}"] = c["quats"][:, i]
    for i in range(3):
        props[f"bs_{i}"] = c["bs_logits"][:, i]
    return props


def cloud_from_ply_props(props: dict[str, np.ndarray]) -> GaussianCloud:
    n_rest = sum(1 for k in props if k.startswith("f_rest_"))
    k = 1 + n_rest // 3
    n = len(props["x"])
    sh = np.zeros((n, k, 3))
    for ch in range(3):
        sh[:, 0, ch] = props[f"f_dc_{ch}"]
    m = 0
    for ch in range(3):
        for j in range(1, k):
            sh[:, j, ch] = props[f"f_rest_{m}"]
            m += 1
    col = lambda names: np.stack([np.asarray(props[x], dtype=np.float64) for x in names], axis=1)
    t = lambda a: torch.as_tensor(a, dtype=DTYPE)
    bs = col([f"bs_{i}" for i in range(3)]) if "bs_0" in props else np.zeros((n, 3))
    return GaussianCloud(
        means=t(col(["x", "y", "z"])),
        log_scales=t(col([f"scale_{i}" for i in range(3)])),
        quats=t(col([f"rot_{i}" for i in range(4)])),
        opacity_logits=t(np.asarray(props["opacity"], dtype=np.float64)),
        sh=t(sh),
        bs_logits=t(bs),
    )
