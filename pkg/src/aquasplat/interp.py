"""Intermediate frame synthesis between adjacent views and point-cloud enrichment."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataio import read_image
from .scene import CameraView, FrameWeight, rotmat_to_quat

log = logging.getLogger(__name__)

MODES = ("blend", "flow", "imported")


# --------------------------------------------------------------------------
# poses
# --------------------------------------------------------------------------


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def slerp(q0, q1, t: float) -> np.ndarray:
    """Spherical linear interpolation of unit (w, x, y, z) quaternions along the short arc."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    dot = float(q0 @ q1)
    if dot < 0:
        q1, dot = -q1, -dot
    if dot > 1.0 - 1e-12:
        q = (1 - t) * q0 + t * q1
        return q / np.linalg.norm(q)
    theta = np.arccos(min(dot, 1.0))
    s = np.sin(theta)
    q = (np.sin((1 - t) * theta) * q0 + np.sin(t * theta) * q1) / s
    return q / np.linalg.norm(q)


def interpolate_pose(a: CameraView, b: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint camera: SLERP of orientations, midpoint of camera centres."""
    if np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t):
        return a.R.copy(), a.t.copy()
    R = quat_to_matrix(slerp(rotmat_to_quat(a.R), rotmat_to_quat(b.R), 0.5))
    center = 0.5 * (a.center + b.center)
    return R, -R @ center


# --------------------------------------------------------------------------
# block-matching flow
# --------------------------------------------------------------------------


def _grey(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ np.array([0.299, 0.587, 0.114]) if img.ndim == 3 else img


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    x = img[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _match_blocks(a: np.ndarray, b: np.ndarray, init: np.ndarray, patch: int, radius: int) -> np.ndarray:
    """Integer block displacement minimising mean absolute difference around ``init``."""
    h, w = a.shape
    by, bx = init.shape[:2]
    pad = radius + int(np.abs(init).max(initial=0)) + patch
    bp = np.pad(b, pad, constant_values=np.nan)
    out = np.zeros_like(init)
    for i in range(by):
        for j in range(bx):
            y0, x0 = i * patch, j * patch
            blk = a[y0:min(y0 + patch, h), x0:min(x0 + patch, w)]
            ph, pw = blk.shape
            dy0, dx0 = int(init[i, j, 1]), int(init[i, j, 0])
            ys, xs = y0 + dy0 - radius + pad, x0 + dx0 - radius + pad
            region = bp[ys:ys + ph + 2 * radius, xs:xs + pw + 2 * radius]
            win = sliding_window_view(region, (ph, pw))  # (2r+1, 2r+1, ph, pw)
            diff = np.abs(win - blk)
            valid = np.isfinite(diff)
            n = valid.sum(axis=(2, 3))
            cost = np.where(n >= 0.5 * ph * pw, np.nansum(diff, axis=(2, 3)) / np.maximum(n, 1), np.inf)
            # prefer the smallest displacement on ties
            r = np.arange(-radius, radius + 1)
            cost = cost + 1e-9 * (np.abs(r)[:, None] + np.abs(r)[None, :])
            k = int(np.argmin(cost))
            out[i, j] = (dx0 + k % (2 * radius + 1) - radius, dy0 + k // (2 * radius + 1) - radius)
    return out


def block_matching_flow(a, b, patch: int = 8, levels: int = 3, radius: int = 4) -> np.ndarray:
    """Coarse-to-fine block-matching flow from ``a`` to ``b``.

    Returns an ``(H, W, 2)`` array of (dx, dy) with ``a(x) ~ b(x + flow(x))``;
    every pixel takes the displacement of its ``patch`` x ``patch`` block.
    """
    pyr_a, pyr_b = [_grey(a)], [_grey(b)]
    for _ in range(levels - 1):
        if min(pyr_a[-1].shape) < 2 * patch:
            break
        pyr_a.append(_downsample(pyr_a[-1]))
        pyr_b.append(_downsample(pyr_b[-1]))
    flow = None
    for la, lb in zip(reversed(pyr_a), reversed(pyr_b)):
        by, bx = -(-la.shape[0] // patch), -(-la.shape[1] // patch)
        if flow is None:
            init = np.zeros((by, bx, 2), dtype=np.int64)
            rad = radius
        else:
            # each child block inherits its parent's doubled displacement
            py = np.minimum(np.arange(by) // 2, flow.shape[0] - 1)
            px = np.minimum(np.arange(bx) // 2, flow.shape[1] - 1)
            init = 2 * flow[py][:, px]
            rad = 2
        flow = _match_blocks(la, lb, init, patch, rad)
    h, w = pyr_a[0].shape
    per_pixel = np.repeat(np.repeat(flow, patch, axis=0), patch, axis=1)[:h, :w]
    return per_pixel.astype(np.float64)


def _forward_warp(src: np.ndarray, other: np.ndarray, flow: np.ndarray):
    """Splat ``0.5 * (src(x) + other(x + flow))`` to ``x + flow / 2``."""
    h, w = flow.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    tx = np.round(xx + 0.5 * flow[..., 0]).astype(int)
    ty = np.round(yy + 0.5 * flow[..., 1]).astype(int)
    ox = np.round(xx + flow[..., 0]).astype(int)
    oy = np.round(yy + flow[..., 1]).astype(int)
    ok = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h) & (ox >= 0) & (ox < w) & (oy >= 0) & (oy < h)
    acc = np.zeros(src.shape, dtype=np.float64)
    cnt = np.zeros((h, w), dtype=np.float64)
    val = 0.5 * (src[yy[ok], xx[ok]] + other[oy[ok], ox[ok]])
    np.add.at(acc, (ty[ok], tx[ok]), val)
    np.add.at(cnt, (ty[ok], tx[ok]), 1.0)
    return acc, cnt


def flow_midpoint(a: np.ndarray, b: np.ndarray, extra: Optional[tuple] = None, **flow_kwargs):
    """Midpoint frame from bidirectional forward warping, falling back to a blend in holes.

    ``extra`` is an optional pair of per-pixel maps (e.g. depths) warped with
    the same flow; the warped map is returned alongside the image.
    """
    f_ab = block_matching_flow(a, b, **flow_kwargs)
    f_ba = block_matching_flow(b, a, **flow_kwargs)
    outs = []
    pairs = [(np.asarray(a, float), np.asarray(b, float))]
    if extra is not None:
        pairs.append((np.asarray(extra[0], float), np.asarray(extra[1], float)))
    for x, y in pairs:
        acc1, c1 = _forward_warp(x, y, f_ab)
        acc2, c2 = _forward_warp(y, x, f_ba)
        cnt = c1 + c2
        cnt_b = cnt.reshape(cnt.shape + (1,) * (x.ndim - 2))
        mid = np.where(cnt_b > 0, (acc1 + acc2) / np.maximum(cnt_b, 1), 0.5 * (x + y))
        outs.append(mid)
    return outs[0], (outs[1] if extra is not None else None)


# --------------------------------------------------------------------------
# frames
# --------------------------------------------------------------------------


@dataclass
class InterpolatedFrame:
    image: np.ndarray
    camera: CameraView
    source_pair: tuple[str, str]
    mode: str
    weight: FrameWeight
    depth: Optional[np.ndarray] = None
    raw_bytes: Optional[bytes] = field(default=None, repr=False)

    def as_view(self) -> CameraView:
        return self.camera


def interp_filename(id_a: str, id_b: str) -> str:
    return f"interp_{id_a}_{id_b}.png"


def interpolate_pair(a: CameraView, b: CameraView, mode: str = "blend", import_dir=None, **flow_kwargs) -> InterpolatedFrame:
    """Synthesise the frame halfway between two adjacent views."""
    if mode not in MODES:
        raise ValueError(f"unknown interpolation mode {mode!r}; choose from {MODES}")
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(f"resolution mismatch between {a.id} and {b.id}")
    if a.image is None or b.image is None:
        raise ValueError("both views need images to interpolate")
    da, db = a.pseudo_depth, b.pseudo_depth
    depth = None
    raw = None
    if mode == "blend":
        image = 0.5 * (a.image + b.image)
        if da is not None and db is not None:
            depth = 0.5 * (da + db)
    elif mode == "flow":
        both = (da, db) if da is not None and db is not None else None
        image, depth = flow_midpoint(a.image, b.image, both, **flow_kwargs)
    else:
        if import_dir is None:
            raise ValueError("imported mode needs an import directory")
        path = Path(import_dir) / interp_filename(a.id, b.id)
        if not path.is_file():
            raise FileNotFoundError(f"missing interpolated frame {path}")
        raw = path.read_bytes()
        image = read_image(path)
        if image.shape[:2] != a.image.shape[:2]:
            raise ValueError(f"imported frame {path} has the wrong resolution")
        if da is not None and db is not None:
            depth = 0.5 * (da + db)
    if depth is None:
        depth = da if da is not None else db
    R, t = interpolate_pose(a, b)
    fid = f"interp_{a.id}_{b.id}"
    weight = FrameWeight(fid)
    cam = CameraView(
        id=fid, fx=0.5 * (a.fx + b.fx), fy=0.5 * (a.fy + b.fy), cx=0.5 * (a.cx + b.cx), cy=0.5 * (a.cy + b.cy),
        width=a.width, height=a.height, R=R, t=t, image=image, pseudo_depth=depth,
        is_interpolated=True, weight_handle=weight,
    )
    return InterpolatedFrame(cam.image, cam, (a.id, b.id), mode, weight, depth, raw)


def interpolate_sequence(views: Sequence[CameraView], mode: str = "blend", import_dir=None) -> list[InterpolatedFrame]:
    """One interpolated frame per adjacent pair, in capture order."""
    return [interpolate_pair(a, b, mode, import_dir) for a, b in zip(views[:-1], views[1:])]


def _stratified_indices(valid: np.ndarray, k: int) -> np.ndarray:
    flat = np.flatnonzero(valid.reshape(-1))
    if k <= 0 or flat.size == 0:
        return np.zeros(0, dtype=np.int64)
    k = min(k, flat.size)
    pos = ((np.arange(k) + 0.5) * flat.size / k).astype(np.int64)
    return flat[pos]


def backproject(view: CameraView, depth: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """World points for flat pixel indices at camera-space depth ``depth``."""
    ys, xs = np.divmod(pixels, view.width)
    z = depth.reshape(-1)[pixels]
    xc = (xs + 0.5 - view.cx) / view.fx * z
    yc = (ys + 0.5 - view.cy) / view.fy * z
    cam_pts = np.stack([xc, yc, z], axis=1)
    return (cam_pts - view.t) @ view.R


def enrich_point_cloud(
    points,
    colours,
    frames: Sequence[InterpolatedFrame],
    depth_source: Optional[Mapping[str, np.ndarray]] = None,
    target_ratio: float = 0.5,
    samples_per_frame: Optional[int] = None,
    stride: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Append back-projected pixels of interpolated frames to a point cloud.

    By default each frame contributes ``target_ratio * len(points) / len(frames)``
    stratified samples; ``samples_per_frame`` or a pixel ``stride`` override that.
    ``depth_source`` maps frame ids to depth maps replacing the frame's own depth.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = np.asarray(colours, dtype=np.float64).reshape(-1, 3)
    usable = []
    for f in frames:
        depth = (depth_source or {}).get(f.camera.id, f.depth)
        if depth is None:
            log.warning("interpolated frame %s has no depth; skipped", f.camera.id)
            continue
        usable.append((f, np.asarray(depth, dtype=np.float64)))
    if not usable:
        return pts, cols
    total = int(round(target_ratio * len(pts)))
    base, extra = divmod(total, len(usable))
    new_pts, new_cols = [pts], [cols]
    for n, (f, depth) in enumerate(usable):
        valid = np.isfinite(depth) & (depth > 0)
        if stride is not None:
            grid = np.zeros_like(valid)
            grid[stride // 2::stride, stride // 2::stride] = True
            idx = np.flatnonzero((valid & grid).reshape(-1))
        else:
            k = samples_per_frame if samples_per_frame is not None else base + (1 if n < extra else 0)
            idx = _stratified_indices(valid, k)
        if idx.size == 0:
            continue
        new_pts.append(backproject(f.camera, depth, idx))
        new_cols.append(f.image.reshape(-1, 3)[idx])
    return np.concatenate(new_pts), np.concatenate(new_cols)
