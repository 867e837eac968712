"""Command-line entry point: ``aquasplat {train,render,eval,interp,simulate,info}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, checkpoint_name, load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, dump_config, load_config, with_overrides
from .dataio import load_scene, split_views, write_image
from .interp import MODES, interp_filename, interpolate_sequence
from .medium import MediumSample
from .scene import CameraView
from .trainer import evaluate, make_synthetic_scene, render_view, restored_view, train

log = logging.getLogger("aquasplat")

SHALLOW_MLP_LAYERS = 2


class UsageError(Exception):
    """Bad combination of otherwise well-formed arguments (exit code 2)."""


def _triple(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected r,g,b floats, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aquasplat", description="Underwater Gaussian splatting toolkit.")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="optimise a scene")
    t.add_argument("--scene", required=True, type=Path)
    t.add_argument("--config", type=Path, help="key = value config file")
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--iterations", type=int, help="override the configured iteration count")
    t.add_argument("--seed", type=int, help="override the configured seed")
    t.add_argument("--no-ifi", action="store_true", help="disable intermediate frame interpolation")
    t.add_argument("--no-afw", action="store_true", help="disable adaptive frame weighting")
    t.add_argument("--no-esl", action="store_true", help="disable the edge-aware smoothness loss")
    t.add_argument("--no-decouple", action="store_true", help="share one set of medium coefficients across channels")
    t.add_argument("--shallow-mlp", action="store_true", help=f"use a {SHALLOW_MLP_LAYERS}-layer medium network")

    r = sub.add_parser("render", help="render one camera from a checkpoint")
    r.add_argument("--ckpt", required=True, type=Path)
    r.add_argument("--camera", required=True, help="view index into --scene, or a JSON pose file")
    r.add_argument("--scene", type=Path, help="scene providing cameras for an index")
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--restored", action="store_true", help="emit the medium-free image")

    e = sub.add_parser("eval", help="PSNR/SSIM on the held-out views")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--scene", required=True, type=Path)
    e.add_argument("--out", type=Path, help="directory for metrics.csv and renders (default: stdout only)")
    e.add_argument("--split-modulus", type=int, default=8)

    i = sub.add_parser("interp", help="write interpolated frames between adjacent views")
    i.add_argument("--scene", required=True, type=Path)
    i.add_argument("--mode", choices=MODES, default="flow")
    i.add_argument("--out", type=Path, help="output directory (default: SCENE/interp)")

    s = sub.add_parser("simulate", help="generate a synthetic degraded dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gaussians", type=int, default=1000)
    s.add_argument("--views", type=int, default=12)
    s.add_argument("--beta-d", type=_triple, default=(0.4, 0.15, 0.1))
    s.add_argument("--beta-b", type=_triple, default=(0.3, 0.2, 0.15))
    s.add_argument("--binf", type=_triple, default=(0.1, 0.3, 0.4))
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=48)
    s.add_argument("--out", required=True, type=Path)

    n = sub.add_parser("info", help="print scene counts")
    n.add_argument("--scene", required=True, type=Path)
    return p


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {"scene": str(args.scene), "out": str(args.out)}
    if args.iterations is not None:
        changes["iterations"] = args.iterations
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.no_ifi:
        changes["ifi"] = False
    if args.no_afw:
        changes["afw"] = False
    if args.no_esl:
        changes["esl"] = False
    if args.no_decouple:
        changes["decouple"] = False
    if args.shallow_mlp:
        changes["mlp_layers"] = SHALLOW_MLP_LAYERS
    return with_overrides(cfg, **changes)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    scene = load_scene(args.scene)
    train_v, test_v = split_views(scene.views, cfg.split_modulus)
    if not train_v:
        raise UsageError("scene has no training views")
    interp_dir = Path(cfg.interp_dir) if cfg.interp_dir else (args.scene / "interp")
    args.out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train_config()
    (args.out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    result = train(train_v, scene.points, scene.colours, tcfg, import_dir=interp_dir, log_path=args.out / "log.csv")
    ckpt = Checkpoint(result.cloud, result.medium, tcfg, result.frame_weights, result.sh_degree, tcfg.iterations)
    save_checkpoint(ckpt, args.out / checkpoint_name(tcfg.iterations))
    metrics = evaluate(result.cloud, result.medium, test_v, tcfg, args.out / "test", result.sh_degree)
    report = {
        "config_hash": config_hash(tcfg),
        "iterations": tcfg.iterations,
        "ifi": "on" if tcfg.ifi else "off",
        "afw": "on" if tcfg.afw else "off",
        "esl": "on" if tcfg.esl else "off",
        "decouple": "on" if tcfg.decouple else "off",
        "mlp_layers": tcfg.mlp_layers,
        "n_views": len(scene.views),
        "n_train_views": len(train_v),
        "n_test_views": len(test_v),
        "n_interpolated": result.n_interpolated,
        "n_init_points": result.n_init_points,
        "n_gaussians": len(result.cloud),
        "final_loss": result.history[-1].total if result.history else None,
        "test_psnr": metrics.mean_psnr if metrics.rows else None,
        "test_ssim": metrics.mean_ssim if metrics.rows else None,
    }
    (args.out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(report, sort_keys=True))
    return 0


def _camera_from_json(path: Path) -> CameraView:
    d = json.loads(path.read_text(encoding="utf-8"))
    try:
        return CameraView(
            id=str(d.get("id", path.stem)), fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
            width=d["width"], height=d["height"], R=np.asarray(d["R"], dtype=np.float64), t=np.asarray(d["t"], dtype=np.float64),
        )
    except KeyError as exc:
        raise UsageError(f"pose file {path} lacks field {exc.args[0]!r}") from None


def _resolve_camera(args) -> CameraView:
    cam_arg = args.camera
    if cam_arg.lstrip("-").isdigit():
        if args.scene is None:
            raise UsageError("--camera INDEX needs --scene")
        views = load_scene(args.scene, load_images=False).views
        idx = int(cam_arg)
        if not -len(views) <= idx < len(views):
            raise UsageError(f"camera index {idx} out of range for {len(views)} views")
        return views[idx]
    path = Path(cam_arg)
    if not path.is_file():
        raise UsageError(f"camera {cam_arg!r} is neither an index nor a pose file")
    return _camera_from_json(path)


def cmd_render(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cam = _resolve_camera(args)
    if args.restored:
        if ckpt.medium is None:
            raise UsageError("checkpoint has no medium; cannot restore")
        img = restored_view(ckpt.cloud, ckpt.medium, cam, ckpt.config, ckpt.sh_degree)
    else:
        img = render_view(ckpt.cloud, ckpt.medium, cam, ckpt.config, ckpt.sh_degree).colour.numpy()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_image(args.out, img)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    scene = load_scene(args.scene)
    _, test_v = split_views(scene.views, args.split_modulus)
    report = evaluate(ckpt.cloud, ckpt.medium, test_v, ckpt.config, args.out, ckpt.sh_degree)
    sys.stdout.write(report.to_csv())
    return 0


def cmd_interp(args) -> int:
    scene = load_scene(args.scene)
    out = args.out or (args.scene / "interp")
    frames = interpolate_sequence(scene.views, args.mode, args.scene / "interp")
    out.mkdir(parents=True, exist_ok=True)
    for f in frames:
        a, b = f.source_pair
        write_image(out / interp_filename(a, b), f.image)
    print(f"wrote {len(frames)} interpolated frames to {out}")
    return 0


def cmd_simulate(args) -> int:
    truth = MediumSample.constant(args.beta_d, args.beta_b, args.binf)
    make_synthetic_scene(args.seed, args.gaussians, args.views, truth, args.out, args.width, args.height)
    print(f"wrote synthetic scene ({args.views} views, {args.gaussians} Gaussians) to {args.out}")
    return 0


def cmd_info(args) -> int:
    scene = load_scene(args.scene, load_images=False)
    print(f"views: {len(scene.views)}")
    print(f"points: {len(scene.points)}")
    print(f"interpolated frames: {len(scene.interp_files)}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "interp": cmd_interp,
    "simulate": cmd_simulate,
    "info": cmd_info,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s: %(message)s")
    if args.threads < 1:
        print("aquasplat: error: --threads must be at least 1", file=sys.stderr)
        return 2
    torch.set_num_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"aquasplat: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level diagnostic
        log.debug("failure", exc_info=True)
        print(f"aquasplat: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
