"""Underwater 3D Gaussian splatting with a per-channel water medium."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig, load_config
from .dataio import load_scene, parse_colmap, read_pfm, read_ply, split_views, write_pfm, write_ply
from .estimator import MediumEstimator, UnderwaterSplatting
from .losses import LossReport, LossWeights, loss_afw, loss_depth, loss_final, loss_grey, loss_rec, loss_smooth
from .medium import MediumNet, MediumSample, degrade_image, restore_image
from .metrics import psnr, ssim
from .render import RenderOutput, render, render_backward
from .scene import CameraView, FrameWeight, Gaussian3D, GaussianCloud
from .trainer import evaluate, init_from_points, make_synthetic_scene, train

__version__ = "0.1.0"

__all__ = [
    "CameraView", "Checkpoint", "FrameWeight", "Gaussian3D", "GaussianCloud", "LossReport", "LossWeights",
    "MediumEstimator", "MediumNet", "MediumSample", "RenderOutput", "RunConfig", "TrainConfig",
    "UnderwaterSplatting", "degrade_image", "evaluate", "init_from_points", "load_checkpoint", "load_config",
    "load_scene", "loss_afw", "loss_depth", "loss_final", "loss_grey", "loss_rec", "loss_smooth",
    "make_synthetic_scene", "parse_colmap", "psnr", "read_pfm", "read_ply", "render", "render_backward",
    "restore_image", "save_checkpoint", "split_views", "ssim", "train", "write_pfm", "write_ply",
]
