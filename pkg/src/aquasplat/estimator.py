"""scikit-learn style wrappers around the training loop."""
from __future__ import annotations

from dataclasses import fields
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ContractViolation
from .config import TrainConfig
from .scene import CameraView, GaussianCloud
from .trainer import evaluate, fit_medium, medium_summary, render_view, restored_view, train

_CONFIG_NAMES = tuple(f.name for f in fields(TrainConfig))


def _check_views(views) -> list[CameraView]:
    views = list(views)
    if not views:
        raise ContractViolation("expected at least one view")
    for v in views:
        if not isinstance(v, CameraView):
            raise ContractViolation(f"expected CameraView, got {type(v).__name__}")
    return views


class _ConfigParams(BaseEstimator):
    """Every :class:`TrainConfig` field is an estimator parameter."""

    def _config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in _CONFIG_NAMES})


def _init_config_params(obj, kwargs):
    defaults = TrainConfig()
    unknown = set(kwargs) - set(_CONFIG_NAMES)
    if unknown:
        raise TypeError(f"unknown parameters: {sorted(unknown)}")
    for k in _CONFIG_NAMES:
        setattr(obj, k, kwargs.get(k, getattr(defaults, k)))


class UnderwaterSplatting(_ConfigParams):
    """Jointly fit a Gaussian cloud and a water medium to posed underwater images.

    ``fit(views, points, colours)`` trains; ``predict(views)`` renders the
    degraded appearance, ``restore(views)`` the medium-free one and
    ``score(views)`` returns mean PSNR on the given views.
    """

    def __init__(
        self, iterations=20000, seed=0, lambda_r=0.8, lambda_d=0.1, lambda_ca=1.0, lambda_s=0.2, lambda_b=2.0,
        alpha_afw=0.5, use_depth=True, use_grey=True, ifi=True, afw=True, esl=True, decouple=True, mlp_layers=5,
        sh_degree=3, sh_increase_every=1000, mlp_hidden=64, pe_freqs=4, depth_buckets=64, backscatter_mode="blend",
        interp_mode="flow", ifi_ratio=0.5, init_opacity=0.1, init_scale=0.01, depth_align_every=500, densify=True,
        densify_from=500, densify_until=15000, densify_every=100, densify_grad_threshold=2e-4, prune_opacity=0.005,
        percent_dense=0.01, lr_position_init=1.6e-4, lr_position_final=1.6e-6, lr_scale=5e-3, lr_rotation=1e-3,
        lr_opacity=5e-2, lr_sh=2.5e-3, lr_backscatter=2.5e-3, lr_medium=1e-3, lr_gamma=1e-2,
    ):
        _init_config_params(self, {k: v for k, v in locals().items() if k in _CONFIG_NAMES})

    def fit(self, views: Sequence[CameraView], points, colours=None, import_dir=None):
        views = _check_views(views)
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cols = np.full_like(pts, 0.5) if colours is None else np.asarray(colours, dtype=np.float64).reshape(-1, 3)
        result = train(views, pts, cols, self._config(), import_dir=import_dir)
        self.cloud_: GaussianCloud = result.cloud
        self.medium_ = result.medium
        self.frame_weights_ = result.frame_weights
        self.history_ = result.history
        self.sh_degree_ = result.sh_degree
        self.n_init_points_ = result.n_init_points
        self.n_interpolated_ = result.n_interpolated
        return self

    def predict(self, views: Sequence[CameraView]) -> np.ndarray:
        check_is_fitted(self, "cloud_")
        cfg = self._config()
        return np.stack([
            render_view(self.cloud_, self.medium_, v, cfg, self.sh_degree_).colour.numpy() for v in _check_views(views)
        ])

    def restore(self, views: Sequence[CameraView]) -> np.ndarray:
        check_is_fitted(self, "cloud_")
        cfg = self._config()
        return np.stack([restored_view(self.cloud_, self.medium_, v, cfg, self.sh_degree_) for v in _check_views(views)])

    def score(self, views: Sequence[CameraView], y=None) -> float:
        check_is_fitted(self, "cloud_")
        return evaluate(self.cloud_, self.medium_, _check_views(views), self._config(), sh_degree=self.sh_degree_).mean_psnr


class MediumEstimator(_ConfigParams, TransformerMixin):
    """Fit only the medium network for a fixed cloud; ``transform`` restores images.

    ``fit(views, cloud)`` optimises the medium; ``transform(views)`` returns
    the medium-free renders ``J`` stacked as ``(V, H, W, 3)``.
    """

    def __init__(
        self, iterations=1000, seed=0, lambda_r=0.8, lambda_d=0.1, lambda_ca=1.0, lambda_s=0.2, lambda_b=2.0,
        alpha_afw=0.5, use_depth=False, use_grey=False, ifi=False, afw=False, esl=False, decouple=True, mlp_layers=5,
        sh_degree=3, sh_increase_every=1000, mlp_hidden=64, pe_freqs=4, depth_buckets=64, backscatter_mode="global",
        interp_mode="flow", ifi_ratio=0.5, init_opacity=0.1, init_scale=0.01, depth_align_every=500, densify=False,
        densify_from=500, densify_until=15000, densify_every=100, densify_grad_threshold=2e-4, prune_opacity=0.005,
        percent_dense=0.01, lr_position_init=1.6e-4, lr_position_final=1.6e-6, lr_scale=5e-3, lr_rotation=1e-3,
        lr_opacity=5e-2, lr_sh=2.5e-3, lr_backscatter=2.5e-3, lr_medium=1e-3, lr_gamma=1e-2,
    ):
        _init_config_params(self, {k: v for k, v in locals().items() if k in _CONFIG_NAMES})

    def fit(self, views: Sequence[CameraView], cloud: Optional[GaussianCloud] = None):
        if cloud is None:
            raise ContractViolation("MediumEstimator.fit needs the frozen cloud")
        views = _check_views(views)
        self.cloud_ = cloud.detach()
        self.medium_, self.history_ = fit_medium(self.cloud_, views, self._config())
        self.summary_ = medium_summary(self.cloud_, self.medium_, views, self.depth_buckets or None)
        return self

    def transform(self, views: Sequence[CameraView]) -> np.ndarray:
        check_is_fitted(self, "medium_")
        cfg = self._config()
        return np.stack([restored_view(self.cloud_, self.medium_, v, cfg) for v in _check_views(views)])
