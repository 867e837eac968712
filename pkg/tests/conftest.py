import numpy as np
import pytest
import torch

from aquasplat._validation import DTYPE
from aquasplat.scene import CameraView, GaussianCloud, logit, rgb_to_sh_dc


def make_camera(width=16, height=16, f=20.0, R=None, t=None, **kw):
    R = np.eye(3) if R is None else R
    t = np.zeros(3) if t is None else t
    return CameraView("cam", f, f, width / 2, height / 2, width, height, R, t, **kw)


def random_cloud(rng, n, degree=1, spread=0.6, depth=(2.0, 4.0), scale=(0.08, 0.25)):
    """Gaussians in front of an identity camera at the origin."""
    means = np.column_stack([rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, n)])
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    k = (degree + 1) ** 2
    sh = rng.normal(0, 0.3, (n, k, 3))
    t = lambda a: torch.as_tensor(a, dtype=DTYPE)
    return GaussianCloud(
        means=t(means),
        log_scales=t(np.log(rng.uniform(*scale, (n, 3)))),
        quats=t(q),
        opacity_logits=t(logit(rng.uniform(0.3, 0.9, n))),
        sh=t(sh),
        bs_logits=t(rng.normal(0, 1, (n, 3))),
    )


def flat_cloud(means, rgb, opacity=0.99, scale=0.2):
    """Degree-0 isotropic Gaussians with given colours."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    n = len(means)
    sh = np.zeros((n, 1, 3))
    sh[:, 0, :] = rgb_to_sh_dc(np.broadcast_to(np.asarray(rgb, dtype=np.float64), (n, 3)))
    t = lambda a: torch.as_tensor(a, dtype=DTYPE)
    return GaussianCloud(
        means=t(means),
        log_scales=t(np.full((n, 3), np.log(scale))),
        quats=t(np.tile([1.0, 0, 0, 0], (n, 1))),
        opacity_logits=t(np.full(n, float(logit(opacity)))),
        sh=t(sh),
        bs_logits=t(np.zeros((n, 3))),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return make_camera()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
