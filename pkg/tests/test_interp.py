import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aquasplat.dataio import write_image
from aquasplat.interp import (
    block_matching_flow,
    enrich_point_cloud,
    interp_filename,
    interpolate_pair,
    interpolate_sequence,
    quat_to_matrix,
    slerp,
)
from aquasplat.scene import rotmat_to_quat
from conftest import make_camera


def _view(vid, image, R=None, t=None, depth=None):
    v = make_camera(width=image.shape[1], height=image.shape[0], f=30.0, R=R, t=t, image=image, pseudo_depth=depth)
    v.id = vid
    return v


def _rot(axis, ang):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    return quat_to_matrix(np.r_[np.cos(ang / 2), np.sin(ang / 2) * axis])


def _texture(h, w, seed=0):
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0, 1, (h // 4 + 1, w // 4 + 1, 3))
    return np.kron(coarse, np.ones((4, 4, 1)))[:h, :w]


@pytest.mark.parametrize("mode", ["blend", "flow"])
def test_identical_pair_is_fixed_point(mode):
    img = _texture(24, 32)
    a = _view("a", img, t=np.array([0.1, 0.0, 0.2]))
    f = interpolate_pair(a, a, mode)
    assert np.allclose(f.image, img, atol=1e-12)
    assert np.array_equal(f.camera.R, a.R) and np.array_equal(f.camera.t, a.t)
    assert f.camera.is_interpolated and float(f.weight.gamma) == 1.0


def test_blend_black_white():
    a = _view("a", np.zeros((8, 8, 3)))
    b = _view("b", np.ones((8, 8, 3)), t=np.array([0.2, 0, 0]))
    f = interpolate_pair(a, b, "blend")
    assert np.all(f.image == 0.5) and f.source_pair == ("a", "b")
    assert np.allclose(f.camera.center, 0.5 * (a.center + b.center))


def test_flow_recovers_translation_midpoint():
    big = _texture(48, 80, seed=3)
    a_img, b_img, mid = big[:, 8:72], big[:, 0:64], big[:, 4:68]
    est = block_matching_flow(a_img, b_img)
    inner = est[8:-8, 16:-16]
    assert np.allclose(np.median(inner[..., 0]), 8, atol=0.5) and np.allclose(np.median(inner[..., 1]), 0, atol=0.5)
    f = interpolate_pair(_view("a", a_img), _view("b", b_img), "flow")
    blend_err = np.abs(0.5 * (a_img + b_img) - mid)[:, 12:-12].mean()
    flow_err = np.abs(f.image - mid)[:, 12:-12].mean()
    assert flow_err < 0.25 * blend_err


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_blend_symmetry(seed):
    rng = np.random.default_rng(seed)
    a = _view("a", rng.uniform(0, 1, (6, 6, 3)), R=_rot(rng.normal(size=3), rng.uniform(-1, 1)), t=rng.normal(size=3))
    b = _view("b", rng.uniform(0, 1, (6, 6, 3)), R=_rot(rng.normal(size=3), rng.uniform(-1, 1)), t=rng.normal(size=3))
    f, g = interpolate_pair(a, b, "blend"), interpolate_pair(b, a, "blend")
    assert np.array_equal(f.image, g.image)
    assert np.allclose(f.camera.R, g.camera.R, atol=1e-12) and np.allclose(f.camera.t, g.camera.t, atol=1e-12)


@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.lists(st.floats(-1, 1), min_size=4, max_size=4))
@settings(max_examples=50, deadline=None)
def test_slerp_properties(q0, q1):
    q0, q1 = np.array(q0), np.array(q1)
    if np.linalg.norm(q0) < 1e-3 or np.linalg.norm(q1) < 1e-3:
        return
    q0, q1 = q0 / np.linalg.norm(q0), q1 / np.linalg.norm(q1)
    assert np.array_equal(slerp(q0, q0, 0.5), q0 / np.linalg.norm(q0)) or np.allclose(slerp(q0, q0, 0.5), q0, atol=1e-15)
    m = slerp(q0, q1, 0.5)
    assert abs(np.linalg.norm(m) - 1) < 1e-9
    q1s = q1 if q0 @ q1 >= 0 else -q1
    # midpoint is equidistant from both ends on the short arc
    assert abs(abs(m @ q0) - abs(m @ q1s)) < 1e-9


def test_interpolated_rotation_is_halfway():
    a = _view("a", np.zeros((4, 4, 3)))
    b = _view("b", np.zeros((4, 4, 3)), R=_rot([0, 1, 0], 0.4))
    R = interpolate_pair(a, b, "blend").camera.R
    assert np.allclose(R, _rot([0, 1, 0], 0.2), atol=1e-12)
    assert abs(np.linalg.norm(rotmat_to_quat(R)) - 1) < 1e-9


def test_enrich_identity_and_counting():
    rng = np.random.default_rng(0)
    pts, cols = rng.normal(size=(17_635, 3)), rng.uniform(0, 1, (17_635, 3))
    p, c = enrich_point_cloud(pts, cols, [])
    assert np.array_equal(p, pts) and np.array_equal(c, cols)
    a = _view("a", rng.uniform(0, 1, (100, 100, 3)), depth=np.full((100, 100), 2.0))
    frame = interpolate_pair(a, a, "blend")
    p, c = enrich_point_cloud(pts, cols, [frame], stride=10)
    assert len(p) == 17_735 and np.array_equal(p[:17_635], pts) and np.array_equal(c[:17_635], cols)
    assert np.allclose(p[17_635:, 2], 2.0)


@given(st.integers(2, 6), st.integers(10, 400), st.floats(0.1, 1.0))
@settings(max_examples=25, deadline=None)
def test_enrich_prefix_and_strict_increase(n_views, n_pts, ratio):
    rng = np.random.default_rng(n_views * 1000 + n_pts)
    views = [_view(f"v{i}", rng.uniform(0, 1, (20, 24, 3)), t=np.array([0.1 * i, 0, 0]), depth=rng.uniform(1, 3, (20, 24)))
             for i in range(n_views)]
    frames = interpolate_sequence(views, "blend")
    pts, cols = rng.normal(size=(n_pts, 3)), rng.uniform(0, 1, (n_pts, 3))
    p, c = enrich_point_cloud(pts, cols, frames, target_ratio=ratio)
    assert len(p) > n_pts and np.array_equal(p[:n_pts], pts)
    assert len(p) - n_pts == round(ratio * n_pts)
    # back-projection is consistent with each frame's pose and depth
    f = frames[0].camera
    cam = p[n_pts:n_pts + 1] @ f.R.T + f.t
    assert np.all(cam[:, 2] > 0)


def test_enrich_uses_depth_source():
    a = _view("a", np.zeros((10, 10, 3)), depth=np.full((10, 10), 1.0))
    f = interpolate_pair(a, a, "blend")
    p, _ = enrich_point_cloud(np.zeros((20, 3)), np.zeros((20, 3)), [f], depth_source={f.camera.id: np.full((10, 10), 4.0)})
    assert np.allclose(p[20:, 2], 4.0)


def test_imported_mode(tmp_path):
    rng = np.random.default_rng(2)
    a = _view("a", rng.uniform(0, 1, (6, 8, 3)))
    b = _view("b", rng.uniform(0, 1, (6, 8, 3)))
    img = rng.integers(0, 256, (6, 8, 3)) / 255.0
    write_image(tmp_path / interp_filename("a", "b"), img)
    f = interpolate_pair(a, b, "imported", tmp_path)
    assert np.array_equal(f.image, img) and f.raw_bytes == (tmp_path / "interp_a_b.png").read_bytes()
    with pytest.raises(FileNotFoundError):
        interpolate_pair(b, a, "imported", tmp_path)
    write_image(tmp_path / interp_filename("b", "a"), np.zeros((5, 8, 3)))
    with pytest.raises(ValueError, match="resolution"):
        interpolate_pair(b, a, "imported", tmp_path)


def test_pair_validation():
    a = _view("a", np.zeros((6, 8, 3)))
    b = _view("b", np.zeros((8, 8, 3)))
    with pytest.raises(ValueError, match="resolution"):
        interpolate_pair(a, b)
    with pytest.raises(ValueError, match="mode"):
        interpolate_pair(a, a, "rife")
