import json
from pathlib import Path

import numpy as np
import pytest

from aquasplat.cli import run
from aquasplat.config import config_hash, load_config
from aquasplat.dataio import read_image, views_to_colmap, write_colmap
from conftest import make_camera


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


SIM = ["--threads", "1", "simulate", "--seed", "7", "--gaussians", "80", "--views", "9", "--width", "24", "--height", "16"]


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim") / "scene"
    assert run(SIM + ["--out", str(out)]) == 0
    return out


def test_simulate_byte_identical(tmp_path, scene):
    assert run(SIM + ["--out", str(tmp_path / "again")]) == 0
    a, b = _tree(scene), _tree(tmp_path / "again")
    assert a.keys() == b.keys() and a == b
    assert json.loads(a["medium_truth.json"])["b_inf"] == [0.1, 0.3, 0.4]


def test_info_counts_verbatim(tmp_path, capsys):
    views = []
    for i in range(20):
        v = make_camera(t=np.array([0.01 * i, 0, 0]))
        v.id = f"img_{i:02d}"
        views.append(v)
    pts = np.random.default_rng(0).normal(size=(17_635, 3))
    write_colmap(views_to_colmap(views, pts, np.full_like(pts, 0.5), observations=False), tmp_path / "sparse" / "0")
    assert run(["info", "--scene", str(tmp_path)]) == 0
    assert capsys.readouterr().out.splitlines() == ["views: 20", "points: 17635", "interpolated frames: 0"]


def test_exit_codes(tmp_path, capsys):
    assert run([]) == 2
    assert run(["bogus"]) == 2
    assert run(["simulate", "--out", str(tmp_path / "x"), "--beta-d", "1,2"]) == 2
    assert run(["--threads", "0", "info", "--scene", str(tmp_path)]) == 2
    capsys.readouterr()
    assert run(["info", "--scene", str(tmp_path / "missing")]) == 1
    err = capsys.readouterr()
    assert err.out == "" and "info failed" in err.err


def _train(scene, out, *flags, iterations=12):
    args = ["--threads", "1", "train", "--scene", str(scene), "--out", str(out), "--iterations", str(iterations), "--seed", "3"]
    assert run(args + list(flags)) == 0
    return json.loads((out / "report.json").read_text())


def test_train_no_ifi_and_outputs(tmp_path, scene):
    rep = _train(scene, tmp_path / "a", "--no-ifi")
    assert rep["ifi"] == "off" and rep["n_interpolated"] == 0
    assert rep["n_train_views"] == 7 and rep["n_test_views"] == 2
    out = tmp_path / "a"
    for name in ("config.txt", "log.csv", "ckpt_12.aqs", "test/metrics.csv", "test/view_000.png", "report.json"):
        assert (out / name).is_file(), name
    assert len((out / "log.csv").read_text().splitlines()) == 13
    assert load_config(out / "config.txt").ifi is False


def test_train_with_ifi_uses_interpolated_frames(tmp_path, scene):
    rep = _train(scene, tmp_path / "b", iterations=4)
    assert rep["ifi"] == "on" and rep["n_interpolated"] == 6
    assert rep["n_init_points"] > 0


def test_ablation_flags_change_hash(tmp_path, scene):
    flags = ["--no-ifi", "--no-afw", "--no-esl", "--no-decouple", "--shallow-mlp"]
    hashes = {_train(scene, tmp_path / "base", "--no-ifi", iterations=2)["config_hash"]}
    for f in flags[1:]:
        rep = _train(scene, tmp_path / f.strip("-"), "--no-ifi", f, iterations=2)
        hashes.add(rep["config_hash"])
    rep = _train(scene, tmp_path / "all", *flags, iterations=2)
    hashes.add(rep["config_hash"])
    assert len(hashes) == 6
    assert rep["mlp_layers"] == 2 and rep["decouple"] == "off" and rep["esl"] == "off" and rep["afw"] == "off"


def test_render_eval_interp(tmp_path, scene, capsys):
    _train(scene, tmp_path / "t", "--no-ifi", iterations=3)
    ckpt = tmp_path / "t" / "ckpt_3.aqs"
    assert run(["render", "--ckpt", str(ckpt), "--camera", "1", "--scene", str(scene), "--out", str(tmp_path / "r.png")]) == 0
    assert read_image(tmp_path / "r.png").shape == (16, 24, 3)
    assert run(["render", "--ckpt", str(ckpt), "--camera", "1", "--scene", str(scene), "--out", str(tmp_path / "j.png"), "--restored"]) == 0
    pose = {"fx": 20, "fy": 20, "cx": 12, "cy": 8, "width": 24, "height": 16, "R": np.eye(3).tolist(), "t": [0, 0, 4.5]}
    (tmp_path / "pose.json").write_text(json.dumps(pose))
    assert run(["render", "--ckpt", str(ckpt), "--camera", str(tmp_path / "pose.json"), "--out", str(tmp_path / "p.png")]) == 0
    assert run(["render", "--ckpt", str(ckpt), "--camera", "99", "--scene", str(scene), "--out", str(tmp_path / "x.png")]) == 2
    assert run(["render", "--ckpt", str(ckpt), "--camera", "1", "--out", str(tmp_path / "x.png")]) == 2
    capsys.readouterr()
    assert run(["eval", "--ckpt", str(ckpt), "--scene", str(scene)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "view,psnr,ssim" and lines[-1].startswith("mean,") and len(lines) == 4
    assert run(["interp", "--scene", str(scene), "--mode", "blend", "--out", str(tmp_path / "i")]) == 0
    assert len(list((tmp_path / "i").glob("interp_*.png"))) == 8
    assert (tmp_path / "i" / "interp_view_000_view_001.png").is_file()


def test_train_deterministic(tmp_path, scene):
    for name in ("x", "y"):
        _train(scene, tmp_path / name, iterations=6)
    a, b = _tree(tmp_path / "x"), _tree(tmp_path / "y")
    a.pop("config.txt"), b.pop("config.txt")
    assert a == b
