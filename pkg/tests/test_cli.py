"""End-to-end CLI: gen -> init -> optimize -> render -> eval -> export."""

import json
import subprocess
import sys

import numpy as np
import pytest

from dynsplat import sceneio


def run_cli(*argv):
    return subprocess.run([sys.executable, "-m", "dynsplat", *argv],
                          capture_output=True, text=True)


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "rigid1"
    r = run_cli("gen", "rigid-1", str(d), "--seed", "0")
    assert r.returncode == 0, r.stderr
    return d


def test_gen_outputs(fixture_dir):
    for name in ("gt.mscn", "priors.mspb", "cameras.json", "manifest.json",
                 "images/frame_0000.ppm"):
        assert (fixture_dir / name).exists()
    man = json.loads((fixture_dir / "manifest.json").read_text())
    assert man["num_frames"] == 16
    assert man["diameter"] > 0


def test_init_optimize_eval_pipeline(fixture_dir, tmp_path):
    scene_p = tmp_path / "init.mscn"
    cfg = tmp_path / "init.json"
    cfg.write_text(json.dumps({"t_init": 4, "seed": 0}))
    r = run_cli("init", str(fixture_dir / "priors.mspb"),
                str(fixture_dir / "cameras.json"), str(scene_p),
                "--config", str(cfg),
                "--images", str(fixture_dir / "images"))
    assert r.returncode == 0, r.stderr
    assert scene_p.exists()

    out_p = tmp_path / "opt.mscn"
    sch = tmp_path / "sched.json"
    sch.write_text(json.dumps({"t_init": 4, "iters_init": 2, "iters_s1": 2,
                               "iters_s2": 2, "iters_s3": 2, "iters_bg": 2,
                               "s3_period": 100}))
    csv_p = tmp_path / "hist.csv"
    r = run_cli("optimize", str(scene_p), str(fixture_dir / "priors.mspb"),
                str(out_p), "--images", str(fixture_dir / "images"),
                "--config", str(sch), "--csv", str(csv_p))
    assert r.returncode == 0, r.stderr
    scene = sceneio.load_scene(str(out_p))
    assert scene.num_frames == 16
    assert csv_p.read_text().startswith("phase")

    rep_p = tmp_path / "report.json"
    r = run_cli("eval", str(out_p), str(fixture_dir / "manifest.json"),
                "--images", str(fixture_dir / "images"),
                "--report", str(rep_p))
    assert r.returncode == 0, r.stderr
    rep = json.loads(rep_p.read_text())
    assert rep["psnr"] > 0 and rep["epe3d"] >= 0


def test_render_color_and_depth(fixture_dir, tmp_path):
    img_p = tmp_path / "f0.ppm"
    r = run_cli("render", str(fixture_dir / "gt.mscn"), "--frame", "0",
                "--out", str(img_p))
    assert r.returncode == 0, r.stderr
    img = sceneio.load_ppm(str(img_p))
    assert img.shape == (48, 64, 3)
    # gt scene renders close to the generated frame
    ref = sceneio.load_ppm(str(fixture_dir / "images/frame_0000.ppm"))
    assert np.abs(img - ref).mean() < 0.1

    d_p = tmp_path / "f0.pgm"
    r = run_cli("render", str(fixture_dir / "gt.mscn"), "--frame", "0",
                "--mode", "depth", "--out", str(d_p))
    assert r.returncode == 0, r.stderr
    depth = sceneio.load_pgm16(str(d_p))
    assert depth.shape == (48, 64)


def test_export_ply(fixture_dir, tmp_path):
    d = tmp_path / "ply"
    r = run_cli("export", str(fixture_dir / "gt.mscn"), "--ply-dir", str(d))
    assert r.returncode == 0, r.stderr
    assert (d / "frame_0000.ply").exists()
    assert (d / "frame_0015.ply").exists()


def test_unknown_flag_exit_1():
    r = run_cli("gen", "rigid-1", "/tmp/x", "--not-a-flag")
    assert r.returncode == 1
    assert "usage" in r.stderr.lower()


def test_unknown_command_exit_1():
    r = run_cli("frobnicate")
    assert r.returncode == 1


def test_render_frame_out_of_range_exit_2(fixture_dir, tmp_path):
    r = run_cli("render", str(fixture_dir / "gt.mscn"), "--frame", "99",
                "--out", str(tmp_path / "x.ppm"))
    assert r.returncode == 2
    assert "error" in r.stderr.lower()


def test_gen_unknown_fixture_exit_2(tmp_path):
    r = run_cli("gen", "/does/not/exist.json", str(tmp_path / "o"))
    assert r.returncode == 2
