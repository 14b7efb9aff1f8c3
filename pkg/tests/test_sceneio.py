"""Container round-trips, dtype contracts, and malformed-file errors."""

import json

import numpy as np
import pytest

from dynsplat import sceneio as io
from dynsplat.errors import ContainerFormatError

from conftest import make_scene


def _scene():
    return make_scene(n_static=5, n_dynamic=7, n_shadow=2, num_frames=4,
                      num_bases=2, k=2, seed=11)


def _assert_scene_equal(a, b):
    # stored at float32; quaternions are renormalized on load
    f4 = lambda x: np.asarray(x, np.float32).astype(np.float64)
    assert np.array_equal(f4(a.mu0), b.mu0)
    assert np.allclose(f4(a.rot0), b.rot0, atol=1e-6)
    assert np.array_equal(f4(a.log_scale), b.log_scale)
    assert np.array_equal(f4(a.opacity_logit), b.opacity_logit)
    assert np.array_equal(f4(a.color), b.color)
    assert np.array_equal(a.cluster_id, b.cluster_id)
    assert np.array_equal(a.kind, b.kind)
    assert np.array_equal(f4(a.coeff_logits), b.coeff_logits)
    for ca, cb in zip(a.clusters, b.clusters):
        assert np.allclose(f4(ca.global_rot), cb.global_rot, atol=1e-6)
        assert np.array_equal(f4(ca.global_trans), cb.global_trans)
        assert np.array_equal(f4(ca.bases_r6), cb.bases_r6)
        assert np.array_equal(f4(ca.bases_t), cb.bases_t)
    assert np.array_equal(a.cameras.intrinsics, b.cameras.intrinsics)
    assert np.array_equal(a.cameras.extrinsics, b.cameras.extrinsics)
    assert a.image_size == b.image_size


def test_scene_round_trip(tmp_path):
    scene = _scene()
    p = str(tmp_path / "s.mscn")
    io.save_scene(scene, p)
    back = io.load_scene(p)
    _assert_scene_equal(scene, back)


def test_scene_dtypes(tmp_path):
    scene = _scene()
    p = str(tmp_path / "s.mscn")
    io.save_scene(scene, p)
    back = io.load_scene(p)
    assert back.mu0.dtype == np.float64  # in-memory arrays are f8
    assert back.cluster_id.dtype == np.int32
    assert back.cameras.extrinsics.dtype == np.float64
    # float32 storage quantizes gaussian fields but not cameras
    assert np.abs(back.mu0 - scene.mu0).max() < 1e-5
    # f8 extrinsics keep rotation orthonormality through a round trip
    R = back.cameras.extrinsics[:, :3, :3]
    assert np.abs(R @ R.transpose(0, 2, 1) - np.eye(3)).max() < 1e-12
    # loaded quaternions are exactly unit norm
    assert np.abs(np.linalg.norm(back.rot0, axis=1) - 1.0).max() < 1e-14


def test_scene_bad_magic(tmp_path):
    p = tmp_path / "bad.mscn"
    p.write_bytes(b"magic NOPE1\nend_header\n")
    with pytest.raises(ContainerFormatError):
        io.load_scene(str(p))


def test_scene_truncated(tmp_path):
    scene = _scene()
    p = tmp_path / "s.mscn"
    io.save_scene(scene, str(p))
    p.write_bytes(p.read_bytes()[:-64])
    with pytest.raises(ContainerFormatError):
        io.load_scene(str(p))


def test_priors_round_trip(tmp_path, rigid1):
    p = str(tmp_path / "p.mspb")
    io.save_priors(rigid1.priors, p)
    back = io.load_priors(p)
    assert np.array_equal(np.asarray(rigid1.priors.depth, np.float32),
                          back.depth)
    assert np.array_equal(rigid1.priors.fg_mask, back.fg_mask)
    assert np.array_equal(rigid1.priors.shadow_mask, back.shadow_mask)
    assert set(back.tracks) == set(rigid1.priors.tracks)
    for key, ts in rigid1.priors.tracks.items():
        tb = back.tracks[key]
        assert np.array_equal(ts.point_id, tb.point_id)
        assert np.array_equal(np.asarray(ts.query_px, np.float32), tb.query_px)
        assert np.array_equal(np.asarray(ts.target_uv, np.float32),
                              tb.target_uv)
        assert np.array_equal(ts.visible, tb.visible)


def test_checkpoint_round_trip(tmp_path):
    scene = _scene()
    rng = np.random.default_rng(0)
    moments = {"mu0_m": rng.normal(size=(14, 3)),
               "mu0_v": rng.random((14, 3)),
               "step": np.array([42.0])}
    p = str(tmp_path / "c.msck")
    io.save_checkpoint(scene, moments, p)
    back_scene, back_m = io.load_checkpoint(p)
    _assert_scene_equal(scene, back_scene)
    assert set(back_m) == set(moments)
    for k in moments:
        assert back_m[k].dtype == np.float64
        assert np.array_equal(moments[k], back_m[k])


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(5).random((9, 13, 3))
    p = str(tmp_path / "i.ppm")
    io.save_ppm(img, p)
    back = io.load_ppm(p)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-12


def test_ppm_bad_magic(tmp_path):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
    with pytest.raises(ContainerFormatError):
        io.load_ppm(str(p))


def test_pgm16_round_trip(tmp_path):
    depth = np.random.default_rng(6).random((7, 11)) * 8.0 + 0.5
    p = str(tmp_path / "d.pgm")
    io.save_pgm16(depth, p)
    back = io.load_pgm16(p)
    scale = depth.max() / 65535.0
    assert np.abs(back - depth).max() <= 0.5 * scale + 1e-12


def test_pgm16_explicit_scale(tmp_path):
    depth = np.array([[1.0, 2.0], [3.0, 4.0]])
    p = str(tmp_path / "d.pgm")
    io.save_pgm16(depth, p, scale=1e-3)
    assert np.abs(io.load_pgm16(p) - depth).max() <= 0.5e-3 + 1e-12


def test_pgm16_rejects_8bit(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
    with pytest.raises(ContainerFormatError):
        io.load_pgm16(str(p))


def test_ply_export_parses(tmp_path):
    pts = np.array([[0.0, 1.0, 2.5], [-1.0, 0.25, 3.0]])
    cols = np.array([[1.0, 0.0, 0.0], [0.0, 0.5, 1.0]])
    p = tmp_path / "c.ply"
    io.export_ply(pts, cols, str(p))
    lines = p.read_text().splitlines()
    assert lines[0] == "ply"
    n = int(next(l for l in lines if l.startswith("element vertex")).split()[-1])
    assert n == 2
    body = lines[lines.index("end_header") + 1:]
    vals = np.array([l.split() for l in body], dtype=float)
    assert np.abs(vals[:, :3] - pts).max() < 1e-6
    assert np.array_equal(vals[:, 3:].astype(int), [[255, 0, 0], [0, 128, 255]])


def test_cameras_json_round_trip(tmp_path):
    scene = _scene()
    p = str(tmp_path / "cams.json")
    io.save_cameras_json(scene.cameras, p)
    back = io.load_cameras_json(p)
    assert np.array_equal(scene.cameras.intrinsics, back.intrinsics)
    assert np.array_equal(scene.cameras.extrinsics, back.extrinsics)
    json.loads(open(p).read())  # plain JSON document
