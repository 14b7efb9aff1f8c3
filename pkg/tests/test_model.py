"""Scene container invariants and validate_scene behavior."""

import numpy as np

from conftest import make_scene
from dynsplat.model import (DYNAMIC, STATIC, ClusterMotion, GaussianPrimitive,
                            validate_scene)


def test_primitive_decoding():
    g = GaussianPrimitive(mu0=np.zeros(3), rot0=np.array([1.0, 0, 0, 0]),
                          log_scale=np.log([0.1, 0.2, 0.3]),
                          opacity_logit=0.0, color=np.array([0.5, 0.5, 0.5]))
    assert abs(g.opacity - 0.5) < 1e-12
    assert np.allclose(g.scale, [0.1, 0.2, 0.3])


def test_cluster_identity_and_append():
    c = ClusterMotion.identity(0, 3, num_bases=2)
    assert c.num_timestamps == 3 and c.num_bases == 2
    assert np.allclose(c.global_rot, [[1, 0, 0, 0]] * 3)
    assert np.allclose(c.global_trans, 0)
    c.global_trans[2] = [1.0, 2.0, 3.0]
    c.append_timestamps(2, copy_last=True)
    assert c.num_timestamps == 5
    assert np.allclose(c.global_trans[3], [1, 2, 3])
    assert np.allclose(c.global_trans[4], [1, 2, 3])
    assert c.bases_r6.shape == (5, 2, 6)


def test_validate_fresh_scene_empty_report():
    scene = make_scene(n_static=5, n_dynamic=8, k=2, num_frames=3)
    assert validate_scene(scene) == []


def test_validate_reports_bad_cluster_id():
    scene = make_scene(n_static=2, n_dynamic=4, k=2)
    bad = np.flatnonzero(scene.kind == DYNAMIC)[0]
    scene.cluster_id[bad] = scene.num_clusters  # out of range
    report = validate_scene(scene)
    assert report
    assert any(str(bad) in r for r in report)


def test_validate_is_pure():
    scene = make_scene(n_static=3, n_dynamic=3)
    before = scene.mu0.copy(), scene.cluster_id.copy()
    validate_scene(scene)
    validate_scene(scene)
    assert np.array_equal(scene.mu0, before[0])
    assert np.array_equal(scene.cluster_id, before[1])


def test_members_of_and_kind_mask():
    scene = make_scene(n_static=4, n_dynamic=6, n_shadow=2, k=2)
    assert scene.kind_mask(STATIC).sum() == 4
    all_members = np.concatenate([scene.members_of(0), scene.members_of(1)])
    assert len(all_members) == 8
    no_shadow = sum(len(scene.members_of(c, include_shadow=False))
                    for c in range(2))
    assert no_shadow == 6


def test_copy_is_deep():
    scene = make_scene(n_dynamic=4)
    dup = scene.copy()
    dup.mu0 += 1.0
    dup.clusters[0].global_trans += 1.0
    assert not np.allclose(scene.mu0, dup.mu0)
    assert not np.allclose(scene.clusters[0].global_trans,
                           dup.clusters[0].global_trans)
