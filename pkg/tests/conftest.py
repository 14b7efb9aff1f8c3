"""Shared fixtures: tiny hand-built scenes and cached synthetic fixtures."""

import numpy as np
import pytest

from dynsplat import synthetic as syn
from dynsplat.model import (DYNAMIC, SHADOW, STATIC, CameraSet, ClusterMotion,
                            SceneModel)


def make_cameras(num_frames=2, f=60.0, size=(64, 48), positions=None):
    W, H = size
    K = np.array([[f, 0, W / 2.0], [0, f, H / 2.0], [0, 0, 1.0]])
    intr = np.repeat(K[None], num_frames, axis=0)
    extr = np.repeat(np.eye(4)[None], num_frames, axis=0).copy()
    if positions is not None:
        for t, p in enumerate(positions):
            extr[t, :3, 3] = -np.asarray(p, float)
    return CameraSet(intr, extr)


def make_scene(n_static=0, n_dynamic=0, n_shadow=0, num_frames=2,
               num_bases=2, k=1, seed=0, size=(64, 48)):
    """Random but valid scene: dynamic/shadow gaussians split over k clusters."""
    rng = np.random.default_rng(seed)
    n = n_static + n_dynamic + n_shadow
    mu0 = rng.uniform([-1.5, -1.0, 3.0], [1.5, 1.0, 5.0], (n, 3))
    rot0 = rng.normal(size=(n, 4))
    rot0 /= np.linalg.norm(rot0, axis=1, keepdims=True)
    scene = SceneModel(
        mu0=mu0,
        rot0=rot0,
        log_scale=rng.uniform(np.log(0.03), np.log(0.12), (n, 3)),
        opacity_logit=rng.uniform(-0.5, 2.0, n),
        color=rng.uniform(0.1, 0.9, (n, 3)),
        kind=np.array([STATIC] * n_static + [DYNAMIC] * n_dynamic
                      + [SHADOW] * n_shadow, np.int8),
        cluster_id=np.full(n, -1, np.int32),
        coeff_logits=rng.normal(scale=0.3, size=(n, num_bases)),
        clusters=[ClusterMotion.identity(i, num_frames, num_bases)
                  for i in range(k)],
        cameras=make_cameras(num_frames, size=size),
        image_size=size,
        num_frames=num_frames,
    )
    moving = np.arange(n_static, n)
    if len(moving):
        scene.cluster_id[moving] = moving % k
    # small random motion so the fixture is not trivially at rest
    for c in scene.clusters:
        for t in range(1, num_frames):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            ang = rng.uniform(0, 0.15)
            c.global_rot[t] = np.concatenate(
                [[np.cos(ang / 2)], np.sin(ang / 2) * axis])
            c.global_trans[t] = rng.uniform(-0.2, 0.2, 3)
            c.bases_t[t] = rng.uniform(-0.05, 0.05, c.bases_t[t].shape)
    return scene


@pytest.fixture(scope="session")
def rigid1():
    return syn.generate(syn.fixtures()["rigid-1"], 0)


@pytest.fixture(scope="session")
def rigid1_noisy():
    spec = syn.fixtures()["rigid-1"]
    spec.noise = syn.NoiseModel(depth_rel_sigma=0.01, track_px_sigma=0.5)
    return syn.generate(spec, 0)


@pytest.fixture(scope="session")
def twobody():
    return syn.generate(syn.fixtures()["two-body"], 0)


@pytest.fixture(scope="session")
def panreveal():
    return syn.generate(syn.fixtures()["pan-reveal"], 0)


@pytest.fixture(scope="session")
def shadowground():
    return syn.generate(syn.fixtures()["shadow-ground"], 0)
