"""Density clustering: HDBSCAN semantics on constructed point sets."""

import numpy as np
import pytest

from dynsplat.errors import TooFewPoints
from dynsplat.hdbscan import hdbscan_labels


def test_single_tight_blob():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3)) * 0.01
    labels = hdbscan_labels(pts, min_cluster_size=10)
    assert (labels == 0).all()


def test_two_separated_blobs():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(40, 3)) * 0.05
    b = rng.normal(size=(40, 3)) * 0.05 + np.array([5.0, 0, 0])
    labels = hdbscan_labels(np.vstack([a, b]), min_cluster_size=10)
    la, lb = labels[:40], labels[40:]
    assert (la == la[0]).all() and (lb == lb[0]).all()
    assert la[0] != lb[0] and la[0] >= 0 and lb[0] >= 0


def test_uniform_sparse_scatter_all_noise():
    # grid spacing far above any density scale that min_cluster_size supports
    g = np.arange(5, dtype=float) * 100.0
    pts = np.stack(np.meshgrid(g, g, g), axis=-1).reshape(-1, 3)
    rng = np.random.default_rng(2)
    pts += rng.normal(size=pts.shape) * 20.0
    # spacing (~100) far above the density scale -> everything is noise
    labels = hdbscan_labels(pts, min_cluster_size=30, max_scale=10.0)
    assert (labels == -1).all()


def test_too_few_points():
    with pytest.raises(TooFewPoints):
        hdbscan_labels(np.zeros((5, 3)), min_cluster_size=10)


def test_max_scale_keeps_dense_blobs_selectable():
    # two tight blobs stay clusters under a max_scale gate that excludes
    # the loose root joining them
    rng = np.random.default_rng(3)
    a = rng.normal(size=(30, 3)) * 0.05
    b = rng.normal(size=(30, 3)) * 0.05 + np.array([20.0, 0, 0])
    labels = hdbscan_labels(np.vstack([a, b]), min_cluster_size=10,
                            max_scale=1.0)
    assert len(set(labels[labels >= 0].tolist())) == 2
    assert (labels >= 0).all()


def test_deterministic():
    rng = np.random.default_rng(4)
    pts = np.vstack([rng.normal(size=(30, 3)),
                     rng.normal(size=(30, 3)) + 8.0])
    l1 = hdbscan_labels(pts, min_cluster_size=10)
    l2 = hdbscan_labels(pts, min_cluster_size=10)
    assert np.array_equal(l1, l2)
