"""Adaptive cluster control: detect motion-inconsistent clusters from
trajectory features, split them with full parameter duplication, prune
undersized clusters, and remap indices to stay contiguous.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .errors import StaleDecision
from .hdbscan import hdbscan_labels
from .model import DYNAMIC, SceneModel
from .motion import positions_over_window


@dataclass
class SplitDecision:
    cluster_id: int
    group_a: np.ndarray          # gaussian indices
    group_b: np.ndarray
    centroid_distance: float     # scene units (RMS per-frame centroid gap)


def trajectory_features(scene: SceneModel, cluster_id: int, window) -> tuple:
    """Per-Gaussian motion descriptors: positions over the window, flattened.

    Returns (member indices (M,), features (M, 3*|window|)). Only dynamic
    members contribute; shadows follow the split outcome afterwards.
    """
    idx = scene.members_of(cluster_id, include_shadow=False)
    window = list(window)
    traj = positions_over_window(scene, idx, window)  # (W, M, 3)
    feats = np.transpose(traj, (1, 0, 2)).reshape(len(idx), -1)
    return idx, feats


def density_cluster(features: np.ndarray, min_cluster_size: int = 10,
                    max_scale: Optional[float] = None):
    """HDBSCAN over feature space.

    Returns (list of index arrays, one per sub-cluster; noise index array).
    """
    labels = hdbscan_labels(features, min_cluster_size=min_cluster_size,
                            max_scale=max_scale)
    subs = [np.flatnonzero(labels == lab) for lab in range(labels.max() + 1)]
    noise = np.flatnonzero(labels == -1)
    return subs, noise


def propose_split(features: np.ndarray, sub_clusters, member_idx: np.ndarray,
                  cluster_id: int, tau_split: float,
                  window_len: int) -> Optional[SplitDecision]:
    """Agglomerate sub-clusters (average linkage) down to two candidate
    groups; return a decision iff their centroid distance exceeds tau_split.

    Distances are reported in scene units: feature-space distance divided by
    sqrt(|window|) (the RMS per-frame centroid gap).
    """
    if len(sub_clusters) < 2:
        return None
    cents = np.stack([features[s].mean(axis=0) for s in sub_clusters])
    if len(sub_clusters) == 2:
        grouping = np.array([0, 1])
    else:
        Z = linkage(cents, method="average")
        grouping = fcluster(Z, t=2, criterion="maxclust") - 1
    ga = np.concatenate([sub_clusters[i] for i in np.flatnonzero(grouping == 0)])
    gb = np.concatenate([sub_clusters[i] for i in np.flatnonzero(grouping == 1)])
    ca = features[ga].mean(axis=0)
    cb = features[gb].mean(axis=0)
    dist = float(np.linalg.norm(ca - cb) / np.sqrt(window_len))
    if dist <= tau_split:
        return None
    return SplitDecision(cluster_id=cluster_id,
                         group_a=member_idx[ga], group_b=member_idx[gb],
                         centroid_distance=dist)


def apply_split(scene: SceneModel, decision: SplitDecision) -> SceneModel:
    """Split one cluster into two, duplicating all motion parameters so the
    posed scene is unchanged at the moment of splitting. Mutates in place."""
    k = decision.cluster_id
    if k >= scene.num_clusters:
        raise StaleDecision(f"cluster {k} no longer exists")
    members = set(scene.members_of(k).tolist())
    for g in np.concatenate([decision.group_a, decision.group_b]):
        if int(g) not in members:
            raise StaleDecision(f"gaussian {g} is not a member of cluster {k}")
    if len(decision.group_a) == 0 or len(decision.group_b) == 0:
        raise StaleDecision("split groups must both be nonempty")
    if np.intersect1d(decision.group_a, decision.group_b).size:
        raise StaleDecision("split groups overlap")

    new_id = scene.num_clusters
    twin = scene.clusters[k].copy()
    twin.cluster_id = new_id
    scene.clusters.append(twin)
    scene.cluster_id[decision.group_b] = new_id

    # members in neither group go to the nearer group centroid (canonical space)
    rest = np.array(sorted(members - set(decision.group_a.tolist())
                           - set(decision.group_b.tolist())), dtype=int)
    if rest.size:
        ca = scene.mu0[decision.group_a].mean(axis=0)
        cb = scene.mu0[decision.group_b].mean(axis=0)
        da = np.linalg.norm(scene.mu0[rest] - ca, axis=1)
        db = np.linalg.norm(scene.mu0[rest] - cb, axis=1)
        scene.cluster_id[rest[db < da]] = new_id
    return scene


def prune_and_remap(scene: SceneModel, min_size: int = 8):
    """Delete clusters with fewer than min_size dynamic members together
    with all their Gaussians and motion arrays; remap remaining cluster ids
    contiguously (order-preserving). Returns (scene, old->new id map)."""
    counts = np.array([len(scene.members_of(k, include_shadow=False))
                       for k in range(scene.num_clusters)])
    keep = counts >= min_size
    id_map = {}
    new_id = 0
    for k in range(scene.num_clusters):
        id_map[k] = new_id if keep[k] else -1
        if keep[k]:
            new_id += 1

    drop_g = np.zeros(scene.num_gaussians, dtype=bool)
    for k in np.flatnonzero(~keep):
        drop_g |= scene.cluster_id == k
    sel = ~drop_g
    scene.mu0 = scene.mu0[sel]
    scene.rot0 = scene.rot0[sel]
    scene.log_scale = scene.log_scale[sel]
    scene.opacity_logit = scene.opacity_logit[sel]
    scene.color = scene.color[sel]
    scene.kind = scene.kind[sel]
    scene.coeff_logits = scene.coeff_logits[sel]
    old_cid = scene.cluster_id[sel]
    scene.cluster_id = np.array(
        [id_map[c] if c >= 0 else -1 for c in old_cid], dtype=np.int32)

    new_clusters = []
    for k in range(len(scene.clusters)):
        if keep[k]:
            cm = scene.clusters[k]
            cm.cluster_id = id_map[k]
            new_clusters.append(cm)
    scene.clusters = new_clusters
    return scene, id_map


def run_adaptive_control(scene: SceneModel, window, tau_split: float,
                         hdb_min_cluster_size: int = 10,
                         prune_min_size: int = 8,
                         max_scale: Optional[float] = None) -> dict:
    """One full adaptive-control pass: try to split every cluster once, then
    prune and remap. Returns a summary dict."""
    splits = 0
    window = list(window)
    for k in list(range(scene.num_clusters)):
        idx, feats = trajectory_features(scene, k, window)
        if len(idx) < 2 * hdb_min_cluster_size:
            continue
        subs, _noise = density_cluster(feats, min_cluster_size=hdb_min_cluster_size,
                                       max_scale=max_scale)
        dec = propose_split(feats, subs, idx, k, tau_split, len(window))
        if dec is not None:
            apply_split(scene, dec)
            splits += 1
    _, id_map = prune_and_remap(scene, prune_min_size)
    return {"splits": splits, "id_map": id_map}
