"""Persistent scene containers: Gaussians, cluster motion, cameras, priors.

The scene is stored struct-of-arrays for vectorized math; `GaussianPrimitive`
is the per-element view used by construction code and tests. All float arrays
are float64 in memory (serialization quantizes to float32, see sceneio).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Gaussian kinds
STATIC = 0
DYNAMIC = 1
SHADOW = 2

KIND_NAMES = {STATIC: "static", DYNAMIC: "dynamic", SHADOW: "shadow"}


@dataclass
class GaussianPrimitive:
    """One canonical Gaussian: position, orientation, scale, opacity, color.

    `scale` is stored as log std-dev per axis, `opacity` as a logit, so
    unconstrained gradient steps stay in the valid domain.
    """

    mu0: np.ndarray                 # (3,)
    rot0: np.ndarray                # (4,) unit quaternion, wxyz
    log_scale: np.ndarray           # (3,)
    opacity_logit: float
    color: np.ndarray               # (3,) in [0,1]
    kind: int = STATIC
    cluster_id: Optional[int] = None
    coeff_logits: Optional[np.ndarray] = None  # (B,) for dynamic/shadow

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)


@dataclass
class ClusterMotion:
    """Per-timestamp global SE(3) plus B blendable local bases for one cluster."""

    cluster_id: int
    global_rot: np.ndarray    # (T, 4) unit quaternions, wxyz
    global_trans: np.ndarray  # (T, 3)
    bases_r6: np.ndarray      # (T, B, 6)
    bases_t: np.ndarray       # (T, B, 3)

    @property
    def num_timestamps(self) -> int:
        return self.global_rot.shape[0]

    @property
    def num_bases(self) -> int:
        return self.bases_r6.shape[1]

    def copy(self) -> "ClusterMotion":
        return ClusterMotion(
            cluster_id=self.cluster_id,
            global_rot=self.global_rot.copy(),
            global_trans=self.global_trans.copy(),
            bases_r6=self.bases_r6.copy(),
            bases_t=self.bases_t.copy(),
        )

    @staticmethod
    def identity(cluster_id: int, num_timestamps: int, num_bases: int) -> "ClusterMotion":
        T, B = num_timestamps, num_bases
        q = np.zeros((T, 4))
        q[:, 0] = 1.0
        r6 = np.zeros((T, B, 6))
        r6[:, :, 0] = 1.0
        r6[:, :, 4] = 1.0
        return ClusterMotion(cluster_id, q, np.zeros((T, 3)), r6, np.zeros((T, B, 3)))

    def append_timestamps(self, count: int, copy_last: bool = True) -> None:
        """Extend all per-timestamp arrays by `count` frames.

        New frames copy the last optimized frame (temporal-continuity warm
        start) or default to identity when the cluster is empty of history.
        """
        T = self.num_timestamps
        if copy_last and T > 0:
            gq = np.repeat(self.global_rot[-1:], count, axis=0)
            gt = np.repeat(self.global_trans[-1:], count, axis=0)
            r6 = np.repeat(self.bases_r6[-1:], count, axis=0)
            tl = np.repeat(self.bases_t[-1:], count, axis=0)
        else:
            ident = ClusterMotion.identity(self.cluster_id, count, self.num_bases)
            gq, gt, r6, tl = ident.global_rot, ident.global_trans, ident.bases_r6, ident.bases_t
        self.global_rot = np.concatenate([self.global_rot, gq], axis=0)
        self.global_trans = np.concatenate([self.global_trans, gt], axis=0)
        self.bases_r6 = np.concatenate([self.bases_r6, r6], axis=0)
        self.bases_t = np.concatenate([self.bases_t, tl], axis=0)


@dataclass
class CameraSet:
    """Per-frame pinhole cameras; extrinsics are world-to-camera SE(3)."""

    intrinsics: np.ndarray  # (T, 3, 3)
    extrinsics: np.ndarray  # (T, 4, 4)

    @property
    def num_frames(self) -> int:
        return self.intrinsics.shape[0]

    def copy(self) -> "CameraSet":
        return CameraSet(self.intrinsics.copy(), self.extrinsics.copy())


@dataclass
class SceneModel:
    """Static background + shadow + dynamic Gaussians with their motion field."""

    mu0: np.ndarray            # (N, 3)
    rot0: np.ndarray           # (N, 4) unit quaternions wxyz
    log_scale: np.ndarray      # (N, 3)
    opacity_logit: np.ndarray  # (N,)
    color: np.ndarray          # (N, 3)
    kind: np.ndarray           # (N,) int8
    cluster_id: np.ndarray     # (N,) int32, -1 for static
    coeff_logits: np.ndarray   # (N, B)
    clusters: list             # list[ClusterMotion], ids contiguous 0..K-1
    cameras: CameraSet
    image_size: tuple          # (width, height)
    num_frames: int

    @property
    def num_gaussians(self) -> int:
        return self.mu0.shape[0]

    @property
    def num_clusters(self) -> int:
        return len(self.clusters)

    @property
    def num_bases(self) -> int:
        return self.coeff_logits.shape[1]

    @property
    def opacity(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def kind_mask(self, kind: int) -> np.ndarray:
        return self.kind == kind

    def members_of(self, cluster_id: int, include_shadow: bool = True) -> np.ndarray:
        sel = self.cluster_id == cluster_id
        if not include_shadow:
            sel &= self.kind == DYNAMIC
        return np.flatnonzero(sel)

    def gaussian(self, i: int) -> GaussianPrimitive:
        cid = int(self.cluster_id[i])
        return GaussianPrimitive(
            mu0=self.mu0[i].copy(),
            rot0=self.rot0[i].copy(),
            log_scale=self.log_scale[i].copy(),
            opacity_logit=float(self.opacity_logit[i]),
            color=self.color[i].copy(),
            kind=int(self.kind[i]),
            cluster_id=cid if cid >= 0 else None,
            coeff_logits=self.coeff_logits[i].copy() if cid >= 0 else None,
        )

    def copy(self) -> "SceneModel":
        return SceneModel(
            mu0=self.mu0.copy(),
            rot0=self.rot0.copy(),
            log_scale=self.log_scale.copy(),
            opacity_logit=self.opacity_logit.copy(),
            color=self.color.copy(),
            kind=self.kind.copy(),
            cluster_id=self.cluster_id.copy(),
            coeff_logits=self.coeff_logits.copy(),
            clusters=[c.copy() for c in self.clusters],
            cameras=self.cameras.copy(),
            image_size=tuple(self.image_size),
            num_frames=self.num_frames,
        )

    @staticmethod
    def from_primitives(prims, clusters, cameras, image_size, num_frames,
                        num_bases: Optional[int] = None) -> "SceneModel":
        n = len(prims)
        if num_bases is None:
            num_bases = clusters[0].num_bases if clusters else 1
        scene = SceneModel(
            mu0=np.zeros((n, 3)),
            rot0=np.zeros((n, 4)),
            log_scale=np.zeros((n, 3)),
            opacity_logit=np.zeros(n),
            color=np.zeros((n, 3)),
            kind=np.zeros(n, dtype=np.int8),
            cluster_id=np.full(n, -1, dtype=np.int32),
            coeff_logits=np.zeros((n, num_bases)),
            clusters=list(clusters),
            cameras=cameras,
            image_size=tuple(image_size),
            num_frames=num_frames,
        )
        for i, g in enumerate(prims):
            scene.mu0[i] = g.mu0
            scene.rot0[i] = g.rot0
            scene.log_scale[i] = g.log_scale
            scene.opacity_logit[i] = g.opacity_logit
            scene.color[i] = g.color
            scene.kind[i] = g.kind
            if g.cluster_id is not None:
                scene.cluster_id[i] = g.cluster_id
            if g.coeff_logits is not None:
                scene.coeff_logits[i, : len(g.coeff_logits)] = g.coeff_logits
        return scene


@dataclass
class TrackSet:
    """Tracks from one query frame to one target frame."""

    point_id: np.ndarray   # (P,) int32, stable across target frames
    query_px: np.ndarray   # (P, 2) pixel (x, y) in the query frame
    target_uv: np.ndarray  # (P, 2) pixel (x, y) in the target frame
    visible: np.ndarray    # (P,) bool


@dataclass
class PriorBundle:
    """Emulated 2D priors: depth, masks, shadow masks, pairwise tracks."""

    depth: np.ndarray        # (T, H, W) positive scene-unit depths
    fg_mask: np.ndarray      # (T, H, W) bool
    shadow_mask: np.ndarray  # (T, H, W) bool
    tracks: dict = field(default_factory=dict)  # (t, t') -> TrackSet

    @property
    def num_frames(self) -> int:
        return self.depth.shape[0]

    @property
    def image_size(self) -> tuple:
        return (self.depth.shape[2], self.depth.shape[1])  # (W, H)

    def track_pairs(self):
        return sorted(self.tracks.keys())


def _quat_norm_err(q: np.ndarray) -> np.ndarray:
    return np.abs(np.linalg.norm(q, axis=-1) - 1.0)


def validate_scene(scene: SceneModel) -> list:
    """Return the list of violated invariants (empty = valid). Never mutates."""
    report = []
    n = scene.num_gaussians
    k = scene.num_clusters
    b = scene.num_bases

    if not np.all(np.isfinite(scene.opacity_logit)):
        report.append("non-finite opacity logits")
    if not np.all(np.isfinite(scene.log_scale)):
        report.append("non-finite log scales")
    bad_q = np.flatnonzero(_quat_norm_err(scene.rot0) > 1e-6)
    if bad_q.size:
        report.append(f"non-unit canonical quaternion at gaussians {bad_q[:8].tolist()}")

    is_static = scene.kind == STATIC
    is_dyn = scene.kind == DYNAMIC
    is_shadow = scene.kind == SHADOW
    has_cluster = scene.cluster_id >= 0

    bad = np.flatnonzero(is_dyn & ~has_cluster)
    if bad.size:
        report.append(f"dynamic gaussians without cluster_id: {bad[:8].tolist()}")
    bad = np.flatnonzero(is_shadow & ~has_cluster)
    if bad.size:
        report.append(f"shadow gaussians without cluster_id: {bad[:8].tolist()}")
    bad = np.flatnonzero(is_static & has_cluster)
    if bad.size:
        report.append(f"static gaussians with cluster_id: {bad[:8].tolist()}")
    bad = np.flatnonzero(has_cluster & (scene.cluster_id >= k))
    if bad.size:
        report.append(f"gaussians referencing cluster_id >= K={k}: {bad[:8].tolist()}")

    for idx, c in enumerate(scene.clusters):
        if c.cluster_id != idx:
            report.append(f"cluster at slot {idx} carries id {c.cluster_id} (ids not contiguous)")
        T = c.num_timestamps
        if not (c.global_trans.shape[0] == T and c.bases_r6.shape[0] == T
                and c.bases_t.shape[0] == T):
            report.append(f"cluster {idx}: per-timestamp arrays disagree in length")
        if c.num_bases < 1:
            report.append(f"cluster {idx}: B < 1")
        elif c.num_bases != b:
            report.append(f"cluster {idx}: basis count {c.num_bases} != coeff width {b}")
        if _quat_norm_err(c.global_rot).max(initial=0.0) > 1e-6:
            report.append(f"cluster {idx}: non-unit global quaternion")

    cams = scene.cameras
    if cams.num_frames < scene.num_frames:
        report.append("fewer cameras than frames")
    fx = cams.intrinsics[:, 0, 0]
    fy = cams.intrinsics[:, 1, 1]
    if np.any(fx <= 0) or np.any(fy <= 0):
        report.append("non-positive focal length")
    R = cams.extrinsics[:, :3, :3]
    ortho_err = np.abs(np.einsum("tij,tik->tjk", R, R) - np.eye(3)).max(axis=(1, 2))
    bad = np.flatnonzero(ortho_err >= 1e-9)
    if bad.size:
        report.append(f"non-orthonormal extrinsic rotation at frames {bad[:8].tolist()}")

    if n and scene.coeff_logits.shape != (n, b):
        report.append("coeff_logits shape mismatch")
    return report
