"""Cluster motion evaluation: 6D rotation decoding, basis blending, posing.

Each dynamic Gaussian's state at time t composes its cluster's global SE(3)
with a local transform blended from B shared bases:

    mu_t = R_g (R_l mu0 + t_l) + t_g,   R_t = R_g R_l R_0

where (R_l, t_l) blends the bases with per-Gaussian softmax weights. The
blend happens in 6D rotation space before mapping to SO(3).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRotation, FrameOutOfRange
from .model import DYNAMIC, SHADOW, ClusterMotion, GaussianPrimitive, SceneModel

_EPS = 1e-12

# Basis-blend operation counter, used to check that per-Gaussian cost is O(B)
# and independent of cluster count / total Gaussian count.
_blend_ops = 0
_counting = False


@contextmanager
def count_blend_ops():
    """Context manager yielding a dict whose 'ops' entry accumulates
    per-Gaussian basis operations performed inside the block."""
    global _blend_ops, _counting
    saved_ops, saved_flag = _blend_ops, _counting
    _blend_ops, _counting = 0, True
    box = {}
    try:
        yield box
    finally:
        box["ops"] = _blend_ops
        _blend_ops, _counting = saved_ops, saved_flag


def _tally(n_ops: int) -> None:
    global _blend_ops
    if _counting:
        _blend_ops += n_ops


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (wxyz) to rotation matrix, batched over leading dims."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (wxyz), w >= 0."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def identity_r6() -> np.ndarray:
    return np.array([1.0, 0, 0, 0, 1.0, 0])


def rot6d_to_matrix(r6: np.ndarray) -> np.ndarray:
    """Map a 6D continuous rotation representation to SO(3) by Gram-Schmidt.

    Columns: a = normalize(r6[:3]); b = normalize(r6[3:] - (a.b)a); c = a x b.
    """
    r6 = np.asarray(r6, dtype=float)
    a_raw, b_raw = r6[..., :3], r6[..., 3:]
    na = np.linalg.norm(a_raw, axis=-1, keepdims=True)
    if np.any(na <= _EPS):
        raise DegenerateRotation("first 6D column has near-zero norm")
    a = a_raw / na
    b_res = b_raw - np.sum(a * b_raw, axis=-1, keepdims=True) * a
    nb = np.linalg.norm(b_res, axis=-1, keepdims=True)
    if np.any(nb <= _EPS):
        raise DegenerateRotation("second 6D column collapses under Gram-Schmidt")
    b = b_res / nb
    c = np.cross(a, b)
    return np.stack([a, b, c], axis=-1)


def normalize_coeffs(logits: np.ndarray) -> np.ndarray:
    """Softmax along the last axis; outputs positive and sum to 1."""
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def blend_local(coeffs: np.ndarray, bases_r6: np.ndarray, bases_t: np.ndarray):
    """Blend B local bases with convex coefficients: 6D-space average for
    rotation (then mapped to SO(3)), linear average for translation.

    coeffs: (..., B) nonnegative, rows summing to 1; bases_r6: (B, 6) or
    broadcastable (..., B, 6); bases_t likewise with trailing dim 3.
    Returns (rotation (..., 3, 3), translation (..., 3)).
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if np.any(coeffs < -1e-9) or np.any(np.abs(coeffs.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("coefficients must be nonnegative and sum to 1")
    r6 = np.sum(coeffs[..., None] * np.asarray(bases_r6, dtype=float), axis=-2)
    t = np.sum(coeffs[..., None] * np.asarray(bases_t, dtype=float), axis=-2)
    _tally(int(np.prod(coeffs.shape[:-1], dtype=int)) * coeffs.shape[-1])
    return rot6d_to_matrix(r6), t


@dataclass
class PosedGaussian:
    """A Gaussian's state at one timestamp."""

    mu_t: np.ndarray       # (3,)
    rot_t: np.ndarray      # (3, 3) orthonormal
    scale: np.ndarray      # (3,) decoded std-dev
    opacity: float
    color: np.ndarray      # (3,)


def gaussian_state_at(g: GaussianPrimitive, cluster: ClusterMotion, t: int) -> PosedGaussian:
    """Pose one Gaussian at frame t through its cluster's motion.

    Static Gaussians (cluster None) pass through with identity motion.
    """
    R0 = quat_to_matrix(g.rot0)
    if g.kind not in (DYNAMIC, SHADOW) or cluster is None:
        return PosedGaussian(g.mu0.copy(), R0, g.scale, g.opacity, g.color.copy())
    if g.cluster_id != cluster.cluster_id:
        raise ValueError("gaussian does not belong to the given cluster")
    if not (0 <= t < cluster.num_timestamps):
        raise FrameOutOfRange(f"frame {t} outside cluster timeline of {cluster.num_timestamps}")
    w = normalize_coeffs(g.coeff_logits)
    R_l, t_l = blend_local(w, cluster.bases_r6[t], cluster.bases_t[t])
    R_g = quat_to_matrix(cluster.global_rot[t])
    t_g = cluster.global_trans[t]
    mu_t = R_g @ (R_l @ g.mu0 + t_l) + t_g
    rot_t = R_g @ R_l @ R0
    return PosedGaussian(mu_t, rot_t, g.scale, g.opacity, g.color.copy())


def pose_scene(scene: SceneModel, t: int, with_rotations: bool = True):
    """Vectorized posing of every Gaussian at frame t.

    Returns (mu_t (N,3), rot_t (N,3,3) or None). Cost per dynamic Gaussian is
    O(B): one coefficient blend against its own cluster's bases only.
    """
    n = scene.num_gaussians
    mu_t = scene.mu0.copy()
    rot_t = quat_to_matrix(scene.rot0) if with_rotations else None
    moving = scene.kind_mask(DYNAMIC) | scene.kind_mask(SHADOW)
    for c in scene.clusters:
        if not (0 <= t < c.num_timestamps):
            raise FrameOutOfRange(
                f"frame {t} outside cluster {c.cluster_id} timeline of {c.num_timestamps}")
        idx = np.flatnonzero(moving & (scene.cluster_id == c.cluster_id))
        if idx.size == 0:
            continue
        w = normalize_coeffs(scene.coeff_logits[idx])          # (M, B)
        R_l, t_l = blend_local(w, c.bases_r6[t], c.bases_t[t])  # (M,3,3), (M,3)
        R_g = quat_to_matrix(c.global_rot[t])
        local = np.einsum("mij,mj->mi", R_l, scene.mu0[idx]) + t_l
        mu_t[idx] = local @ R_g.T + c.global_trans[t]
        if with_rotations:
            rot_t[idx] = np.einsum("ij,mjk,mkl->mil", R_g, R_l, rot_t[idx])
    return mu_t, rot_t


def positions_over_window(scene: SceneModel, indices: np.ndarray, frames) -> np.ndarray:
    """Positions of selected Gaussians over a frame window: (len(frames), M, 3)."""
    out = np.empty((len(frames), len(indices), 3))
    for fi, t in enumerate(frames):
        mu_t, _ = pose_scene(scene, t, with_rotations=False)
        out[fi] = mu_t[indices]
    return out
