"""Initial scene construction: depth back-projection, trajectory lifting,
K-means cluster seeding, and Procrustes estimates for the global transforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration, EmptyWindow, TooFewPoints
from .model import (DYNAMIC, SHADOW, STATIC, CameraSet, ClusterMotion,
                    PriorBundle, SceneModel)
from .motion import matrix_to_quat
from .rasterize import Camera


@dataclass
class Trajectory3D:
    point_id: int
    positions: np.ndarray   # (Tw, 3) over the window
    visibility: np.ndarray  # (Tw,) bool


@dataclass
class InitConfig:
    num_clusters: int = 16
    num_bases: int = 4
    t_init: int = 8
    bg_stride: int = 2
    shadow_stride: int = 2
    init_opacity: float = 0.5
    scale_knn: int = 3
    seed: int = 0
    # extra per-axis log-scale shrink applied to initial isotropic scales
    scale_factor: float = 1.0


def bilinear_sample(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear sample of an (H, W[, C]) image at (P, 2) pixel coords (x, y).

    Coordinates are clamped to the valid interpolation domain.
    """
    H, W = img.shape[:2]
    u = np.clip(uv[:, 0], 0.0, W - 1.0)
    v = np.clip(uv[:, 1], 0.0, H - 1.0)
    x0 = np.clip(np.floor(u).astype(int), 0, W - 2) if W > 1 else np.zeros(len(u), int)
    y0 = np.clip(np.floor(v).astype(int), 0, H - 2) if H > 1 else np.zeros(len(v), int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = u - x0
    fy = v - y0
    if img.ndim == 3:
        fx = fx[:, None]
        fy = fy[:, None]
    return ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
            + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])


def backproject_pixels(camera: Camera, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Lift pixels (P,2) with camera depths (P,) to world points (P,3)."""
    fx, fy = camera.K[0, 0], camera.K[1, 1]
    cx, cy = camera.K[0, 2], camera.K[1, 2]
    x = (uv[:, 0] - cx) / fx * depth
    y = (uv[:, 1] - cy) / fy * depth
    cam = np.stack([x, y, depth], axis=1)
    R = camera.E[:3, :3]
    return (cam - camera.E[:3, 3]) @ R  # R^T (p - t), R orthonormal


def backproject_depth(depth_map: np.ndarray, camera: Camera, stride: int = 1,
                      mask: Optional[np.ndarray] = None):
    """Back-project a strided pixel grid with finite positive depth.

    Returns (points (P,3), pixels (P,2)). `mask` restricts the sampled pixels.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    H, W = depth_map.shape
    ys, xs = np.mgrid[0:H:stride, 0:W:stride]
    uv = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    d = depth_map[ys.ravel(), xs.ravel()]
    ok = np.isfinite(d) & (d > 0)
    if mask is not None:
        ok &= mask[ys.ravel(), xs.ravel()]
    uv, d = uv[ok], d[ok]
    return backproject_pixels(camera, uv, d), uv


def lift_tracks(priors: PriorBundle, cameras: CameraSet, window) -> list:
    """Lift 2D tracks queried at the window's first frame into 3D trajectories.

    Each tracked pixel is back-projected at the prior depth sampled at its
    target location; off-image or occluded targets are flagged invisible.
    """
    window = list(window)
    if not window:
        raise EmptyWindow("empty frame window")
    t0 = window[0]
    W, H = priors.image_size

    base = None
    for t in window:
        key = (t0, t)
        if t == t0 or key not in priors.tracks:
            continue
        base = priors.tracks[key]
        break
    if base is None:
        raise EmptyWindow(f"no tracks with query frame {t0} inside the window")

    pids = base.point_id
    P = len(pids)
    positions = np.zeros((len(window), P, 3))
    visibility = np.zeros((len(window), P), dtype=bool)

    for fi, t in enumerate(window):
        if t == t0:
            uv = base.query_px
            vis = np.ones(P, dtype=bool)
        else:
            ts = priors.tracks.get((t0, t))
            if ts is None:
                continue
            order = _align_ids(pids, ts.point_id)
            uv = ts.target_uv[order]
            vis = ts.visible[order]
        inb = (uv[:, 0] >= 0) & (uv[:, 0] <= W - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= H - 1)
        vis = vis & inb
        d = bilinear_sample(priors.depth[t], uv)
        vis &= np.isfinite(d) & (d > 0)
        cam = Camera.from_set(cameras, t)
        positions[fi, vis] = backproject_pixels(cam, uv[vis], d[vis])
        visibility[fi] = vis

    trajs = []
    for p in range(P):
        if visibility[:, p].sum() >= 2:
            trajs.append(Trajectory3D(int(pids[p]), positions[:, p].copy(),
                                      visibility[:, p].copy()))
    if not trajs:
        raise EmptyWindow("no trajectory visible in at least two frames")
    return trajs


def _align_ids(ref_ids: np.ndarray, ids: np.ndarray) -> np.ndarray:
    lut = {int(pid): i for i, pid in enumerate(ids)}
    return np.array([lut[int(pid)] for pid in ref_ids], dtype=int)


def kmeans(points: np.ndarray, k: int, seed: int = 0,
           max_iter: int = 100, tol: float = 1e-6):
    """Lloyd's algorithm with k-means++ seeding; deterministic given seed.

    Empty clusters are re-seeded from the point farthest from its centroid.
    Returns (assignments (N,), centroids (k, 3)).
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if n < k:
        raise TooFewPoints(f"{n} points for k={k}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = points[rng.integers(n)]
        else:
            centroids[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centroids[i]) ** 2, axis=1))

    assign = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        dist = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assign = np.argmin(dist, axis=1)
        new_c = centroids.copy()
        for i in range(k):
            sel = assign == i
            if sel.any():
                new_c[i] = points[sel].mean(axis=0)
            else:
                far = np.argmax(dist[np.arange(n), assign])
                new_c[i] = points[far]
                assign[far] = i
        shift = np.linalg.norm(new_c - centroids, axis=1).max()
        centroids = new_c
        if shift < tol:
            break
    dist = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    assign = np.argmin(dist, axis=1)
    return assign, centroids


def procrustes(P: np.ndarray, Q: np.ndarray, weights: Optional[np.ndarray] = None):
    """Least-squares rigid alignment (Kabsch): returns (R, t) minimizing
    sum w_i ||R p_i + t - q_i||^2. Rotation only, no scale."""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P.shape != Q.shape or P.shape[0] < 3:
        raise DegenerateConfiguration("need >= 3 corresponding points")
    if weights is None:
        weights = np.ones(P.shape[0])
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    cp = (w[:, None] * P).sum(axis=0)
    cq = (w[:, None] * Q).sum(axis=0)
    H = (w[:, None] * (P - cp)).T @ (Q - cq)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise DegenerateConfiguration("cross-covariance rank <= 1")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = cq - R @ cp
    return R, t


def _knn_scale(points: np.ndarray, k: int) -> np.ndarray:
    """Isotropic scale per point: mean distance to its k nearest neighbors."""
    n = points.shape[0]
    if n <= 1:
        return np.full(n, 0.05)
    tree = cKDTree(points)
    kk = min(k + 1, n)
    d, _ = tree.query(points, k=kk)
    return d[:, 1:].mean(axis=1)


def init_scene(priors: PriorBundle, cameras: CameraSet,
               images: Optional[np.ndarray] = None,
               config: Optional[InitConfig] = None) -> SceneModel:
    """Build the initial scene from priors over the initial window.

    Background Gaussians come from strided depth back-projection outside the
    foreground mask; dynamic Gaussians sit at frame-0 trajectory positions
    with clusters from K-means; per-cluster globals come from Procrustes
    between frame-0 and frame-t trajectory point sets; local bases start at
    identity and coefficient logits at zero (uniform weights). Shadow
    Gaussians are sampled inside the shadow mask at ground depth.
    """
    cfg = config or InitConfig()
    if cfg.t_init < 2:
        raise ValueError("initial window must span at least 2 frames")
    W, H = priors.image_size
    window = list(range(min(cfg.t_init, priors.num_frames)))
    cam0 = Camera.from_set(cameras, 0)

    def color_at(uv, t=0):
        if images is None:
            return np.full((len(uv), 3), 0.5)
        return np.clip(bilinear_sample(images[t].astype(float), uv), 0.0, 1.0)

    # static background
    bg_pts, bg_uv = backproject_depth(priors.depth[0], cam0, cfg.bg_stride,
                                      mask=~priors.fg_mask[0])
    # dynamic foreground from lifted trajectories
    trajs = lift_tracks(priors, cameras, window) if priors.fg_mask.any() else []
    trajs = [tr for tr in trajs if tr.visibility[0]]

    clusters = []
    dyn_pts = np.zeros((0, 3))
    dyn_uv = np.zeros((0, 2))
    assign = np.zeros(0, dtype=int)
    centroids = np.zeros((0, 3))
    if trajs:
        dyn_pts = np.stack([tr.positions[0] for tr in trajs])
        base = priors.tracks[(0, window[1])]
        order = _align_ids(np.array([tr.point_id for tr in trajs]), base.point_id)
        dyn_uv = base.query_px[order]
        k = min(cfg.num_clusters, len(trajs))
        assign, centroids = kmeans(dyn_pts, k, seed=cfg.seed)
        for ci in range(k):
            cm = ClusterMotion.identity(ci, len(window), cfg.num_bases)
            sel = np.flatnonzero(assign == ci)
            for fi, t in enumerate(window[1:], start=1):
                vis = np.array([trajs[i].visibility[fi] for i in sel])
                use = sel[vis]
                if len(use) >= 3:
                    p0 = np.stack([trajs[i].positions[0] for i in use])
                    pt = np.stack([trajs[i].positions[fi] for i in use])
                    try:
                        R, tvec = procrustes(p0, pt)
                    except DegenerateConfiguration:
                        R = np.eye(3)
                        tvec = (pt - p0).mean(axis=0)
                elif len(use) >= 1:
                    # translation-only fallback: centroid shift
                    p0 = np.stack([trajs[i].positions[0] for i in use])
                    pt = np.stack([trajs[i].positions[fi] for i in use])
                    R = np.eye(3)
                    tvec = (pt - p0).mean(axis=0)
                else:
                    R = np.eye(3)
                    tvec = np.zeros(3)
                cm.global_rot[fi] = matrix_to_quat(R)
                cm.global_trans[fi] = tvec
            clusters.append(cm)

    # shadow Gaussians at ground depth inside the shadow mask
    sh_pts, sh_uv = backproject_depth(priors.depth[0], cam0, cfg.shadow_stride,
                                      mask=priors.shadow_mask[0] & ~priors.fg_mask[0])
    n_bg, n_dyn, n_sh = len(bg_pts), len(dyn_pts), len(sh_pts)
    if n_sh and not clusters:
        sh_pts = sh_pts[:0]
        sh_uv = sh_uv[:0]
        n_sh = 0

    n = n_bg + n_dyn + n_sh
    B = cfg.num_bases
    mu0 = np.concatenate([bg_pts, dyn_pts, sh_pts]) if n else np.zeros((0, 3))
    rot0 = np.zeros((n, 4))
    rot0[:, 0] = 1.0
    kind = np.concatenate([
        np.full(n_bg, STATIC, dtype=np.int8),
        np.full(n_dyn, DYNAMIC, dtype=np.int8),
        np.full(n_sh, SHADOW, dtype=np.int8),
    ])
    cluster_id = np.full(n, -1, dtype=np.int32)
    cluster_id[n_bg:n_bg + n_dyn] = assign
    if n_sh:
        d2 = np.sum((sh_pts[:, None, :] - centroids[None]) ** 2, axis=2)
        cluster_id[n_bg + n_dyn:] = np.argmin(d2, axis=1)

    scales = np.concatenate([
        _knn_scale(bg_pts, cfg.scale_knn) if n_bg else np.zeros(0),
        _knn_scale(dyn_pts, cfg.scale_knn) if n_dyn else np.zeros(0),
        _knn_scale(sh_pts, cfg.scale_knn) if n_sh else np.zeros(0),
    ])
    log_scale = np.log(np.maximum(scales * cfg.scale_factor, 1e-6))[:, None].repeat(3, axis=1)
    op = cfg.init_opacity
    opacity_logit = np.full(n, np.log(op / (1.0 - op)))
    color = np.concatenate([color_at(bg_uv), color_at(dyn_uv), color_at(sh_uv)]) \
        if n else np.zeros((0, 3))

    return SceneModel(
        mu0=mu0, rot0=rot0, log_scale=log_scale, opacity_logit=opacity_logit,
        color=color, kind=kind, cluster_id=cluster_id,
        coeff_logits=np.zeros((n, B)), clusters=clusters, cameras=cameras.copy(),
        image_size=(W, H), num_frames=len(window),
    )
