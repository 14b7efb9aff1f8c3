"""CPU software splatting: EWA projection and front-to-back alpha compositing.

Per pixel p the composite is C(p) = sum_i c_i a_i prod_{j<i} (1 - a_j) with
splats sorted front-to-back by camera depth, a_i = o_i exp(-0.5 d^T S^-1 d).
Depth and 3D-position maps reuse the same weights, substituting camera depth
and a per-splat value vector respectively.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import CameraSet
from .motion import PosedGaussian, pose_scene

NEAR_PLANE = 0.01
COV2D_FLOOR = 0.3          # px^2 anti-aliasing floor, added to the diagonal
ALPHA_CLAMP = 0.999        # per-splat alpha ceiling
EARLY_EXIT_ALPHA = 0.9999  # stop compositing once accumulated alpha passes this
FOOTPRINT_CHI2 = 9.0       # 3-sigma elliptical footprint cutoff
COVERAGE_TAU = 0.5         # accumulated-alpha threshold for the coverage map


@dataclass
class Camera:
    """One pinhole camera: intrinsics K and world-to-camera extrinsic E."""

    K: np.ndarray  # (3, 3)
    E: np.ndarray  # (4, 4)

    @staticmethod
    def from_set(cams: CameraSet, t: int) -> "Camera":
        return Camera(cams.intrinsics[t], cams.extrinsics[t])


@dataclass
class Splat2D:
    mu2d: np.ndarray     # (2,) pixel coords
    cov2d: np.ndarray    # (2, 2) SPD
    cam_depth: float
    source: int


@dataclass
class RenderOutput:
    color: np.ndarray      # (H, W, 3)
    depth: np.ndarray      # (H, W) alpha-weighted camera depth
    position: np.ndarray   # (H, W, 3) alpha-weighted value vectors
    alpha_acc: np.ndarray  # (H, W)


def project_points(camera: Camera, points: np.ndarray):
    """World points -> (pixel (M,2), camera depth (M,))."""
    pts = np.atleast_2d(points)
    cam = pts @ camera.E[:3, :3].T + camera.E[:3, 3]
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.K[0, 0] * cam[:, 0] / z + camera.K[0, 2]
        v = camera.K[1, 1] * cam[:, 1] / z + camera.K[1, 2]
    return np.stack([u, v], axis=1), z


def project_splats(camera: Camera, image_size, mu_t: np.ndarray, rot_t: np.ndarray,
                   scale: np.ndarray, near: float = NEAR_PLANE):
    """Vectorized EWA projection of posed Gaussians.

    Returns (mu2d (M,2), cov2d (M,2,2), depth (M,), keep (N,) bool). Culled
    entries (behind the near plane or outside the image grown by the 3-sigma
    footprint) are dropped from the first three arrays.
    """
    W, H = image_size
    Rcw = camera.E[:3, :3]
    cam = mu_t @ Rcw.T + camera.E[:3, 3]
    z = cam[:, 2]
    keep = z > near

    fx, fy = camera.K[0, 0], camera.K[1, 1]
    cx, cy = camera.K[0, 2], camera.K[1, 2]
    zs = np.where(keep, z, 1.0)
    u = fx * cam[:, 0] / zs + cx
    v = fy * cam[:, 1] / zs + cy

    # 3D covariance R S^2 R^T, then first-order perspective Jacobian
    S2 = scale ** 2
    cov3d = np.einsum("nij,nj,nkj->nik", rot_t, S2, rot_t)
    J = np.zeros((mu_t.shape[0], 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * cam[:, 0] / zs ** 2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * cam[:, 1] / zs ** 2
    JW = J @ Rcw
    cov2d = np.einsum("nij,njk,nlk->nil", JW, cov3d, JW)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR

    # image-bounds cull with 3-sigma extent
    tr = cov2d[:, 0, 0] + cov2d[:, 1, 1]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    lam_max = 0.5 * tr + np.sqrt(np.maximum(0.25 * tr ** 2 - det, 0.0))
    r = 3.0 * np.sqrt(lam_max)
    keep &= (u >= -r) & (u <= W - 1 + r) & (v >= -r) & (v <= H - 1 + r)

    mu2d = np.stack([u, v], axis=1)
    return mu2d[keep], cov2d[keep], z[keep], keep


def project_gaussian(pg: PosedGaussian, camera: Camera, image_size) -> Optional[Splat2D]:
    """Project a single posed Gaussian; None means culled."""
    mu2d, cov2d, z, keep = project_splats(
        camera, image_size, pg.mu_t[None], pg.rot_t[None], pg.scale[None])
    if not keep[0]:
        return None
    return Splat2D(mu2d[0], cov2d[0], float(z[0]), 0)


def _as_arrays(posed):
    mu = np.stack([p.mu_t for p in posed])
    rot = np.stack([p.rot_t for p in posed])
    scale = np.stack([p.scale for p in posed])
    opacity = np.array([p.opacity for p in posed])
    color = np.stack([p.color for p in posed])
    return mu, rot, scale, opacity, color


def render_arrays(camera: Camera, image_size, mu_t, rot_t, scale, opacity, color,
                  values: Optional[np.ndarray] = None,
                  background: Optional[np.ndarray] = None,
                  early_exit: bool = True,
                  weight_sink: Optional[np.ndarray] = None) -> RenderOutput:
    """Composite posed Gaussians given as arrays.

    `values` (N,3) are alpha-blended into the position map (defaults to the
    posed positions, i.e. the 3D position map uses the same geometry that
    defines the weights). `weight_sink` (N,) optionally receives each splat's
    total compositing weight over the image.
    """
    W, H = image_size
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=float)
    if values is None:
        values = mu_t

    col = np.zeros((H, W, 3))
    dep = np.zeros((H, W))
    pos = np.zeros((H, W, 3))
    trans = np.ones((H, W))

    mu2d, cov2d, z, keep = project_splats(camera, image_size, mu_t, rot_t, scale)
    src = np.flatnonzero(keep)
    order = np.argsort(z, kind="stable")  # depth ascending, ties by source index
    inv = np.linalg.inv(cov2d)

    for j in order:
        u, v = mu2d[j]
        c00, c01, c11 = cov2d[j, 0, 0], cov2d[j, 0, 1], cov2d[j, 1, 1]
        tr = c00 + c11
        det = c00 * c11 - c01 ** 2
        rad = 3.0 * np.sqrt(0.5 * tr + np.sqrt(max(0.25 * tr ** 2 - det, 0.0)))
        x0 = max(int(np.floor(u - rad)), 0)
        x1 = min(int(np.ceil(u + rad)), W - 1)
        y0 = max(int(np.floor(v - rad)), 0)
        y1 = min(int(np.ceil(v + rad)), H - 1)
        if x0 > x1 or y0 > y1:
            continue
        xs = np.arange(x0, x1 + 1, dtype=float) - u
        ys = np.arange(y0, y1 + 1, dtype=float) - v
        dx = xs[None, :]
        dy = ys[:, None]
        q = inv[j, 0, 0] * dx ** 2 + 2 * inv[j, 0, 1] * dx * dy + inv[j, 1, 1] * dy ** 2
        a = np.minimum(opacity[src[j]] * np.exp(-0.5 * q), ALPHA_CLAMP)
        inside = q <= FOOTPRINT_CHI2
        tile = trans[y0:y1 + 1, x0:x1 + 1]
        if early_exit:
            inside &= tile > 1.0 - EARLY_EXIT_ALPHA
        if not inside.any():
            continue
        w = np.where(inside, a * tile, 0.0)
        col[y0:y1 + 1, x0:x1 + 1] += w[:, :, None] * color[src[j]]
        dep[y0:y1 + 1, x0:x1 + 1] += w * z[j]
        pos[y0:y1 + 1, x0:x1 + 1] += w[:, :, None] * values[src[j]]
        if weight_sink is not None:
            weight_sink[src[j]] += w.sum()
        trans[y0:y1 + 1, x0:x1 + 1] = np.where(inside, tile * (1.0 - a), tile)

    col += trans[:, :, None] * bg
    return RenderOutput(color=col, depth=dep, position=pos, alpha_acc=1.0 - trans)


def render(posed, camera: Camera, image_size,
           values: Optional[np.ndarray] = None,
           background: Optional[np.ndarray] = None,
           early_exit: bool = True) -> RenderOutput:
    """Composite a list of PosedGaussian (see render_arrays for array form)."""
    if len(posed) == 0:
        W, H = image_size
        bg = np.zeros(3) if background is None else np.asarray(background, dtype=float)
        return RenderOutput(
            color=np.tile(bg, (H, W, 1)),
            depth=np.zeros((H, W)),
            position=np.zeros((H, W, 3)),
            alpha_acc=np.zeros((H, W)),
        )
    mu, rot, scale, opacity, color = _as_arrays(posed)
    return render_arrays(camera, image_size, mu, rot, scale, opacity, color,
                         values=values, background=background, early_exit=early_exit)


def render_scene(scene, t: int, values_frame: Optional[int] = None,
                 subset: Optional[np.ndarray] = None,
                 background: Optional[np.ndarray] = None,
                 early_exit: bool = True) -> RenderOutput:
    """Render the scene at frame t through its own camera.

    With `values_frame` t', the position map carries frame-t' positions under
    frame-t weights (the cross-time position map used for track supervision).
    """
    camera = Camera.from_set(scene.cameras, t)
    mu_t, rot_t = pose_scene(scene, t)
    values = None
    if values_frame is not None and values_frame != t:
        values, _ = pose_scene(scene, values_frame, with_rotations=False)
    scale, opacity, color = scene.scale, scene.opacity, scene.color
    if subset is not None:
        mu_t, rot_t = mu_t[subset], rot_t[subset]
        scale, opacity, color = scale[subset], opacity[subset], color[subset]
        if values is not None:
            values = values[subset]
    return render_arrays(camera, scene.image_size, mu_t, rot_t, scale, opacity,
                         color, values=values, background=background,
                         early_exit=early_exit)


def coverage_map(posed, camera: Camera, image_size, tau: float = COVERAGE_TAU) -> np.ndarray:
    """Boolean H x W map: True where accumulated alpha >= tau (covered)."""
    out = render(posed, camera, image_size)
    return out.alpha_acc >= tau


def coverage_map_arrays(camera: Camera, image_size, mu_t, rot_t, scale, opacity,
                        tau: float = COVERAGE_TAU) -> np.ndarray:
    out = render_arrays(camera, image_size, mu_t, rot_t, scale, opacity,
                        np.zeros((mu_t.shape[0], 3)))
    return out.alpha_acc >= tau
