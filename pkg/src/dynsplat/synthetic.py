"""Synthetic ground-truth scenes and emulated 2D priors.

Scenes are built from a fronto-parallel textured backdrop wall, an optional
ground plane, and rigid "card" bodies: textured planar rectangles parallel to
the image plane that translate in 3D and spin in-plane. Cameras translate
only. This keeps every body's depth constant across its surface per frame, so
depth maps sampled at tracked locations are exact and lifting noiseless
tracks through noiseless depth reproduces the true 3D trajectories.

Input "images" are renders of the ground-truth Gaussian scene through the
same rasterizer, so the photometric optimum coincides with ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import SpecInfeasible
from .model import (DYNAMIC, SHADOW, STATIC, CameraSet, ClusterMotion,
                    PriorBundle, SceneModel, TrackSet)
from .motion import matrix_to_quat
from .rasterize import Camera, render_scene


@dataclass
class NoiseModel:
    depth_rel_sigma: float = 0.0
    track_px_sigma: float = 0.0
    mask_dilation_px: int = 0
    dropout_rate: float = 0.0


@dataclass
class BodySpec:
    center0: tuple                # (x, y, z) world, frame 0
    half_size: tuple              # (half width, half height) of the card
    velocity: tuple = (0.0, 0.0, 0.0)   # per frame
    spin: float = 0.0                   # rad per frame, in-plane
    angle0: float = 0.0
    spacing: float = 0.1                # gaussian grid spacing on the card
    tex_seed: int = 1
    casts_shadow: bool = False
    # hinged articulation: index of parent body, pivot in parent-local coords,
    # swing amplitude (rad) and rate (cycles per frame)
    hinge_parent: Optional[int] = None
    hinge_pivot: tuple = (0.0, 0.0)
    swing_amp: float = 0.0
    swing_rate: float = 0.05


@dataclass
class SceneSpec:
    image_size: tuple = (64, 48)
    num_frames: int = 16
    focal: float = 60.0
    wall_z: float = 6.0
    wall_spacing: float = 0.2
    # micro-relief on the backdrop; a perfectly coplanar wall makes the
    # renderer's depth sort degenerate (thousands of exact z ties), so any
    # sub-pixel camera rotation reshuffles the composite order
    wall_z_jitter: float = 0.05
    ground_y: Optional[float] = None
    ground_spacing: float = 0.22
    bodies: list = field(default_factory=list)
    cam_start: tuple = (0.0, 0.0, 0.0)
    cam_velocity: tuple = (0.0, 0.0, 0.0)
    cam_hold_frames: int = 10 ** 9      # frames before the camera starts moving
    light_dir: tuple = (0.25, 1.0, 0.1)  # used only when a body casts a shadow
    noise: NoiseModel = field(default_factory=NoiseModel)
    track_query_stride: int = 2   # stride between query frames
    track_px_stride: int = 2      # pixel stride of tracked points on a body
    track_horizon: int = 64       # max |t - t'| with stored tracks
    track_margin_px: float = 2.5  # erosion margin keeping targets on-card
    gauss_opacity: float = 0.5
    num_bases: int = 4
    shadow_shade: float = 0.35
    shadow_opacity: float = 0.6


@dataclass
class GenResult:
    gt_scene: SceneModel
    images: np.ndarray        # (T, H, W, 3)
    priors: PriorBundle
    gt: dict                  # body poses, trajectories, diameter


def _rotz(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _texture(seed: int):
    """Smooth random color field over world (x, y) coordinates."""
    rng = np.random.default_rng(seed)
    freqs = rng.uniform(0.15, 0.7, size=(3, 2, 2))
    phases = rng.uniform(0, 2 * np.pi, size=(3, 2))
    amps = rng.uniform(0.1, 0.22, size=(3, 2))
    base = rng.uniform(0.35, 0.65, size=3)

    def tex(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.empty(x.shape + (3,))
        for c in range(3):
            v = base[c]
            for k in range(2):
                v = v + amps[c, k] * np.sin(
                    2 * np.pi * (freqs[c, k, 0] * x + freqs[c, k, 1] * y) + phases[c, k])
            out[..., c] = v
        return np.clip(out, 0.02, 0.98)

    return tex


class _BodyPoses:
    """Per-frame pose of one card: world(t, local) = center_t + Rz(angle_t) local."""

    def __init__(self, spec: SceneSpec, bi: int):
        b = spec.bodies[bi]
        T = spec.num_frames
        self.angle = np.zeros(T)
        self.center = np.zeros((T, 3))
        if b.hinge_parent is None:
            for t in range(T):
                self.angle[t] = b.angle0 + b.spin * t
                self.center[t] = np.asarray(b.center0) + np.asarray(b.velocity) * t
        else:
            parent = _BodyPoses(spec, b.hinge_parent)
            pivot = np.array([b.hinge_pivot[0], b.hinge_pivot[1], 0.0])
            for t in range(T):
                rel = b.swing_amp * np.sin(2 * np.pi * b.swing_rate * t)
                self.angle[t] = parent.angle[t] + b.angle0 + rel
                self.center[t] = parent.center[t] + _rotz(parent.angle[t]) @ pivot
        self.half = np.asarray(b.half_size, dtype=float)

    def world(self, t: int, local_xy: np.ndarray) -> np.ndarray:
        loc = np.zeros((len(local_xy), 3))
        loc[:, :2] = local_xy
        return self.center[t] + loc @ _rotz(self.angle[t]).T

    def local_of(self, t: int, world_xy: np.ndarray) -> np.ndarray:
        d = world_xy - self.center[t][:2]
        return d @ _rotz(self.angle[t])[:2, :2]  # R^T d

    def se3(self, t: int):
        R = _rotz(self.angle[t] - self.angle[0])
        tr = self.center[t] - R @ self.center[0]
        return R, tr


def _cam_positions(spec: SceneSpec) -> np.ndarray:
    pos = np.zeros((spec.num_frames, 3))
    for t in range(spec.num_frames):
        moved = max(0, t - spec.cam_hold_frames)
        pos[t] = np.asarray(spec.cam_start) + np.asarray(spec.cam_velocity) * moved
    return pos


def _cameras(spec: SceneSpec) -> CameraSet:
    W, H = spec.image_size
    K = np.array([[spec.focal, 0, (W - 1) / 2.0],
                  [0, spec.focal, (H - 1) / 2.0],
                  [0, 0, 1.0]])
    pos = _cam_positions(spec)
    T = spec.num_frames
    intr = np.tile(K, (T, 1, 1))
    extr = np.tile(np.eye(4), (T, 1, 1))
    extr[:, :3, 3] = -pos
    return CameraSet(intr, extr)


def _shadow_region(spec: SceneSpec, poses: _BodyPoses, t: int):
    """Inverse map for the card shadow on the ground plane along light_dir.

    Returns f(q_x, q_z) -> bool inside, for ground points (q_x, gy, q_z)."""
    L = np.asarray(spec.light_dir, dtype=float)
    L = L / np.linalg.norm(L)
    gy = spec.ground_y
    zc = poses.center[t][2]

    def inside(qx, qz):
        s = (qz - zc) / L[2] if abs(L[2]) > 1e-12 else np.zeros_like(qz)
        px = qx - s * L[0]
        py = gy - s * L[1]
        loc = poses.local_of(t, np.stack([np.ravel(px), np.ravel(py)], axis=1))
        ok = (np.abs(loc[:, 0]) <= poses.half[0]) & (np.abs(loc[:, 1]) <= poses.half[1])
        return ok.reshape(np.shape(qx))

    return inside


def _build_gt_scene(spec: SceneSpec, poses: list) -> tuple:
    """Ground-truth gaussians on the analytic surfaces, one cluster per body."""
    W, H = spec.image_size
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    campos = _cam_positions(spec)
    T = spec.num_frames

    wall_tex = _texture(1000)
    ground_tex = _texture(2000)

    # wall grid covering the frustum footprint over all camera positions
    zrel = spec.wall_z - campos[:, 2]
    xmin = (campos[:, 0] + (0 - cx) / spec.focal * zrel).min() - 0.3
    xmax = (campos[:, 0] + (W - 1 - cx) / spec.focal * zrel).max() + 0.3
    ymin = (campos[:, 1] + (0 - cy) / spec.focal * zrel).min() - 0.3
    ymax = (campos[:, 1] + (H - 1 - cy) / spec.focal * zrel).max() + 0.3
    xs = np.arange(xmin, xmax, spec.wall_spacing)
    ys = np.arange(ymin, ymax, spec.wall_spacing)
    gx, gy = np.meshgrid(xs, ys)
    relief = np.random.default_rng(12345).uniform(
        -spec.wall_z_jitter, spec.wall_z_jitter, gx.size)
    wall_pts = np.stack([gx.ravel(), gy.ravel(), spec.wall_z + relief], axis=1)
    wall_col = wall_tex(wall_pts[:, 0], wall_pts[:, 1])
    wall_scale = np.full(len(wall_pts), spec.wall_spacing * 0.7)

    pts = [wall_pts]
    cols = [wall_col]
    scales = [wall_scale]
    kinds = [np.full(len(wall_pts), STATIC, dtype=np.int8)]
    cids = [np.full(len(wall_pts), -1, dtype=np.int32)]

    if spec.ground_y is not None:
        zmin = campos[:, 2].min() + 1.0
        zs = np.arange(zmin, spec.wall_z, spec.ground_spacing)
        gx, gz = np.meshgrid(np.arange(xmin, xmax, spec.ground_spacing), zs)
        gpts = np.stack([gx.ravel(), np.full(gx.size, spec.ground_y), gz.ravel()], axis=1)
        gcol = ground_tex(gpts[:, 0], gpts[:, 2])
        pts.append(gpts)
        cols.append(gcol)
        scales.append(np.full(len(gpts), spec.ground_spacing * 0.7))
        kinds.append(np.full(len(gpts), STATIC, dtype=np.int8))
        cids.append(np.full(len(gpts), -1, dtype=np.int32))

    clusters = []
    for bi, bp in enumerate(poses):
        b = spec.bodies[bi]
        tex = _texture(b.tex_seed)
        axs = np.arange(-bp.half[0], bp.half[0] + 1e-9, b.spacing)
        bys = np.arange(-bp.half[1], bp.half[1] + 1e-9, b.spacing)
        la, lb = np.meshgrid(axs, bys)
        local = np.stack([la.ravel(), lb.ravel()], axis=1)
        p0 = bp.world(0, local)
        pts.append(p0)
        cols.append(tex(local[:, 0], local[:, 1]))
        scales.append(np.full(len(p0), b.spacing * 0.7))
        kinds.append(np.full(len(p0), DYNAMIC, dtype=np.int8))
        cids.append(np.full(len(p0), bi, dtype=np.int32))

        cm = ClusterMotion.identity(bi, T, spec.num_bases)
        for t in range(T):
            R, tr = bp.se3(t)
            cm.global_rot[t] = matrix_to_quat(R)
            cm.global_trans[t] = tr
        clusters.append(cm)

        if b.casts_shadow and spec.ground_y is not None:
            inside = _shadow_region(spec, bp, 0)
            gxs = np.arange(xmin, xmax, spec.ground_spacing * 0.8)
            gzs = np.arange(campos[:, 2].min() + 1.0, spec.wall_z, spec.ground_spacing * 0.8)
            mx, mz = np.meshgrid(gxs, gzs)
            sel = inside(mx.ravel(), mz.ravel())
            spts = np.stack([mx.ravel()[sel],
                             np.full(sel.sum(), spec.ground_y - 2e-3),
                             mz.ravel()[sel]], axis=1)
            pts.append(spts)
            cols.append(ground_tex(spts[:, 0], spts[:, 2]) * spec.shadow_shade)
            scales.append(np.full(len(spts), spec.ground_spacing * 0.8 * 0.7))
            kinds.append(np.full(len(spts), SHADOW, dtype=np.int8))
            cids.append(np.full(len(spts), bi, dtype=np.int32))

    mu0 = np.concatenate(pts)
    n = len(mu0)
    # shuffle storage order: co-planar splats tie in the depth sort, and grid
    # order would then bias composited position maps in a consistent direction
    perm = np.random.default_rng(12345).permutation(n)
    mu0 = mu0[perm]
    rot0 = np.zeros((n, 4))
    rot0[:, 0] = 1.0
    kind = np.concatenate(kinds)[perm]
    sc = np.concatenate(scales)[perm]
    op = spec.gauss_opacity
    shadow_sel = kind == SHADOW
    opl = np.full(n, np.log(op / (1 - op)))
    opl[shadow_sel] = np.log(spec.shadow_opacity / (1 - spec.shadow_opacity))

    scene = SceneModel(
        mu0=mu0, rot0=rot0,
        log_scale=np.log(sc)[:, None].repeat(3, axis=1),
        opacity_logit=opl,
        color=np.concatenate(cols)[perm],
        kind=kind, cluster_id=np.concatenate(cids)[perm],
        coeff_logits=np.zeros((n, spec.num_bases)),
        clusters=clusters, cameras=_cameras(spec),
        image_size=spec.image_size, num_frames=T,
    )
    return scene


def _analytic_maps(spec: SceneSpec, poses: list, t: int, campos: np.ndarray):
    """Per-pixel depth, foreground mask, body-id map, shadow mask at frame t."""
    W, H = spec.image_size
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    us, vs = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    depth = np.full((H, W), spec.wall_z - campos[2])
    if spec.ground_y is not None:
        dy = (vs - cy) / spec.focal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (spec.ground_y - campos[1]) / dy
        gsel = (dy > 1e-9) & (s > 0.2) & (s < depth)
        depth[gsel] = s[gsel]
        ground_mask = gsel
    else:
        ground_mask = np.zeros((H, W), dtype=bool)

    body_id = np.full((H, W), -1, dtype=int)
    for bi, bp in enumerate(poses):
        zb = bp.center[t][2] - campos[2]
        if zb <= 0.2:
            continue
        X = (us - cx) * zb / spec.focal + campos[0]
        Y = (vs - cy) * zb / spec.focal + campos[1]
        loc = bp.local_of(t, np.stack([X.ravel(), Y.ravel()], axis=1))
        inside = ((np.abs(loc[:, 0]) <= bp.half[0])
                  & (np.abs(loc[:, 1]) <= bp.half[1])).reshape(H, W)
        closer = inside & (zb < depth)
        depth[closer] = zb
        body_id[closer] = bi

    shadow = np.zeros((H, W), dtype=bool)
    if spec.ground_y is not None:
        for bi, bp in enumerate(poses):
            if not spec.bodies[bi].casts_shadow:
                continue
            qz = depth
            qx = (us - cx) * depth / spec.focal + campos[0]
            inside = _shadow_region(spec, bp, t)(qx + 0.0, campos[2] + qz)
            shadow |= inside & ground_mask & (body_id < 0)
    return depth, body_id >= 0, body_id, shadow


def generate(spec: SceneSpec, seed: int = 0) -> GenResult:
    """Generate ground truth, rendered input images, and (noisy) priors."""
    rng = np.random.default_rng(seed)
    W, H = spec.image_size
    T = spec.num_frames
    campos = _cam_positions(spec)
    poses = [_BodyPoses(spec, i) for i in range(len(spec.bodies))]

    # frustum feasibility: each body center must project in-image >= 80% of frames
    for bi, bp in enumerate(poses):
        ok = 0
        for t in range(T):
            z = bp.center[t][2] - campos[t][2]
            if z <= 0.2:
                continue
            u = spec.focal * (bp.center[t][0] - campos[t][0]) / z + (W - 1) / 2.0
            v = spec.focal * (bp.center[t][1] - campos[t][1]) / z + (H - 1) / 2.0
            if 0 <= u <= W - 1 and 0 <= v <= H - 1:
                ok += 1
        if ok < 0.8 * T:
            raise SpecInfeasible(f"body {bi} leaves the frustum in {T - ok}/{T} frames")

    gt_scene = _build_gt_scene(spec, poses)
    images = np.stack([render_scene(gt_scene, t).color for t in range(T)])

    depth = np.zeros((T, H, W))
    fg = np.zeros((T, H, W), dtype=bool)
    body_maps = np.zeros((T, H, W), dtype=int)
    shadow = np.zeros((T, H, W), dtype=bool)
    for t in range(T):
        depth[t], fg[t], body_maps[t], shadow[t] = _analytic_maps(spec, poses, t, campos[t])

    # tracked material points per query frame: strided interior card pixels
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    tracks = {}
    trajectories = {}
    next_pid = 0
    nz = spec.noise
    query_frames = list(range(0, T, spec.track_query_stride))
    for t in query_frames:
        pids, q_px, locals_, bodies_ = [], [], [], []
        for bi, bp in enumerate(poses):
            zb = bp.center[t][2] - campos[t][2]
            zmax = max(bp.center[tt][2] - campos[tt][2] for tt in range(T))
            margin = spec.track_margin_px * zmax / spec.focal
            ys, xs = np.nonzero(body_maps[t] == bi)
            sel = (ys % spec.track_px_stride == 0) & (xs % spec.track_px_stride == 0)
            ys, xs = ys[sel], xs[sel]
            X = (xs - cx) * zb / spec.focal + campos[t][0]
            Y = (ys - cy) * zb / spec.focal + campos[t][1]
            loc = bp.local_of(t, np.stack([X, Y], axis=1))
            keep = ((np.abs(loc[:, 0]) <= bp.half[0] - margin)
                    & (np.abs(loc[:, 1]) <= bp.half[1] - margin))
            for k in np.flatnonzero(keep):
                pids.append(next_pid)
                next_pid += 1
                q_px.append((xs[k], ys[k]))
                locals_.append(loc[k])
                bodies_.append(bi)
        if not pids:
            continue
        pids = np.array(pids, dtype=np.int32)
        q_px = np.array(q_px, dtype=float)
        locals_ = np.array(locals_)
        bodies_ = np.array(bodies_)

        world_all = np.zeros((T, len(pids), 3))
        for tt in range(T):
            for bi, bp in enumerate(poses):
                sel = bodies_ == bi
                if sel.any():
                    world_all[tt, sel] = bp.world(tt, locals_[sel])
        if t == 0:
            for k, pid in enumerate(pids):
                trajectories[int(pid)] = world_all[:, k].copy()

        for tp in range(T):
            if tp == t or abs(tp - t) > spec.track_horizon:
                continue
            pw = world_all[tp]
            z = pw[:, 2] - campos[tp][2]
            u = spec.focal * (pw[:, 0] - campos[tp][0]) / z + cx
            v = spec.focal * (pw[:, 1] - campos[tp][1]) / z + cy
            vis = (z > 0.2) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
            # z-test against other bodies
            for bi, bp in enumerate(poses):
                zb = bp.center[tp][2] - campos[tp][2]
                occ_cand = vis & (bodies_ != bi) & (z > zb + 1e-9)
                if not occ_cand.any():
                    continue
                X = (u[occ_cand] - cx) * zb / spec.focal + campos[tp][0]
                Y = (v[occ_cand] - cy) * zb / spec.focal + campos[tp][1]
                loc = bp.local_of(tp, np.stack([X, Y], axis=1))
                occ = (np.abs(loc[:, 0]) <= bp.half[0]) & (np.abs(loc[:, 1]) <= bp.half[1])
                occ_idx = np.flatnonzero(occ_cand)[occ]
                vis[occ_idx] = False
            uv = np.stack([u, v], axis=1)
            if nz.track_px_sigma > 0:
                uv = uv + rng.normal(scale=nz.track_px_sigma, size=uv.shape)
            if nz.dropout_rate > 0:
                vis = vis & (rng.random(len(vis)) >= nz.dropout_rate)
            tracks[(t, tp)] = TrackSet(point_id=pids.copy(), query_px=q_px.copy(),
                                       target_uv=uv, visible=vis)

    if nz.depth_rel_sigma > 0:
        depth = depth * (1.0 + rng.normal(scale=nz.depth_rel_sigma, size=depth.shape))
    if nz.mask_dilation_px > 0:
        fg = np.stack([ndimage.binary_dilation(m, iterations=nz.mask_dilation_px)
                       for m in fg])

    priors = PriorBundle(depth=depth, fg_mask=fg, shadow_mask=shadow, tracks=tracks)
    ext = gt_scene.mu0.max(axis=0) - gt_scene.mu0.min(axis=0)
    gt = {
        "body_poses": [{"rot": [matrix_to_quat(bp.se3(t)[0]).tolist() for t in range(T)],
                        "trans": [bp.se3(t)[1].tolist() for t in range(T)]}
                       for bp in poses],
        "trajectories": trajectories,
        "diameter": float(np.linalg.norm(ext)),
        "cam_positions": campos,
    }
    return GenResult(gt_scene=gt_scene, images=images, priors=priors, gt=gt)


def fixtures() -> dict:
    """Named fixture catalog used throughout the test and acceptance suites."""
    base = dict(image_size=(64, 48), num_frames=16, focal=60.0, wall_z=6.0)
    cat = {}
    cat["rigid-1"] = SceneSpec(
        bodies=[BodySpec(center0=(-0.5, -0.1, 3.0), half_size=(0.55, 0.42),
                         velocity=(0.06, 0.02, 0.0), spin=0.045)],
        **base)
    cat["two-body"] = SceneSpec(
        bodies=[BodySpec(center0=(-0.75, 0.0, 3.0), half_size=(0.42, 0.36),
                         velocity=(0.075, 0.012, 0.0), tex_seed=1),
                BodySpec(center0=(0.75, 0.1, 3.0), half_size=(0.42, 0.36),
                         velocity=(-0.075, -0.012, 0.0), tex_seed=7)],
        **base)
    cat["articulated"] = SceneSpec(
        bodies=[BodySpec(center0=(-0.3, 0.0, 3.0), half_size=(0.5, 0.3),
                         velocity=(0.05, 0.0, 0.0), spin=0.01),
                BodySpec(center0=(0.0, 0.0, 3.0), half_size=(0.35, 0.22),
                         hinge_parent=0, hinge_pivot=(0.85, 0.0),
                         swing_amp=0.5, swing_rate=0.05)],
        **base)
    cat["pan-reveal"] = SceneSpec(
        bodies=[], cam_hold_frames=7, cam_velocity=(0.1, 0.0, 0.0),
        **base)
    cat["shadow-ground"] = SceneSpec(
        bodies=[BodySpec(center0=(-0.8, -0.3, 3.2), half_size=(0.5, 0.38),
                         velocity=(0.1, 0.0, 0.0), casts_shadow=True)],
        ground_y=0.9, light_dir=(0.3, 1.0, 0.05),
        **{**base, "num_frames": 12})
    return cat
