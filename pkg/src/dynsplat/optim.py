"""Progressive optimization schedule.

The sequence is consumed in batches of `t_new` frames. Each batch extends the
static background into newly revealed regions (with camera refinement), then
propagates the foreground motion through three stages: (1) one-directional
tracking into the new frames with everything else frozen, (2) bi-directional
tracking over the recent propagation window, and (3) periodically, a global
pass over all parameters with photometric, rigidity and shadow terms plus
densification and adaptive cluster control.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .adaptive import run_adaptive_control
from .initialize import (InitConfig, _knn_scale, backproject_pixels,
                         bilinear_sample, init_scene)
from .model import DYNAMIC, STATIC, PriorBundle, SceneModel
from .losses import (DiffScene, LossReport, build_knn_edges, loss_depth,
                     loss_rgb, loss_arap, loss_shadow_seg, loss_track,
                     total_loss)
from .rasterize import Camera, coverage_map_arrays
from .motion import pose_scene, quat_to_matrix
from .errors import NoValidPairs


@dataclass
class Schedule:
    t_init: int = 8
    t_new: int = 4
    t_prop: int = 12
    s3_period: int = 3
    iters_init: int = 120
    iters_s1: int = 150
    iters_s2: int = 60
    iters_s3: int = 60
    iters_bg: int = 60
    optimize_cameras: bool = False
    weights: dict = field(default_factory=lambda: {
        "track": 1.0, "depth": 0.5, "rgb": 1.0, "arap": 0.1, "shadow": 0.1})
    # rates sized so stochastic pair sampling refines rather than wanders;
    # glob_* x iters_s1 still covers the copy-last warm-start travel
    lrs: dict = field(default_factory=lambda: {
        "mu0": 3e-4, "rot0": 6e-4, "log_scale": 6e-4, "opacity_logit": 1.5e-3,
        "color": 1.5e-3, "coeff_logits": 1.5e-3, "glob_rot": 2e-3,
        "glob_trans": 3e-3, "bases_r6": 6e-4, "bases_t": 6e-4,
        "cam_delta": 1e-3})
    max_rgb_pixels: int = 700
    rgb_frames_per_iter: int = 2
    pairs_per_iter: int = 6
    arap_k: int = 8
    densify_grad_thresh: float = 5e-3
    densify_scale_frac: float = 0.02   # of scene diameter
    tau_split_frac: float = 0.05
    hdb_min_cluster_size: int = 10
    prune_min_size: int = 8
    adaptive_max_scale_frac: float = 0.1
    bg_stride: int = 2
    seed: int = 0

    def __post_init__(self):
        if not (self.t_prop >= self.t_new >= 1):
            raise ValueError("need t_prop >= t_new >= 1")
        if self.t_init < 2:
            raise ValueError("need t_init >= 2")


class Adam:
    """Adaptive-moment update with per-entry activity masks.

    Masked-out entries are left bit-identical, including their moments, so a
    later unfreeze starts them from a cold state.
    """

    def __init__(self, lrs: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lrs = lrs
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def step(self, params: dict, grads: dict, masks: dict = None):
        masks = masks or {}
        with torch.no_grad():
            for name, g in grads.items():
                if g is None:
                    continue
                p = params[name]
                if name not in self.m:
                    self.m[name] = torch.zeros_like(p)
                    self.v[name] = torch.zeros_like(p)
                    self.t[name] = 0
                mask = masks.get(name)
                if mask is not None:
                    g = g * mask
                self.t[name] += 1
                t = self.t[name]
                m = self.m[name]
                v = self.v[name]
                if mask is None:
                    m.mul_(self.b1).add_(g, alpha=1 - self.b1)
                    v.mul_(self.b2).addcmul_(g, g, value=1 - self.b2)
                    mh = m / (1 - self.b1 ** t)
                    vh = v / (1 - self.b2 ** t)
                    p.sub_(self.lrs[name] * mh / (vh.sqrt() + self.eps))
                else:
                    m_new = self.b1 * m + (1 - self.b1) * g
                    v_new = self.b2 * v + (1 - self.b2) * g * g
                    m.copy_(torch.where(mask.bool(), m_new, m))
                    v.copy_(torch.where(mask.bool(), v_new, v))
                    mh = m / (1 - self.b1 ** t)
                    vh = v / (1 - self.b2 ** t)
                    upd = self.lrs[name] * mh / (vh.sqrt() + self.eps)
                    p.copy_(torch.where(mask.bool(), p - upd, p))


def _renorm_quats(dscene: DiffScene, names, masks):
    """Renormalize quaternion rows touched by the last step."""
    with torch.no_grad():
        for name in ("rot0", "glob_rot"):
            if name not in names:
                continue
            q = dscene.params()[name]
            mask = (masks or {}).get(name)
            n = torch.sqrt((q * q).sum(-1, keepdim=True))
            qn = q / torch.clamp(n, min=1e-12)
            if mask is None:
                q.copy_(qn)
            else:
                q.copy_(torch.where(mask.bool(), qn, q))


def _run(dscene: DiffScene, names, loss_fn, iters, lrs, masks=None,
         history=None, phase=""):
    """Generic descent loop over the named parameter groups."""
    params = dscene.params()
    dscene.requires_grad_(names)
    adam = Adam(lrs)
    for it in range(iters):
        loss, rep = loss_fn(it)
        gs = torch.autograd.grad(loss, [params[n] for n in names],
                                 allow_unused=True)
        adam.step(params, dict(zip(names, gs)), masks)
        _renorm_quats(dscene, names, masks)
        if history is not None:
            history.append((phase, it, rep))
    dscene.requires_grad_([])
    return dscene


def _motion_masks(dscene: DiffScene, timestamps) -> dict:
    """Masks activating motion parameters only at the given timestamps."""
    sel = np.zeros(dscene.glob_rot.shape[1], dtype=bool)
    sel[list(timestamps)] = True
    out = {}
    for name in ("glob_rot", "glob_trans", "bases_r6", "bases_t"):
        p = dscene.params()[name]
        m = torch.zeros_like(p)
        m[:, sel] = 1.0
        out[name] = m
    return out


def _pairs_between(priors: PriorBundle, query_frames, target_frames):
    qs, ts = set(query_frames), set(target_frames)
    return [(t, tp) for (t, tp) in sorted(priors.tracks)
            if t in qs and tp in ts and t != tp]


def _sample(pairs, k, rng):
    if len(pairs) <= k:
        return list(pairs)
    idx = rng.choice(len(pairs), k, replace=False)
    return [pairs[i] for i in idx]


def param_hash(scene: SceneModel, exclude_timestamps=None) -> str:
    """Hash of all scene parameters, optionally ignoring motion entries at
    the given timestamps (used to verify freeze contracts)."""
    h = hashlib.sha256()
    for a in (scene.mu0, scene.rot0, scene.log_scale, scene.opacity_logit,
              scene.color, scene.coeff_logits):
        h.update(np.ascontiguousarray(a).tobytes())
    keep = None
    for cm in scene.clusters:
        for a in (cm.global_rot, cm.global_trans, cm.bases_r6, cm.bases_t):
            if exclude_timestamps is not None:
                keep = np.setdiff1d(np.arange(len(a)), list(exclude_timestamps))
                a = a[keep]
            h.update(np.ascontiguousarray(a).tobytes())
    h.update(np.ascontiguousarray(scene.cameras.extrinsics).tobytes())
    return h.hexdigest()


def scene_diameter(scene: SceneModel) -> float:
    ext = scene.mu0.max(axis=0) - scene.mu0.min(axis=0)
    return float(np.linalg.norm(ext))


# --- background extension -------------------------------------------------

def extend_background(scene: SceneModel, priors: PriorBundle,
                      images: np.ndarray, new_frames, schedule: Schedule,
                      history=None) -> np.ndarray:
    """Add static gaussians in newly revealed regions and refine new poses.

    Returns the indices of added gaussians.
    """
    W, H = scene.image_size
    static = np.flatnonzero(scene.kind == STATIC)
    added = []
    for t in new_frames:
        cam = Camera.from_set(scene.cameras, t)
        if len(static):
            # static gaussians are canonical at every frame
            rot_t = quat_to_matrix(scene.rot0[static])
            covered = coverage_map_arrays(
                cam, scene.image_size, scene.mu0[static], rot_t,
                scene.scale[static], scene.opacity[static])
        else:
            covered = np.zeros((H, W), dtype=bool)
        need = ~covered & ~priors.fg_mask[t]
        ys, xs = np.nonzero(need)
        sel = (ys % schedule.bg_stride == 0) & (xs % schedule.bg_stride == 0)
        ys, xs = ys[sel], xs[sel]
        if len(ys) == 0:
            continue
        uv = np.stack([xs, ys], axis=1).astype(float)
        d = bilinear_sample(priors.depth[t], uv)
        pts = backproject_pixels(cam, uv, d)
        col = images[t][ys, xs].astype(float)
        sc = _knn_scale(pts, k=3)
        n0 = scene.num_gaussians
        nn = len(pts)
        scene.mu0 = np.concatenate([scene.mu0, pts])
        rot = np.zeros((nn, 4))
        rot[:, 0] = 1.0
        scene.rot0 = np.concatenate([scene.rot0, rot])
        scene.log_scale = np.concatenate(
            [scene.log_scale, np.log(sc)[:, None].repeat(3, axis=1)])
        scene.opacity_logit = np.concatenate([scene.opacity_logit, np.zeros(nn)])
        scene.color = np.concatenate([scene.color, col])
        scene.kind = np.concatenate([scene.kind, np.full(nn, STATIC, np.int8)])
        scene.cluster_id = np.concatenate(
            [scene.cluster_id, np.full(nn, -1, np.int32)])
        scene.coeff_logits = np.concatenate(
            [scene.coeff_logits, np.zeros((nn, scene.num_bases))])
        added.extend(range(n0, n0 + nn))
        static = np.flatnonzero(scene.kind == STATIC)
    added = np.asarray(added, dtype=int)

    # refine new gaussian attributes + new-frame extrinsics photometrically
    ds = DiffScene(scene)
    names = ["cam_delta"]
    masks = {}
    cmask = torch.zeros_like(ds.cam_delta)
    cmask[list(new_frames)] = 1.0
    masks["cam_delta"] = cmask
    if len(added):
        names += ["mu0", "log_scale", "opacity_logit", "color"]
        for nm in ("mu0", "log_scale", "opacity_logit", "color"):
            m = torch.zeros_like(ds.params()[nm])
            m[added] = 1.0
            masks[nm] = m
    bg_mask = ~priors.fg_mask
    rng = np.random.default_rng(schedule.seed + 17)
    frames = list(new_frames)

    static = np.flatnonzero(scene.kind == STATIC)

    def loss_fn(it):
        fs = frames if len(frames) <= 2 else \
            [frames[i] for i in rng.choice(len(frames), 2, replace=False)]
        val = loss_rgb(ds, images, fs, pixel_mask=bg_mask,
                       max_pixels=schedule.max_rgb_pixels, rng=rng,
                       subset=static)
        return val, LossReport(rgb=float(val.detach()), total=float(val.detach()))

    _run(ds, names, loss_fn, schedule.iters_bg, schedule.lrs, masks,
         history, phase="bg")
    ds.write_back()
    return added


def refine_poses(scene: SceneModel, priors: PriorBundle, images: np.ndarray,
                 frames, iters: int = 150, lr: float = 2e-3,
                 max_pixels: int = 900, seed: int = 0,
                 rotation_only: bool = False) -> SceneModel:
    """Photometric camera refinement for the given frames (background only).

    `rotation_only` freezes the translation deltas; near-planar scenes make
    small tilts photometrically ambiguous with translations, so when the
    miscalibration is known to be rotational, locking translation avoids
    sliding along that valley.
    """
    ds = DiffScene(scene)
    cmask = torch.zeros_like(ds.cam_delta)
    cmask[list(frames)] = 1.0
    if rotation_only:
        cmask[:, 3:] = 0.0
    rng = np.random.default_rng(seed)
    bg_mask = ~priors.fg_mask

    def loss_fn(it):
        val = loss_rgb(ds, images, list(frames), pixel_mask=bg_mask,
                       max_pixels=max_pixels, rng=rng)
        return val, LossReport(rgb=float(val.detach()), total=float(val.detach()))

    _run(ds, ["cam_delta"], loss_fn, iters, {"cam_delta": lr},
         {"cam_delta": cmask})
    ds.write_back()
    return scene


# --- densification ---------------------------------------------------------

def densify(scene: SceneModel, grad_norm: np.ndarray,
            grad_thresh: float, scale_thresh: float,
            rng: np.random.Generator = None) -> SceneModel:
    """Clone small / split large gaussians whose position gradients are big."""
    rng = rng or np.random.default_rng(0)
    hi = grad_norm > grad_thresh
    if not hi.any():
        return scene
    big = scene.scale.max(axis=1) > scale_thresh
    clone = np.flatnonzero(hi & ~big)
    split = np.flatnonzero(hi & big)
    keep = np.ones(scene.num_gaussians, dtype=bool)
    keep[split] = False

    chunks = {f: [getattr(scene, f)[keep]] for f in
              ("mu0", "rot0", "log_scale", "opacity_logit", "color",
               "kind", "cluster_id", "coeff_logits")}

    def emit(idx, mu):
        for f in chunks:
            a = getattr(scene, f)[idx]
            chunks[f].append(mu if f == "mu0" else a)

    if len(clone):
        emit(clone, scene.mu0[clone])
    if len(split):
        from .motion import quat_to_matrix
        R = quat_to_matrix(scene.rot0[split])
        S = scene.scale[split]
        for sgn in (1.0, -1.0):
            off = np.einsum("nij,nj->ni", R, S * rng.normal(size=S.shape) * 0.5)
            mu = scene.mu0[split] + sgn * off
            for f in chunks:
                a = getattr(scene, f)[split]
                if f == "mu0":
                    chunks[f].append(mu)
                elif f == "log_scale":
                    chunks[f].append(a - np.log(1.6))
                else:
                    chunks[f].append(a)
    for f in chunks:
        setattr(scene, f, np.concatenate(chunks[f]))
    return scene


# --- foreground propagation -------------------------------------------------

def propagate_foreground(scene: SceneModel, priors: PriorBundle,
                         images: np.ndarray, new_frames, schedule: Schedule,
                         batch_index: int = 0, history=None,
                         run_stage3: bool = None,
                         stages=(1, 2)) -> SceneModel:
    """Three-stage motion propagation for a batch of new frames."""
    new_frames = list(new_frames)
    t_done = scene.num_frames
    for cm in scene.clusters:
        cm.append_timestamps(len(new_frames), copy_last=True)
    scene.num_frames = t_done + len(new_frames)
    rng = np.random.default_rng(schedule.seed + 101 * (batch_index + 1))
    wts = schedule.weights

    window = list(range(max(0, scene.num_frames - schedule.t_prop),
                        scene.num_frames))
    established = [t for t in window if t < t_done]

    # Stage 1: one-directional established -> new, only new-frame motion
    ds = DiffScene(scene)
    pairs1 = _pairs_between(priors, established, new_frames)
    if 1 in stages and pairs1 and scene.num_clusters:
        masks = _motion_masks(ds, new_frames)
        names = list(masks)

        def s1_loss(it):
            ps = _sample(pairs1, schedule.pairs_per_iter, rng)
            lt = loss_track(ds, priors, ps)
            ld = loss_depth(ds, priors, ps)
            val = wts["track"] * lt + wts["depth"] * ld
            return val, LossReport(track=float(lt.detach()), depth=float(ld.detach()),
                                   total=float(val.detach()))

        _run(ds, names, s1_loss, schedule.iters_s1, schedule.lrs, masks,
             history, phase=f"b{batch_index}.s1")

    # Stage 2: bi-directional pairs within the propagation window; motion
    # parameters of window frames except frame 0, which anchors the gauge
    pairs2 = _pairs_between(priors, window, window)
    if 2 in stages and pairs2 and scene.num_clusters:
        active_ts = [t for t in window if t != 0]
        masks = _motion_masks(ds, active_ts)
        names = list(masks)

        def s2_loss(it):
            ps = _sample(pairs2, schedule.pairs_per_iter, rng)
            lt = loss_track(ds, priors, ps)
            ld = loss_depth(ds, priors, ps)
            val = wts["track"] * lt + wts["depth"] * ld
            return val, LossReport(track=float(lt.detach()), depth=float(ld.detach()),
                                   total=float(val.detach()))

        _run(ds, names, s2_loss, schedule.iters_s2, schedule.lrs, masks,
             history, phase=f"b{batch_index}.s2")
    ds.write_back()

    # Stage 3: periodic global refinement with all parameters
    if run_stage3 is None:
        run_stage3 = (batch_index + 1) % schedule.s3_period == 0
    if run_stage3:
        stage3(scene, priors, images, schedule, rng, history,
               phase=f"b{batch_index}.s3")
    return scene


def stage3(scene: SceneModel, priors: PriorBundle, images: np.ndarray,
           schedule: Schedule, rng: np.random.Generator, history=None,
           phase: str = "s3", adaptive: bool = True) -> SceneModel:
    """Global joint pass: full loss, all parameters, densify + cluster control."""
    wts = schedule.weights
    all_frames = list(range(scene.num_frames))
    pairs_all = _pairs_between(priors, all_frames, all_frames)
    ds = DiffScene(scene)
    names = [n for n in ds.params()
             if schedule.optimize_cameras or n != "cam_delta"]
    # frame 0 anchors the gauge: its motion stays identity
    masks = _motion_masks(ds, range(1, scene.num_frames))
    edges = build_knn_edges(scene, schedule.arap_k)
    grad_acc = np.zeros(scene.num_gaussians)
    n_acc = 0

    def s3_loss(it):
        ps = _sample(pairs_all, schedule.pairs_per_iter, rng)
        fs = _sample(all_frames, schedule.rgb_frames_per_iter, rng)
        return total_loss(ds, priors, images, ps, fs, edges, wts,
                          max_rgb_pixels=schedule.max_rgb_pixels, rng=rng)

    params = ds.params()
    ds.requires_grad_(names)
    adam = Adam(schedule.lrs)
    for it in range(schedule.iters_s3):
        loss, rep = s3_loss(it)
        gs = torch.autograd.grad(loss, [params[n] for n in names],
                                 allow_unused=True)
        gd = dict(zip(names, gs))
        if gd.get("mu0") is not None:
            grad_acc += np.linalg.norm(gd["mu0"].numpy(), axis=1)
            n_acc += 1
        adam.step(params, gd, masks)
        _renorm_quats(ds, names, masks)
        if history is not None:
            history.append((phase, it, rep))
    ds.requires_grad_([])
    ds.write_back()

    diam = scene_diameter(scene)
    if n_acc:
        densify(scene, grad_acc / n_acc, schedule.densify_grad_thresh,
                schedule.densify_scale_frac * diam, rng)
    if adaptive and scene.num_clusters:
        window = list(range(max(0, scene.num_frames - schedule.t_prop),
                            scene.num_frames))
        run_adaptive_control(
            scene, window,
            tau_split=schedule.tau_split_frac * diam,
            hdb_min_cluster_size=schedule.hdb_min_cluster_size,
            prune_min_size=schedule.prune_min_size,
            max_scale=schedule.adaptive_max_scale_frac * diam)
    return scene


# --- full schedule ----------------------------------------------------------

def run_schedule(priors: PriorBundle, images: np.ndarray,
                 cameras, schedule: Schedule = None,
                 init_config: InitConfig = None, scene: SceneModel = None,
                 total_frames: int = None, checkpoint_cb=None) -> tuple:
    """Initialize on the first window, then consume the sequence in batches.

    Returns (scene, history) where history is a list of
    (phase, iteration, LossReport) rows.
    """
    schedule = schedule or Schedule()
    total_frames = total_frames or priors.num_frames
    history = []
    rng = np.random.default_rng(schedule.seed)
    if scene is None:
        cfg = init_config or InitConfig(t_init=schedule.t_init,
                                        num_bases=4, seed=schedule.seed)
        scene = init_scene(priors, cameras, images=images, config=cfg)

    # joint optimization of the initial window
    w0 = list(range(scene.num_frames))
    pairs0 = _pairs_between(priors, w0, w0)
    ds = DiffScene(scene)
    wts = schedule.weights
    if pairs0 and scene.num_clusters:
        masks = _motion_masks(ds, [t for t in w0 if t != 0])
        names = list(masks) + ["coeff_logits"]

        def init_loss(it):
            ps = _sample(pairs0, schedule.pairs_per_iter, rng)
            lt = loss_track(ds, priors, ps)
            ld = loss_depth(ds, priors, ps)
            val = wts["track"] * lt + wts["depth"] * ld
            return val, LossReport(track=float(lt.detach()), depth=float(ld.detach()),
                                   total=float(val.detach()))

        _run(ds, names, init_loss, schedule.iters_init, schedule.lrs, masks,
             history, phase="init")
    ds.write_back()
    stage3(scene, priors, images, schedule, rng, history, phase="init.s3",
           adaptive=False)
    if checkpoint_cb:
        checkpoint_cb(scene, "init")

    batch = 0
    while scene.num_frames < total_frames:
        new = list(range(scene.num_frames,
                         min(scene.num_frames + schedule.t_new, total_frames)))
        extend_background(scene, priors, images, new, schedule, history)
        propagate_foreground(scene, priors, images, new, schedule,
                             batch_index=batch, history=history)
        if checkpoint_cb:
            checkpoint_cb(scene, f"batch{batch}")
        batch += 1
    return scene, history


def history_csv(history, path):
    """Write the loss history as CSV (phase, iter, components, total)."""
    import csv
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["phase", "iteration", "track", "depth", "rgb",
                    "arap", "shadow_seg", "total"])
        for phase, it, rep in history:
            w.writerow([phase, it, rep.track, rep.depth, rep.rgb,
                        rep.arap, rep.shadow_seg, rep.total])
