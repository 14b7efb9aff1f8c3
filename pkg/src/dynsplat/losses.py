"""Differentiable loss evaluation.

A `DiffScene` mirrors a `SceneModel` as float64 torch tensors so every loss
gradient (positions, rotations, scales, opacities, colors, blend logits,
motion bases, camera increments) is exact to machine precision. Camera
refinement is parameterized as an axis-angle + translation increment composed
onto the initial extrinsic, so a zero increment reproduces the input pose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .errors import EmptyMask, NoValidPairs
from .model import DYNAMIC, SHADOW, PriorBundle, SceneModel
from .rasterize import (ALPHA_CLAMP, COV2D_FLOOR, FOOTPRINT_CHI2, NEAR_PLANE)

_EPS = 1e-18


@dataclass
class LossReport:
    track: float = 0.0
    depth: float = 0.0
    rgb: float = 0.0
    arap: float = 0.0
    shadow_seg: float = 0.0
    total: float = 0.0


def _quat_to_mat_t(q: torch.Tensor) -> torch.Tensor:
    q = q / torch.sqrt((q * q).sum(-1, keepdim=True) + _EPS)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def _rot6d_to_mat_t(r6: torch.Tensor) -> torch.Tensor:
    a, b = r6[..., :3], r6[..., 3:]
    c1 = a / torch.sqrt((a * a).sum(-1, keepdim=True) + _EPS)
    b = b - (c1 * b).sum(-1, keepdim=True) * c1
    c2 = b / torch.sqrt((b * b).sum(-1, keepdim=True) + _EPS)
    c3 = torch.cross(c1, c2, dim=-1)
    return torch.stack([c1, c2, c3], dim=-1)


def _axis_angle_quat(v: torch.Tensor) -> torch.Tensor:
    """Rotation vector -> quaternion, differentiable at zero."""
    theta = torch.sqrt((v * v).sum(-1, keepdim=True) + _EPS)
    w = torch.cos(theta / 2)
    xyz = 0.5 * torch.sinc(theta / (2 * np.pi)) * v
    return torch.cat([w, xyz], dim=-1)


class DiffScene:
    """Torch twin of a SceneModel, with per-group parameter tensors."""

    def __init__(self, scene: SceneModel):
        self.scene = scene
        f64 = dict(dtype=torch.float64)

        def P(a):
            return torch.tensor(np.asarray(a, dtype=np.float64), **f64)

        self.mu0 = P(scene.mu0)
        self.rot0 = P(scene.rot0)
        self.log_scale = P(scene.log_scale)
        self.opacity_logit = P(scene.opacity_logit)
        self.color = P(scene.color)
        self.coeff_logits = P(scene.coeff_logits)
        K, T, B = scene.num_clusters, scene.num_frames, scene.num_bases
        self.glob_rot = torch.zeros((K, T, 4), **f64)
        self.glob_trans = torch.zeros((K, T, 3), **f64)
        self.bases_r6 = torch.zeros((K, T, B, 6), **f64)
        self.bases_t = torch.zeros((K, T, B, 3), **f64)
        for k, cm in enumerate(scene.clusters):
            self.glob_rot[k] = P(cm.global_rot)
            self.glob_trans[k] = P(cm.global_trans)
            self.bases_r6[k] = P(cm.bases_r6)
            self.bases_t[k] = P(cm.bases_t)
        self.cam_delta = torch.zeros((scene.cameras.num_frames, 6), **f64)
        self.K0 = P(scene.cameras.intrinsics)
        self.E0 = P(scene.cameras.extrinsics)
        self.kind = scene.kind.copy()
        self.cluster_id = scene.cluster_id.copy()
        self.image_size = scene.image_size

    def params(self) -> dict:
        return {
            "mu0": self.mu0, "rot0": self.rot0, "log_scale": self.log_scale,
            "opacity_logit": self.opacity_logit, "color": self.color,
            "coeff_logits": self.coeff_logits,
            "glob_rot": self.glob_rot, "glob_trans": self.glob_trans,
            "bases_r6": self.bases_r6, "bases_t": self.bases_t,
            "cam_delta": self.cam_delta,
        }

    def requires_grad_(self, names=None):
        for n, p in self.params().items():
            p.requires_grad_(names is None or n in names)
        return self

    def extrinsic(self, t: int) -> torch.Tensor:
        R = _quat_to_mat_t(_axis_angle_quat(self.cam_delta[t, :3]))
        E = torch.eye(4, dtype=torch.float64)
        top = torch.cat([R, self.cam_delta[t, 3:].reshape(3, 1)], dim=1)
        D = torch.cat([top, E[3:].clone()], dim=0)
        return D @ self.E0[t]

    def pose(self, t: int, subset: np.ndarray = None):
        """Posed means and rotation matrices for `subset` (default: all)."""
        if subset is None:
            subset = np.arange(len(self.kind))
        mu = self.mu0[subset]
        R0 = _quat_to_mat_t(self.rot0[subset])
        mu_t = mu.clone()
        R_t = R0.clone()
        cid = self.cluster_id[subset]
        kind = self.kind[subset]
        for k in np.unique(cid[kind != 0]):
            sel = np.flatnonzero(cid == k)
            w = torch.softmax(self.coeff_logits[subset[sel]], dim=1)
            r6 = w @ self.bases_r6[k, t]
            tl = w @ self.bases_t[k, t]
            Rl = _rot6d_to_mat_t(r6)
            Rg = _quat_to_mat_t(self.glob_rot[k, t])
            tg = self.glob_trans[k, t]
            local = torch.einsum("nij,nj->ni", Rl, mu[sel]) + tl
            mu_t = mu_t.clone()
            R_t = R_t.clone()
            mu_t[sel] = local @ Rg.T + tg
            R_t[sel] = torch.einsum("ij,njk,nkl->nil", Rg, Rl, R0[sel])
        return mu_t, R_t

    def composite(self, t: int, pixels: np.ndarray, values: torch.Tensor,
                  subset: np.ndarray = None, background: torch.Tensor = None,
                  pose_frame: int = None):
        """Alpha-composite per-gaussian `values` at pixel centers of frame t.

        pose_frame lets values be implicit: gaussians are placed by frame t but
        no values need passing. Returns (X, alpha_acc) with X un-normalized
        unless a background is given (then residual transmittance blends it).
        """
        if subset is None:
            subset = np.arange(len(self.kind))
        mu_t, R_t = self.pose(t, subset)
        E = self.extrinsic(t)
        cam = mu_t @ E[:3, :3].T + E[:3, 3]
        z = cam[:, 2]
        keep = np.flatnonzero(z.detach().numpy() > NEAR_PLANE)
        mu_t, R_t, cam, z = mu_t[keep], R_t[keep], cam[keep], z[keep]
        vals = values[keep]
        Kmat = self.K0[t]
        fx, fy = Kmat[0, 0], Kmat[1, 1]
        cx, cy = Kmat[0, 2], Kmat[1, 2]
        u = fx * cam[:, 0] / z + cx
        v = fy * cam[:, 1] / z + cy
        mu2d = torch.stack([u, v], dim=1)

        S = torch.exp(self.log_scale[subset][keep])
        cov3 = torch.einsum("nij,nj,nkj->nik", R_t, S * S, R_t)
        W = E[:3, :3]
        covc = torch.einsum("ij,njk,lk->nil", W, cov3, W)
        n = len(keep)
        J = torch.zeros((n, 2, 3), dtype=torch.float64)
        J[:, 0, 0] = fx / z
        J[:, 0, 2] = -fx * cam[:, 0] / (z * z)
        J[:, 1, 1] = fy / z
        J[:, 1, 2] = -fy * cam[:, 1] / (z * z)
        cov2 = torch.einsum("nij,njk,nlk->nil", J, covc, J)
        cov2 = cov2 + COV2D_FLOOR * torch.eye(2, dtype=torch.float64)

        order = np.argsort(z.detach().numpy(), kind="stable")
        mu2d, cov2, vals = mu2d[order], cov2[order], vals[order]
        op = torch.sigmoid(self.opacity_logit[subset][keep][order])

        px = torch.tensor(np.asarray(pixels, dtype=np.float64))
        d = px[:, None, :] - mu2d[None, :, :]             # (M, n, 2)
        a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
        det = a * c - b * b
        q = (c * d[..., 0] ** 2 - 2 * b * d[..., 0] * d[..., 1]
             + a * d[..., 1] ** 2) / det
        alpha = torch.clamp(op * torch.exp(-0.5 * q), max=ALPHA_CLAMP)
        inside = (q.detach() <= FOOTPRINT_CHI2).to(torch.float64)
        alpha = alpha * inside
        trans = torch.cumprod(1 - alpha, dim=1)
        trans = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
        w = alpha * trans                                  # (M, n)
        X = w @ vals
        acc = w.sum(dim=1)
        if background is not None:
            X = X + (1 - acc)[:, None] * background
        return X, acc, w

    def write_back(self):
        """Copy parameter values back into the wrapped SceneModel."""
        s = self.scene
        s.mu0 = self.mu0.detach().numpy().copy()
        s.rot0 = self.rot0.detach().numpy().copy()
        s.log_scale = self.log_scale.detach().numpy().copy()
        s.opacity_logit = self.opacity_logit.detach().numpy().copy()
        s.color = self.color.detach().numpy().copy()
        s.coeff_logits = self.coeff_logits.detach().numpy().copy()
        for k, cm in enumerate(s.clusters):
            cm.global_rot = self.glob_rot[k].detach().numpy().copy()
            cm.global_trans = self.glob_trans[k].detach().numpy().copy()
            cm.bases_r6 = self.bases_r6[k].detach().numpy().copy()
            cm.bases_t = self.bases_t[k].detach().numpy().copy()
        delta = self.cam_delta.detach().numpy()
        for t in range(len(delta)):
            if np.any(delta[t] != 0):
                s.cameras.extrinsics[t] = self.extrinsic(t).detach().numpy()
        return s


def _smooth_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.sqrt((x * x).sum(dim=dim) + _EPS)


def _pair_points(dscene: DiffScene, priors: PriorBundle, t: int, tp: int):
    ts = priors.tracks.get((t, tp))
    if ts is None or len(ts.point_id) == 0:
        return None
    W, H = dscene.image_size
    uv = ts.target_uv
    valid = (ts.visible & (uv[:, 0] >= 0) & (uv[:, 0] <= W - 1)
             & (uv[:, 1] >= 0) & (uv[:, 1] <= H - 1))
    if not valid.any():
        return None
    return ts.query_px[valid], uv[valid]


def _predicted_target(dscene: DiffScene, t: int, tp: int, q_px: np.ndarray):
    """X̄_{t→t'} at the query pixels: dynamic-only composite, normalized."""
    dyn = np.flatnonzero(dscene.kind == DYNAMIC)
    mu_tp, _ = dscene.pose(tp, dyn)
    X, acc, _ = dscene.composite(t, q_px, mu_tp, subset=dyn)
    ok = acc.detach().numpy() > 1e-8
    return X[ok] / acc[ok][:, None], ok


def loss_track(dscene: DiffScene, priors: PriorBundle, pairs) -> torch.Tensor:
    """Mean pixel error between predicted and prior tracks (per pair)."""
    terms = []
    for (t, tp) in pairs:
        got = _pair_points(dscene, priors, t, tp)
        if got is None:
            continue
        q_px, target = got
        Xbar, ok = _predicted_target(dscene, t, tp, q_px)
        if not ok.any():
            continue
        E = dscene.extrinsic(tp)
        cam = Xbar @ E[:3, :3].T + E[:3, 3]
        Kmat = dscene.K0[tp]
        u = Kmat[0, 0] * cam[:, 0] / cam[:, 2] + Kmat[0, 2]
        v = Kmat[1, 1] * cam[:, 1] / cam[:, 2] + Kmat[1, 2]
        pred = torch.stack([u, v], dim=1)
        tgt = torch.tensor(np.asarray(target[ok], dtype=np.float64))
        terms.append(_smooth_norm(pred - tgt).mean())
    if not terms:
        raise NoValidPairs("no track pair has visible in-image targets")
    return torch.stack(terms).mean()


def loss_depth(dscene: DiffScene, priors: PriorBundle, pairs) -> torch.Tensor:
    """Mean |predicted depth - prior depth at the prior track target|."""
    from .initialize import bilinear_sample
    terms = []
    for (t, tp) in pairs:
        got = _pair_points(dscene, priors, t, tp)
        if got is None:
            continue
        q_px, target = got
        Xbar, ok = _predicted_target(dscene, t, tp, q_px)
        if not ok.any():
            continue
        E = dscene.extrinsic(tp)
        cam = Xbar @ E[:3, :3].T + E[:3, 3]
        prior_d = bilinear_sample(priors.depth[tp], target[ok])
        r = cam[:, 2] - torch.tensor(prior_d)
        terms.append(torch.sqrt(r * r + _EPS).mean())
    if not terms:
        raise NoValidPairs("no track pair has visible in-image targets")
    return torch.stack(terms).mean()


def loss_rgb(dscene: DiffScene, images: np.ndarray, frames,
             pixel_mask: np.ndarray = None, max_pixels: int = None,
             rng: np.random.Generator = None,
             subset: np.ndarray = None) -> torch.Tensor:
    """MAE between composited color and the input image over masked pixels."""
    terms = []
    bg = torch.zeros(3, dtype=torch.float64)
    W, H = dscene.image_size
    for t in frames:
        if pixel_mask is None:
            ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
            ys, xs = ys.ravel(), xs.ravel()
        else:
            ys, xs = np.nonzero(pixel_mask[t] if pixel_mask.ndim == 3 else pixel_mask)
        if len(ys) == 0:
            raise EmptyMask(f"no pixels selected in frame {t}")
        if max_pixels is not None and len(ys) > max_pixels:
            idx = (rng or np.random.default_rng(0)).choice(len(ys), max_pixels,
                                                           replace=False)
            ys, xs = ys[idx], xs[idx]
        px = np.stack([xs, ys], axis=1).astype(float)
        vals = dscene.color if subset is None else dscene.color[subset]
        C, _, _ = dscene.composite(t, px, vals, subset=subset, background=bg)
        tgt = torch.tensor(images[t][ys, xs].astype(np.float64))
        terms.append((C - tgt).abs().mean())
    return torch.stack(terms).mean()


def build_knn_edges(scene: SceneModel, k: int = 8) -> np.ndarray:
    """Directed k-NN edges over canonical positions of dynamic gaussians."""
    dyn = np.flatnonzero(scene.kind == DYNAMIC)
    if len(dyn) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    kk = min(k, len(dyn) - 1)
    tree = cKDTree(scene.mu0[dyn])
    _, nbr = tree.query(scene.mu0[dyn], k=kk + 1)
    src = np.repeat(dyn, kk)
    dst = dyn[np.asarray(nbr)[:, 1:].ravel()]
    return np.stack([src, dst], axis=1)


def loss_arap(dscene: DiffScene, t: int, tp: int, edges: np.ndarray) -> torch.Tensor:
    """Mean squared change of edge lengths between posed frames t and t'."""
    if len(edges) == 0:
        return torch.zeros((), dtype=torch.float64)
    idx = np.unique(edges)
    remap = {g: i for i, g in enumerate(idx)}
    e = np.array([[remap[i], remap[j]] for i, j in edges])
    mu_t, _ = dscene.pose(t, idx)
    mu_p, _ = dscene.pose(tp, idx)
    d_t = _smooth_norm(mu_t[e[:, 0]] - mu_t[e[:, 1]])
    d_p = _smooth_norm(mu_p[e[:, 0]] - mu_p[e[:, 1]])
    return ((d_t - d_p) ** 2).mean()


def loss_shadow_seg(dscene: DiffScene, priors: PriorBundle, frames) -> torch.Tensor:
    """Mean compositing weight of shadow gaussians at foreground-mask pixels."""
    shadow_val = torch.tensor((dscene.kind == SHADOW).astype(np.float64))[:, None]
    terms = []
    for t in frames:
        ys, xs = np.nonzero(priors.fg_mask[t])
        if len(ys) == 0:
            terms.append(torch.zeros((), dtype=torch.float64))
            continue
        px = np.stack([xs, ys], axis=1).astype(float)
        X, _, _ = dscene.composite(t, px, shadow_val)
        terms.append(X[:, 0].mean())
    return torch.stack(terms).mean()


def total_loss(dscene: DiffScene, priors: PriorBundle, images: np.ndarray,
               pairs, frames, edges: np.ndarray, weights: dict,
               max_rgb_pixels: int = None,
               rng: np.random.Generator = None) -> tuple:
    """Weighted sum of all components; returns (tensor, LossReport)."""
    zero = torch.zeros((), dtype=torch.float64)
    try:
        lt = loss_track(dscene, priors, pairs)
        ld = loss_depth(dscene, priors, pairs)
    except NoValidPairs:
        lt, ld = zero, zero
    lr = loss_rgb(dscene, images, frames, max_pixels=max_rgb_pixels, rng=rng) \
        if len(frames) else zero
    la = torch.stack([loss_arap(dscene, t, tp, edges) for t, tp in pairs]).mean() \
        if pairs is not None and len(pairs) and len(edges) else zero
    ls = loss_shadow_seg(dscene, priors, frames) \
        if (dscene.kind == SHADOW).any() and len(frames) else zero
    tot = (weights.get("track", 1.0) * lt + weights.get("depth", 0.5) * ld
           + weights.get("rgb", 1.0) * lr + weights.get("arap", 0.1) * la
           + weights.get("shadow", 0.1) * ls)
    rep = LossReport(track=float(lt.detach()), depth=float(ld.detach()), rgb=float(lr.detach()),
                     arap=float(la.detach()), shadow_seg=float(ls.detach()), total=float(tot.detach()))
    return tot, rep
