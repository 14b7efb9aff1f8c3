"""Evaluation metrics: image quality, 3D trajectory error, 2D tracking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import NoVisiblePoints, ShapeMismatch

TAP_THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)
TAP_RESOLUTION = 256.0


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"shape {np.shape(a)} vs {np.shape(b)}")


def psnr(img: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for near-exact inputs."""
    _check_shapes(img, ref)
    mse = float(np.mean((np.asarray(img, float) - np.asarray(ref, float)) ** 2))
    if mse < 1e-10:
        return 100.0
    return float(min(100.0, 10.0 * np.log10(peak ** 2 / mse)))


def _gauss_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def ssim(img: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5)."""
    _check_shapes(img, ref)
    img = np.asarray(img, float)
    ref = np.asarray(ref, float)
    if img.ndim == 3:
        return float(np.mean([ssim(img[..., c], ref[..., c], peak)
                              for c in range(img.shape[2])]))
    k = _gauss_kernel()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def filt(x):
        return ndimage.convolve(x, k, mode="reflect")

    mu1, mu2 = filt(img), filt(ref)
    mu1s, mu2s, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s1 = filt(img * img) - mu1s
    s2 = filt(ref * ref) - mu2s
    s12 = filt(img * ref) - mu12
    m = ((2 * mu12 + c1) * (2 * s12 + c2)) / ((mu1s + mu2s + c1) * (s1 + s2 + c2))
    return float(m.mean())


def epe3d(pred: np.ndarray, gt: np.ndarray, visibility: np.ndarray = None,
          deltas=(0.05, 0.10)) -> tuple:
    """Mean 3D endpoint error over visible entries, plus inlier percentages
    at strict thresholds (default 0.05 and 0.10 scene units).

    Returns (epe, delta05_pct, delta10_pct).
    """
    pred = np.asarray(pred, float)
    gt = np.asarray(gt, float)
    _check_shapes(pred, gt)
    err = np.linalg.norm(pred - gt, axis=-1)
    if visibility is not None:
        vis = np.asarray(visibility, bool)
        if vis.shape != err.shape:
            raise ShapeMismatch(f"visibility shape {vis.shape} vs {err.shape}")
        err = err[vis]
    if err.size == 0:
        raise NoVisiblePoints("no visible entries to evaluate")
    return (float(err.mean()),) + tuple(
        float(100.0 * (err < d).mean()) for d in deltas)


def tap_metrics(pred_uv: np.ndarray, gt_uv: np.ndarray,
                pred_vis: np.ndarray, gt_vis: np.ndarray,
                image_size) -> tuple:
    """TAP-style metrics (percentages) at the 256x256 normalization.

    Returns (aj, delta_avg, oa): average Jaccard and position accuracy over
    pixel thresholds {1,2,4,8,16}, and binary occlusion accuracy.
    """
    pred_uv = np.asarray(pred_uv, float)
    gt_uv = np.asarray(gt_uv, float)
    _check_shapes(pred_uv, gt_uv)
    pred_vis = np.asarray(pred_vis, bool)
    gt_vis = np.asarray(gt_vis, bool)
    _check_shapes(pred_vis, gt_vis)
    W, H = image_size
    scale = np.array([TAP_RESOLUTION / W, TAP_RESOLUTION / H])
    err = np.linalg.norm((pred_uv - gt_uv) * scale, axis=-1)
    deltas, jacs = [], []
    for th in TAP_THRESHOLDS:
        within = err < th
        deltas.append(float(within[gt_vis].mean()) if gt_vis.any() else 0.0)
        tp = float((within & pred_vis & gt_vis).sum())
        fp = float((pred_vis & (~gt_vis | ~within)).sum())
        fn = float((gt_vis & (~pred_vis | ~within)).sum())
        jacs.append(tp / (tp + fp + fn) if (tp + fp + fn) > 0 else 0.0)
    oa = float((pred_vis == gt_vis).mean())
    return (float(100.0 * np.mean(jacs)), float(100.0 * np.mean(deltas)),
            float(100.0 * oa))


@dataclass
class EvalReport:
    psnr: float = 0.0
    ssim: float = 0.0
    epe3d: float = 0.0
    delta3d_05: float = 0.0
    delta3d_10: float = 0.0
    aj: float = 0.0
    delta_avg: float = 0.0
    oa: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(s: str) -> "EvalReport":
        return EvalReport(**json.loads(s))
