"""Image and depth quality metrics plus the rendering-speed benchmark.

Depth metrics are evaluated over tissue AND valid AND covered pixels;
tool pixels have no ground truth.  PSNR is capped at 100 dB so identical
images report a finite number.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict

import numpy as np

from .core import InvalidInputError
from .losses import gaussian_window, ssim_map, _valid_crop, SSIM_WINDOW

PSNR_CAP = 100.0


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    fps: float = float("nan")

    def as_dict(self):
        return asdict(self)

    def format_lines(self):
        return [f"{k}={v:.6f}" for k, v in self.as_dict().items()]


def psnr(a, b, mask=None):
    """10 log10(1 / MSE) over masked pixels, unit dynamic range."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if mask is None:
        mask = np.ones(a.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not np.any(mask):
        raise InvalidInputError("psnr: empty mask")
    mse = float(np.mean((a[mask] - b[mask]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def ssim(a, b, mask=None):
    """Mean local SSIM over masked window centers.

    11x11 Gaussian window sigma 1.5, K1 = 0.01, K2 = 0.03, unit range;
    window centers closer than 5 pixels to the border are excluded, which
    matches reference implementations that crop the padded border.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    h, w = a.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise InvalidInputError(f"ssim: image smaller than {SSIM_WINDOW} window")
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    mask_v = _valid_crop(np.asarray(mask, dtype=bool))
    if not np.any(mask_v):
        raise InvalidInputError("ssim: no masked window centers")
    kernel = gaussian_window()
    if a.ndim == 2:
        a = a[:, :, np.newaxis]
        b = b[:, :, np.newaxis]
    vals = []
    for ch in range(a.shape[2]):
        smap, _ = ssim_map(a[:, :, ch], b[:, :, ch], kernel)
        vals.append(float(np.mean(smap[mask_v])))
    return float(np.mean(vals))


def depth_metrics(pred, gt, mask):
    """(abs_rel, sq_rel, rmse, rmse_log) over masked pixels.

    gt must be positive on the mask; pixels with non-positive predictions
    are excluded from rmse_log only (their count is returned as well).
    """
    mask = np.asarray(mask, dtype=bool)
    if not np.any(mask):
        raise InvalidInputError("depth_metrics: empty mask")
    p = np.asarray(pred, dtype=np.float64)[mask]
    g = np.asarray(gt, dtype=np.float64)[mask]
    if np.any(g <= 0):
        raise InvalidInputError("depth_metrics: non-positive ground truth depth")
    diff = p - g
    abs_rel = float(np.mean(np.abs(diff) / g))
    sq_rel = float(np.mean(diff * diff / g))
    rmse = float(np.sqrt(np.mean(diff * diff)))
    pos = p > 0
    excluded = int(np.sum(~pos))
    if np.any(pos):
        log_diff = np.log(p[pos]) - np.log(g[pos])
        rmse_log = float(np.sqrt(np.mean(log_diff * log_diff)))
    else:
        rmse_log = float("inf")
    return abs_rel, sq_rel, rmse, rmse_log, excluded


def fps_benchmark(cloud, seq, repetitions=5, frame_indices=None, threads=1):
    """Median frames/second of deform + project + rasterize on test frames.

    Returns a dict with the median, interquartile range, per-repetition
    samples, and the thread count used.
    """
    from .deform import deform_gaussians
    from .render import cull_and_project, rasterize
    from .core import sigmoid

    if frame_indices is None:
        frame_indices = seq.test_indices or list(range(len(seq)))
    cam = seq.camera
    opacities = sigmoid(cloud.opacity_logits)
    samples = []
    for _ in range(max(1, int(repetitions))):
        start = time.perf_counter()
        for idx in frame_indices:
            t = seq.frames[idx].time
            attrs = deform_gaussians(cloud, t)
            prims, _ = cull_and_project(attrs.positions, attrs.rotations,
                                        attrs.scales, opacities, cloud.colors,
                                        cam)
            rasterize(prims, cam, threads=threads)
        elapsed = time.perf_counter() - start
        samples.append(len(frame_indices) / elapsed if elapsed > 0 else float("inf"))
    arr = np.asarray(samples)
    q1, med, q3 = np.percentile(arr, [25, 50, 75])
    return {"fps_median": float(med), "fps_iqr": float(q3 - q1),
            "samples": samples, "threads": threads,
            "frames": len(frame_indices)}
