"""Training losses with analytic gradients w.r.t. the rendered images.

Every loss returns (value, gradient) where the gradient is taken w.r.t.
the first (rendered) argument; targets are constants.  Gradients are
verified against central finite differences in the test suite.

Depth supervision comes in four flavors selected by LossConfig:

  * normalized: both maps min-max normalized over the masked pixels
    before an L1 comparison.  The normalization constants are treated as
    detached, so the gradient is the plain normalized-L1 one; this keeps
    the two extremal pixels from dominating the update.
  * inverse: L1 between reciprocal depths (compresses far-range error).
  * l1 / logl1: plain and log-compressed absolute difference.

The smoothness term is an edge-masked total variation on the rendered
depth; edges come from a Canny detector run once on the target depth
map, so the mask is constant w.r.t. the model parameters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0


@dataclass
class LossConfig:
    lambda_smooth: float = 1e-4
    lambda_dssim: float = 0.2
    depth_loss_kind: str = "normalized"   # normalized | inverse | l1 | logl1
    canny_low: float = 0.1                # fraction of max gradient magnitude
    canny_high: float = 0.2
    canny_blur_sigma: float = 1.4
    # Depth supervision only where the render actually claims coverage;
    # at nearly transparent pixels the composited depth tends to zero and
    # would poison the min-max normalization of the normalized loss.
    depth_alpha_min: float = 0.5

    def __post_init__(self):
        if self.lambda_smooth < 0 or self.lambda_dssim < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.canny_low < self.canny_high:
            raise ValueError("canny_low must be below canny_high")
        if self.depth_loss_kind not in DEPTH_LOSSES:
            raise ValueError(f"unknown depth_loss_kind {self.depth_loss_kind!r}")


@dataclass
class LossReport:
    """Scalar loss terms for one step; total = color + depth + ls * smooth."""

    color_loss: float
    depth_loss: float
    smooth_loss: float
    total: float
    grads: object = None      # CloudGrads, attached by the training step


# ---------------------------------------------------------------------------
# SSIM core (shared with dynsplat.metrics)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _filt(img, kernel):
    # Kernel is symmetric, so convolution equals correlation; 'valid' mode
    # keeps only window positions fully inside the image.
    return signal.convolve2d(img, kernel, mode="valid")


def _filt_adjoint(grad, kernel):
    return signal.convolve2d(grad, kernel, mode="full")


def ssim_map(x, y, kernel=None):
    """Local SSIM of two single-channel images over valid window centers.

    Returns (ssim_map, cache) where the map has shape
    (H - win + 1, W - win + 1).  Constants follow the standard setup:
    11x11 Gaussian window sigma 1.5, K1 = 0.01, K2 = 0.03, unit range.
    """
    if kernel is None:
        kernel = gaussian_window()
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    ux = _filt(x, kernel)
    uy = _filt(y, kernel)
    uxx = _filt(x * x, kernel)
    uyy = _filt(y * y, kernel)
    uxy = _filt(x * y, kernel)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    a1 = 2.0 * ux * uy + c1
    a2 = 2.0 * vxy + c2
    b1 = ux * ux + uy * uy + c1
    b2 = vx + vy + c2
    s = (a1 * a2) / (b1 * b2)
    cache = (x, y, kernel, ux, uy, a1, a2, b1, b2)
    return s, cache


def ssim_map_backward(grad_s, cache):
    """Gradient of sum(grad_s * ssim_map) w.r.t. the first image."""
    x, y, kernel, ux, uy, a1, a2, b1, b2 = cache
    s = (a1 * a2) / (b1 * b2)
    d_ux = grad_s * (2.0 * uy * (a2 - a1) / (b1 * b2)
                     - 2.0 * ux * s / b1 + 2.0 * ux * s / b2)
    d_uxx = grad_s * (-s / b2)
    d_uxy = grad_s * (2.0 * a1 / (b1 * b2))
    grad = _filt_adjoint(d_ux, kernel)
    grad += 2.0 * x * _filt_adjoint(d_uxx, kernel)
    grad += y * _filt_adjoint(d_uxy, kernel)
    return grad


def _valid_crop(mask):
    pad = (SSIM_WINDOW - 1) // 2
    return mask[pad:mask.shape[0] - pad, pad:mask.shape[1] - pad]


# ---------------------------------------------------------------------------
# Photometric loss


def photometric_loss(rendered, target, mask, lambda_dssim=0.2):
    """(1 - l) * masked L1  +  l * (1 - masked mean SSIM).

    Window statistics use the full image; only the averaging of the
    per-pixel values is restricted to the mask.  Images smaller than the
    SSIM window skip the structural term.
    """
    mask = np.asarray(mask, dtype=bool)
    grad = np.zeros_like(rendered)
    count = int(mask.sum())
    if count == 0:
        warnings.warn("photometric_loss: empty mask, returning zero loss")
        return 0.0, grad

    diff = rendered - target
    l1 = np.sum(np.abs(diff[mask])) / (3.0 * count)
    grad[mask] = np.sign(diff[mask]) / (3.0 * count)
    grad *= (1.0 - lambda_dssim)
    loss = (1.0 - lambda_dssim) * l1

    h, w = mask.shape
    if lambda_dssim > 0.0 and min(h, w) >= SSIM_WINDOW:
        kernel = gaussian_window()
        mask_v = _valid_crop(mask)
        n_valid = int(mask_v.sum())
        if n_valid:
            ssim_total = 0.0
            for ch in range(3):
                smap, cache = ssim_map(rendered[:, :, ch], target[:, :, ch],
                                       kernel)
                ssim_total += np.sum(smap[mask_v]) / n_valid
                gs = np.where(mask_v, -lambda_dssim / (3.0 * n_valid), 0.0)
                grad[:, :, ch] += ssim_map_backward(gs, cache)
            loss += lambda_dssim * (1.0 - ssim_total / 3.0)
    return float(loss), grad


# ---------------------------------------------------------------------------
# Depth losses


def _empty_depth(mask, reason):
    warnings.warn(f"depth loss: {reason}, returning zero loss")
    return 0.0, np.zeros(mask.shape)


def normalized_depth_loss(rendered_depth, target_depth, mask):
    """Masked L1 between independently min-max normalized depth maps.

    Each map is shifted/scaled by its own masked min and max (detached in
    the gradient), which makes the loss invariant to positive affine
    transforms of either input.
    """
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count < 2:
        return _empty_depth(mask, "fewer than 2 masked pixels")
    r = rendered_depth[mask]
    g = target_depth[mask]
    r_lo, r_hi = r.min(), r.max()
    g_lo, g_hi = g.min(), g.max()
    if r_hi == r_lo or g_hi == g_lo:
        return _empty_depth(mask, "zero depth range")
    r_scale = 1.0 / (r_hi - r_lo + 1e-8)
    g_scale = 1.0 / (g_hi - g_lo + 1e-8)
    diff = (r - r_lo) * r_scale - (g - g_lo) * g_scale
    loss = np.sum(np.abs(diff)) / count
    grad = np.zeros(mask.shape)
    grad[mask] = np.sign(diff) * r_scale / count
    return float(loss), grad


def inverse_depth_loss(rendered_depth, target_depth, mask):
    """Masked mean |1/rendered - 1/target| with a 1e-6 guard in both."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return _empty_depth(mask, "empty mask")
    r = rendered_depth[mask] + 1e-6
    g = target_depth[mask] + 1e-6
    diff = 1.0 / r - 1.0 / g
    loss = np.sum(np.abs(diff)) / count
    grad = np.zeros(mask.shape)
    grad[mask] = np.sign(diff) * (-1.0 / (r * r)) / count
    return float(loss), grad


def l1_depth_loss(rendered_depth, target_depth, mask):
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return _empty_depth(mask, "empty mask")
    diff = rendered_depth[mask] - target_depth[mask]
    loss = np.sum(np.abs(diff)) / count
    grad = np.zeros(mask.shape)
    grad[mask] = np.sign(diff) / count
    return float(loss), grad


def logl1_depth_loss(rendered_depth, target_depth, mask):
    """Masked mean log(1 + |rendered - target|); always <= the L1 loss."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return _empty_depth(mask, "empty mask")
    diff = rendered_depth[mask] - target_depth[mask]
    ad = np.abs(diff)
    loss = np.sum(np.log1p(ad)) / count
    grad = np.zeros(mask.shape)
    grad[mask] = np.sign(diff) / (1.0 + ad) / count
    return float(loss), grad


DEPTH_LOSSES = {
    "normalized": normalized_depth_loss,
    "inverse": inverse_depth_loss,
    "l1": l1_depth_loss,
    "logl1": logl1_depth_loss,
}


# ---------------------------------------------------------------------------
# Canny edge detection on the target depth map

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def canny_edges(depth_map, low=0.1, high=0.2, blur_sigma=1.4):
    """Classic Canny pipeline; returns True at NON-edge pixels.

    blur -> Sobel -> quantized non-maximum suppression -> double
    threshold -> hysteresis over 8-connected components.  `low` and
    `high` are fractions of the maximum gradient magnitude, so the result
    is invariant to rescaling the depth map.
    """
    d = np.asarray(depth_map, dtype=np.float64)
    blurred = ndimage.gaussian_filter(d, sigma=blur_sigma, mode="reflect")
    gx = ndimage.convolve(blurred, _SOBEL_X, mode="reflect")
    gy = ndimage.convolve(blurred, _SOBEL_Y, mode="reflect")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    # Rounding in the blur leaves ~1e-15 gradients on constant maps; a
    # relative floor keeps those from turning into "edges".
    if peak <= 1e-12 * max(1.0, float(np.abs(blurred).max())):
        return np.ones(d.shape, dtype=bool)

    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    padded = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    n = {}
    for dy, dx in ((0, 1), (0, -1), (-1, 1), (1, -1),
                   (-1, 0), (1, 0), (-1, -1), (1, 1)):
        n[(dy, dx)] = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    bin0 = (angle < 22.5) | (angle >= 157.5)
    bin45 = (angle >= 22.5) & (angle < 67.5)
    bin90 = (angle >= 67.5) & (angle < 112.5)
    bin135 = (angle >= 112.5) & (angle < 157.5)
    keep = np.zeros_like(bin0)
    keep |= bin0 & (mag >= n[(0, 1)]) & (mag >= n[(0, -1)])
    keep |= bin45 & (mag >= n[(-1, 1)]) & (mag >= n[(1, -1)])
    keep |= bin90 & (mag >= n[(-1, 0)]) & (mag >= n[(1, 0)])
    keep |= bin135 & (mag >= n[(-1, -1)]) & (mag >= n[(1, 1)])
    nms = np.where(keep, mag, 0.0)

    strong = nms >= high * peak
    candidate = nms >= low * peak
    labels, num = ndimage.label(candidate, structure=np.ones((3, 3)))
    if num:
        strong_labels = np.unique(labels[strong])
        strong_labels = strong_labels[strong_labels > 0]
        edges = np.isin(labels, strong_labels)
    else:
        edges = np.zeros(d.shape, dtype=bool)
    return ~edges


# ---------------------------------------------------------------------------
# Depth smoothness


def smoothness_loss(rendered_depth, nonedge_mask, coverage_mask):
    """Edge-masked total variation on the rendered depth.

    Sums |D(i,j) - D(i+1,j)| + |D(i,j) - D(i,j+1)| over non-edge pixels
    whose neighbor is covered too, normalized by the number of non-edge
    covered pixels (so constant maps give exactly zero).
    """
    d = rendered_depth
    ne = np.asarray(nonedge_mask, dtype=bool)
    cov = np.asarray(coverage_mask, dtype=bool)
    contributing = ne & cov
    n = int(contributing.sum())
    grad = np.zeros_like(d)
    if n == 0:
        return 0.0, grad

    total = 0.0
    # vertical neighbor (i, j) vs (i+1, j)
    ok = contributing[:-1, :] & cov[1:, :]
    diff = d[:-1, :] - d[1:, :]
    s = np.where(ok, np.sign(diff), 0.0)
    total += np.sum(np.abs(diff[ok]))
    grad[:-1, :] += s
    grad[1:, :] -= s
    # horizontal neighbor (i, j) vs (i, j+1)
    ok = contributing[:, :-1] & cov[:, 1:]
    diff = d[:, :-1] - d[:, 1:]
    s = np.where(ok, np.sign(diff), 0.0)
    total += np.sum(np.abs(diff[ok]))
    grad[:, :-1] += s
    grad[:, 1:] -= s

    return float(total / n), grad / n


# ---------------------------------------------------------------------------
# Total loss


def total_loss(frame, render_output, cfg, nonedge=None):
    """Combined loss of one rendered frame against its ground truth.

    Returns (LossReport, grad_color, grad_depth) with the image-space
    gradients ready for rasterize_backward.  `nonedge` may carry a
    precomputed Canny mask for the frame's target depth map.
    """
    tissue = frame.tissue_mask.astype(bool)
    valid = frame.depth > 0.0
    covered = render_output.covered
    depth_mask = tissue & valid & (render_output.alpha >= cfg.depth_alpha_min)

    color_loss, grad_color = photometric_loss(
        render_output.color, frame.image, tissue, cfg.lambda_dssim)
    depth_fn = DEPTH_LOSSES[cfg.depth_loss_kind]
    depth_loss, grad_depth = depth_fn(render_output.depth, frame.depth,
                                      depth_mask)
    if nonedge is None:
        nonedge = canny_edges(frame.depth, cfg.canny_low, cfg.canny_high,
                              cfg.canny_blur_sigma)
    smooth_loss, grad_smooth = smoothness_loss(render_output.depth, nonedge,
                                               covered)
    total = color_loss + depth_loss + cfg.lambda_smooth * smooth_loss
    report = LossReport(color_loss, depth_loss, smooth_loss, float(total))
    return report, grad_color, grad_depth + cfg.lambda_smooth * grad_smooth
