"""Dense Gaussian initialization from depth priors.

Pixels from frame 0 plus pixels of later frames selected by a binary
motion mask (significant depth change versus frame 0, or tissue that was
occluded in frame 0) are unprojected through the camera and fused into
one initial cloud.  Every surviving point becomes a Gaussian with the
pixel's color, identity rotation, opacity 0.1, an isotropic scale from
its 3 nearest neighbors, and the identity deformation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import EmptyCloudError, GaussianCloud, inverse_sigmoid
from .deform import DeformBank, DEFAULT_BASIS_COUNT

INITIAL_OPACITY = 0.1
# Relative default for the depth-change threshold tau: 3% of frame 0's
# valid depth range, so the default survives unit changes.
TAU_RANGE_FRACTION = 0.03
DEFAULT_STRIDE = 4


@dataclass
class InitConfig:
    tau: float | None = None      # scene units; None = relative default
    stride: int = DEFAULT_STRIDE

    def __post_init__(self):
        if self.tau is not None and self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass
class MotionMask:
    mask: np.ndarray      # (H, W) bool
    frame_index: int


def resolve_tau(frame0, cfg):
    if cfg.tau is not None:
        return float(cfg.tau)
    valid = frame0.valid_depth & frame0.tissue_mask
    if not np.any(valid):
        return 1.0
    d = frame0.depth[valid]
    extent = float(d.max() - d.min())
    return TAU_RANGE_FRACTION * extent if extent > 0 else 1.0


def unproject_frame(frame, cam, pixel_mask):
    """Lift masked pixels to world points with their image colors.

    Pixel (u, v) with depth d maps to d * K^-1 (u+0.5, v+0.5, 1)^T in
    camera space, then through the inverse extrinsics.  Returns
    (positions (N, 3), colors (N, 3)); rows follow row-major pixel order.
    """
    mask = np.asarray(pixel_mask, dtype=bool)
    vs, us = np.nonzero(mask)
    if vs.size == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    d = frame.depth[vs, us]
    x = (us + 0.5 - cam.cx) / cam.fx * d
    y = (vs + 0.5 - cam.cy) / cam.fy * d
    p_cam = np.stack([x, y, d], axis=1)
    positions = cam.camera_to_world(p_cam)
    colors = frame.image[vs, us]
    return positions, colors


def compute_motion_mask(frame0, frame_i, tau):
    """Pixels of frame i worth adding to the initial cloud.

    Marks (depth changed by more than tau where both depths are valid)
    OR (tissue visible now but masked out in frame 0), intersected with
    frame i's own tissue mask and depth validity.
    """
    if frame0.depth.shape != frame_i.depth.shape:
        raise ValueError("frames have different dimensions")
    both_valid = frame0.valid_depth & frame_i.valid_depth
    changed = both_valid & (np.abs(frame0.depth - frame_i.depth) > tau)
    disoccluded = (~frame0.tissue_mask.astype(bool)) & frame_i.tissue_mask.astype(bool)
    mask = (changed | disoccluded) & frame_i.tissue_mask.astype(bool) \
        & frame_i.valid_depth
    return mask


def stride_subsample(mask, stride):
    """Keep only mask pixels on the stride x stride grid anchored at (0, 0)."""
    out = np.zeros_like(mask, dtype=bool)
    out[::stride, ::stride] = mask[::stride, ::stride]
    return out


def knn_mean_distances(positions, k=3):
    """Mean distance from each point to its k nearest neighbors."""
    n = positions.shape[0]
    if n == 1:
        return np.ones(1)
    k_eff = min(k, n - 1)
    tree = cKDTree(positions)
    dist, _ = tree.query(positions, k=k_eff + 1)
    mean = dist[:, 1:].mean(axis=1)
    return np.maximum(mean, 1e-6)


def motion_masks(seq, cfg):
    """Motion masks for frames 1..T-1 against frame 0."""
    tau = resolve_tau(seq.frames[0], cfg)
    return [MotionMask(compute_motion_mask(seq.frames[0], seq.frames[i], tau), i)
            for i in range(1, len(seq.frames))]


def fuse_initial_cloud(seq, cfg, basis_count=DEFAULT_BASIS_COUNT,
                       first_frame_only=False):
    """Fused dense initial cloud from depth priors across all frames.

    Frame 0 contributes its full tissue mask; later frames contribute
    only their motion-mask pixels.  All frames are subsampled on the same
    stride grid before unprojection.  `first_frame_only` switches to the
    single-frame baseline used by the initialization ablation.
    """
    if len(seq.frames) == 0:
        raise EmptyCloudError("cannot initialize from an empty sequence")
    cam = seq.camera
    frame0 = seq.frames[0]
    tau = resolve_tau(frame0, cfg)

    chunks = []
    base_mask = frame0.tissue_mask.astype(bool) & frame0.valid_depth
    chunks.append(unproject_frame(frame0, cam,
                                  stride_subsample(base_mask, cfg.stride)))
    if not first_frame_only:
        for i in range(1, len(seq.frames)):
            frame = seq.frames[i]
            mask = compute_motion_mask(frame0, frame, tau)
            chunks.append(unproject_frame(
                frame, cam, stride_subsample(mask, cfg.stride)))

    positions = np.concatenate([c[0] for c in chunks])
    colors = np.concatenate([c[1] for c in chunks])
    if positions.shape[0] == 0:
        raise EmptyCloudError("initialization produced zero points")

    n = positions.shape[0]
    log_scales = np.repeat(
        np.log(knn_mean_distances(positions))[:, np.newaxis], 3, axis=1)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    opacity_logits = np.full(n, float(inverse_sigmoid(INITIAL_OPACITY)))
    return GaussianCloud(positions, rotations, log_scales, opacity_logits,
                         colors, DeformBank.identity(n, basis_count))
