"""Synthetic dynamic scenes with exact ground truth.

A generating cloud of Gaussians moves along analytic per-Gaussian
sinusoids (a motion family deliberately outside the learned basis),
and every frame is produced by the reference renderer, so rendered color
and depth are exact ground truth for the whole pipeline.  A circular
"tool" occluder sweeps across the tissue masks to exercise the
disocclusion logic, and optional Gaussian noise on the stored depth maps
stands in for stereo-matching error; the clean maps are kept alongside
for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import CameraModel, GaussianCloud, inverse_sigmoid
from .deform import DeformBank, DEFAULT_BASIS_COUNT
from .ingest import (Frame, FrameSequence, assign_split, frame_times,
                     save_camera_config, save_depth, save_image, save_mask)
from .render import cull_and_project, reference_render


@dataclass
class SyntheticSpec:
    count: int = 200
    extent: float = 8.0              # lateral half-extent, scene units
    base_depth: float = 20.0
    depth_relief: float = 6.0        # surface curvature amplitude
    motion_amplitude: float = 1.0
    motion_frequency: float = 1.0
    num_frames: int = 24
    height: int = 64
    width: int = 64
    depth_noise: float = 0.0         # sigma, scene units, on stored maps
    occluder_radius: float = 0.0     # pixels; 0 disables the tool
    opacity: float = 0.97
    two_layer: bool = False
    layer_gap: float = 15.0          # depth offset of the back layer
    seed: int = 0
    basis_count: int = DEFAULT_BASIS_COUNT
    splat_size_factor: float = 0.7   # splat std-dev / grid spacing
    # Pixels whose accumulated opacity falls below this emit depth 0,
    # mimicking stereo-matching holes at silhouettes where the composited
    # depth is attenuated and unreliable.
    depth_alpha_min: float = 0.9


@dataclass
class SyntheticScene:
    spec: SyntheticSpec
    cloud: GaussianCloud             # generating cloud (identity deform)
    camera: CameraModel
    sequence: FrameSequence          # frames with (possibly noisy) depth
    clean_depths: list               # per-frame noise-free depth maps
    occluder_masks: list             # per-frame bool, True inside the tool
    motion: object                   # callable t -> (N, 3) position offsets

    @property
    def depth_range(self):
        lo, hi = np.inf, -np.inf
        for d in self.clean_depths:
            valid = d > 0
            if np.any(valid):
                lo = min(lo, d[valid].min())
                hi = max(hi, d[valid].max())
        return float(hi - lo)


def _build_cloud(spec, rng):
    """Jittered-grid slab (or two slabs) facing the camera."""
    n = spec.count
    side = int(np.ceil(np.sqrt(n)))
    gx, gy = np.meshgrid(np.linspace(-1.0, 1.0, side),
                         np.linspace(-1.0, 1.0, side))
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)[:n]
    spacing = 2.0 * spec.extent / max(side - 1, 1)
    xy = grid * spec.extent + rng.uniform(-0.2, 0.2, (n, 2)) * spacing

    z = spec.base_depth + spec.depth_relief * np.sin(
        np.pi * xy[:, 0] / spec.extent) * np.cos(
        0.5 * np.pi * xy[:, 1] / spec.extent)
    if spec.two_layer:
        # Front patch over the central third, the rest pushed back.
        front = (np.abs(xy[:, 0]) < spec.extent * 0.45) \
            & (np.abs(xy[:, 1]) < spec.extent * 0.45)
        z = np.where(front, z, z + spec.layer_gap)
    positions = np.column_stack([xy, z])

    log_s = np.log(spacing * spec.splat_size_factor)
    log_scales = log_s + rng.uniform(-0.15, 0.15, (n, 3))
    quats = np.column_stack([np.ones(n), rng.normal(0.0, 0.08, (n, 3))])
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    # Tissue-like palette: a bright red channel with strongly textured
    # green/blue so that blurry fits pay a visible photometric price.
    colors = np.column_stack([rng.uniform(0.82, 0.98, n),
                              rng.uniform(0.05, 0.9, n),
                              rng.uniform(0.05, 0.75, n)])
    opacity_logits = np.full(n, float(inverse_sigmoid(spec.opacity)))
    return GaussianCloud(positions, quats, log_scales, opacity_logits,
                         colors, DeformBank.identity(n, spec.basis_count))


def _build_camera(spec):
    # Focal length chosen so the slab plus motion margin fills the frame.
    reach = spec.extent * 1.25 + spec.motion_amplitude
    focal = 0.5 * min(spec.width, spec.height) * spec.base_depth / reach
    return CameraModel(fx=focal, fy=focal,
                       cx=spec.width / 2.0, cy=spec.height / 2.0,
                       width=spec.width, height=spec.height,
                       near=1.0, far=10.0 * (spec.base_depth + spec.layer_gap))


def _occluder_mask(spec, t):
    """Bool map, True inside the tool disk at time t (sweeps left to right)."""
    if spec.occluder_radius <= 0:
        return np.zeros((spec.height, spec.width), dtype=bool)
    cx = spec.width * (0.3 + 0.4 * t)
    cy = spec.height * 0.5
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    return (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 \
        <= spec.occluder_radius ** 2


TOOL_COLOR = 0.25


def generate_synthetic(spec):
    """Build the generating cloud and render its frame sequence."""
    rng = np.random.default_rng(spec.seed)
    cloud = _build_cloud(spec, rng)
    cam = _build_camera(spec)
    n = cloud.count

    phases = rng.uniform(0.0, 2.0 * np.pi, (n, 3))
    directions = rng.uniform(0.5, 1.0, (n, 3)) * rng.choice(
        [-1.0, 1.0], (n, 3))

    def motion(t):
        return spec.motion_amplitude * directions * np.sin(
            2.0 * np.pi * spec.motion_frequency * t + phases)

    noise_rng = np.random.default_rng(spec.seed + 1)
    times = frame_times(spec.num_frames)
    frames = []
    clean_depths = []
    occluders = []
    opacities = cloud.opacities
    for t in times:
        positions = cloud.positions + motion(t)
        prims, _ = cull_and_project(positions, cloud.rotations, cloud.scales,
                                    opacities, cloud.colors, cam)
        out = reference_render(prims, cam)
        image = out.color.copy()
        depth = np.where(out.alpha >= spec.depth_alpha_min, out.depth, 0.0)
        clean_depths.append(depth.copy())

        tool = _occluder_mask(spec, t)
        occluders.append(tool)
        tissue = ~tool
        image[tool] = TOOL_COLOR
        depth = np.where(tool, 0.0, depth)
        if spec.depth_noise > 0:
            valid = depth > 0
            noisy = depth + noise_rng.normal(0.0, spec.depth_noise,
                                             depth.shape)
            depth = np.where(valid, np.maximum(noisy, 1e-3), 0.0)
        frames.append(Frame(image, depth, tissue, float(t)))

    seq = FrameSequence(frames, cam, assign_split(spec.num_frames))
    return SyntheticScene(spec, cloud, cam, seq, clean_depths, occluders,
                          motion)


def dataset_depth_scale(scene):
    """16-bit quantization step leaving ~5% headroom above the max depth."""
    peak = max((d.max() for d in scene.clean_depths), default=1.0)
    peak = max(peak, max((f.depth.max() for f in scene.sequence.frames),
                         default=1.0))
    return float(peak) * 1.05 / 65535.0


def write_dataset(scene, root):
    """Write the scene in the ingest directory layout; returns the root."""
    root = Path(root)
    for sub in ("images", "depth", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    scale = dataset_depth_scale(scene)
    save_camera_config(scene.camera, scale, root / "camera.json")
    for i, frame in enumerate(scene.sequence.frames):
        save_image(frame.image, root / "images" / f"{i:06d}.png")
        save_depth(frame.depth, scale, root / "depth" / f"{i:06d}.png")
        save_mask(frame.tissue_mask, root / "masks" / f"{i:06d}.png")
    return root
