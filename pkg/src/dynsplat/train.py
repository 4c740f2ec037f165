"""Optimization: Adam, adaptive density control, and the training loop.

Training is deterministic by construction: frames are visited round-robin
in index order, there is no stochastic sampling anywhere, reductions run
in fixed order, and splits place children deterministically along the
principal axis.  Two runs with the same config produce bitwise-identical
checkpoints and logs.

Checkpoint byte layout (little endian, versioned):

    magic      8 bytes  b"DSPLATCK"
    version    uint32   currently 1
    iteration  uint32   completed iterations
    count      uint64   number of Gaussians N
    basis      uint32   deformation basis count B
    arrays, float64, in declaration order:
        positions (N,3)  rotations (N,4)  log_scales (N,3)
        opacity_logits (N,)  colors (N,3)
        deform weights / centers / widths (each (N,10,B))
    optimizer state, per parameter group in GROUP order:
        step uint64, then m and v arrays shaped like the group
    densification accumulators:
        grad_accum (N,) float64, denom (N,) float64
        scene_extent float64 (frozen at the start of training)
"""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (EmptyCloudError, GaussianCloud, InvalidStateError,
                   NumericalAbort, inverse_sigmoid, quat_normalize, sigmoid)
from .deform import (DeformBank, MIN_WIDTH, NUM_COORDS, deform_backward,
                     deform_gaussians)
from .losses import LossConfig, total_loss, canny_edges
from .render import (STOP_TRANSMITTANCE, cull_and_project, projection_backward,
                     rasterize, rasterize_backward)

CHECKPOINT_MAGIC = b"DSPLATCK"
CHECKPOINT_VERSION = 1

# Parameter groups, in checkpoint declaration order.
GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "colors",
          "deform_weights", "deform_centers", "deform_widths")


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class OptimConfig:
    iterations: int = 6000
    lr_position: float = 1.6e-3
    lr_position_final: float = 1.6e-5
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 0.05
    lr_color: float = 2.5e-3
    lr_deform: float = 1.6e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    def learning_rates(self, iteration):
        """Per-group learning rates; position decays exponentially."""
        frac = iteration / max(1, self.iterations)
        lr_pos = self.lr_position * \
            (self.lr_position_final / self.lr_position) ** frac
        return {"positions": lr_pos,
                "rotations": self.lr_rotation,
                "log_scales": self.lr_scale,
                "opacity_logits": self.lr_opacity,
                "colors": self.lr_color,
                "deform_weights": self.lr_deform,
                "deform_centers": self.lr_deform,
                "deform_widths": self.lr_deform}


@dataclass
class DensifyConfig:
    enabled: bool = True
    interval: int = 100
    warmup: int = 500
    stop: int = 3000
    grad_threshold: float = 2e-4      # on NDC-scaled mean screen gradients
    clone_scale_fraction: float = 0.01
    split_shrink: float = 1.6
    prune_opacity: float = 0.005
    max_gaussians: int = 500_000
    # Periodically knock opacities down to at most 0.01 inside the
    # densification window; only splats the losses actually need regrow,
    # which consolidates translucent fog into opaque surfaces.  0 disables.
    opacity_reset_interval: int = 3000
    opacity_reset_value: float = 0.01


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    log_interval: int = 100
    threads: int = 1
    stop_transmittance: float = STOP_TRANSMITTANCE


# ---------------------------------------------------------------------------
# Adam


class Adam:
    """Standard Adam over named parameter groups.

    Non-finite gradients skip the step for that group (counted in
    `skipped`); moments then stay untouched for the group.
    """

    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.steps = {k: 0 for k in shapes}
        self.skipped = {k: 0 for k in shapes}

    @classmethod
    def for_cloud(cls, cloud, cfg):
        shapes = {k: _cloud_param(cloud, k).shape for k in GROUPS}
        return cls(shapes, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self, params, grads, lrs):
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                self.skipped[k] += 1
                continue
            self.steps[k] += 1
            t = self.steps[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            params[k] -= lrs[k] * m_hat / (np.sqrt(v_hat) + self.eps)

    def remap(self, keep_idx, n_new):
        """Align moment arrays after densify/prune; new rows start at zero."""
        for k in self.m:
            zeros_m = np.zeros((n_new,) + self.m[k].shape[1:])
            self.m[k] = np.concatenate([self.m[k][keep_idx], zeros_m])
            self.v[k] = np.concatenate([self.v[k][keep_idx], zeros_m.copy()])


def adam_step(params, grads, state, lr_schedule, iteration):
    """One optimizer step over named parameter groups.

    `lr_schedule` maps iteration -> {group: lr}.  Mutates params in place
    and returns them.
    """
    state.step(params, grads, lr_schedule(iteration))
    return params


def _cloud_param(cloud, name):
    if name == "deform_weights":
        return cloud.deform.weights
    if name == "deform_centers":
        return cloud.deform.centers
    if name == "deform_widths":
        return cloud.deform.widths
    return getattr(cloud, name)


def _cloud_params(cloud):
    return {k: _cloud_param(cloud, k) for k in GROUPS}


def apply_constraints(cloud):
    """Project attributes back onto their invariants after a step.

    Quaternions renormalized, basis widths clamped to stay nondegenerate,
    colors clamped to [0, 1] (degree-0 SH stores plain RGB).  Without the
    color clamp the optimizer brightens colors past 1 instead of raising
    opacity, leaving composited depth bias behind.
    """
    cloud.rotations[:] = quat_normalize(cloud.rotations)
    np.clip(cloud.deform.widths, MIN_WIDTH, None, out=cloud.deform.widths)
    np.clip(cloud.colors, 0.0, 1.0, out=cloud.colors)


# ---------------------------------------------------------------------------
# One training step


@dataclass
class CloudGrads:
    """Per-parameter-group gradients plus densification bookkeeping."""

    by_group: dict
    mean2d: np.ndarray     # (N, 2) screen-space gradients
    visible: np.ndarray    # (N,) bool, rendered this step


def training_step(cloud, frame, cam, loss_cfg, nonedge=None, threads=1,
                  stop_transmittance=STOP_TRANSMITTANCE):
    """Forward render at the frame's time, losses, full backward chain."""
    attrs = deform_gaussians(cloud, frame.time)
    opacities = sigmoid(cloud.opacity_logits)
    prims, cache = cull_and_project(attrs.positions, attrs.rotations,
                                    attrs.scales, opacities, cloud.colors, cam)
    out = rasterize(prims, cam, threads=threads,
                    stop_transmittance=stop_transmittance)
    report, grad_color, grad_depth = total_loss(frame, out, loss_cfg, nonedge)

    splat_grads = rasterize_backward(out.compositing_state, grad_color,
                                     grad_depth, threads=threads)
    attr_grads = projection_backward(cache, splat_grads)
    canon = deform_backward(cloud, attrs, attr_grads.positions,
                            attr_grads.rotations, attr_grads.scales)
    grad_logits = attr_grads.opacities * opacities * (1.0 - opacities)

    visible = np.zeros(cloud.count, dtype=bool)
    visible[cache.kept] = True
    grads = CloudGrads(
        by_group={"positions": canon.positions,
                  "rotations": canon.rotations,
                  "log_scales": canon.log_scales,
                  "opacity_logits": grad_logits,
                  "colors": attr_grads.colors,
                  "deform_weights": canon.weights,
                  "deform_centers": canon.centers,
                  "deform_widths": canon.widths},
        mean2d=attr_grads.mean2d,
        visible=visible)
    report.grads = grads
    return report, out


# ---------------------------------------------------------------------------
# Density control


def scene_extent_of(positions):
    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    return max(float(np.linalg.norm(hi - lo)) * 0.5, 1e-6)


def density_control(cloud, grad_accum, denom, cfg, scene_extent):
    """Clone/split high-gradient Gaussians, prune transparent ones.

    Returns (new_cloud, keep_idx, n_new) so the optimizer moments can be
    remapped: rows keep_idx survive in order, then n_new fresh rows.
    Splitting replaces the original with two children offset one standard
    deviation along the principal axis, scales divided by split_shrink;
    this keeps training free of random sampling.
    """
    n = cloud.count
    mean_grad = grad_accum / np.maximum(denom, 1.0)
    prune = sigmoid(cloud.opacity_logits) < cfg.prune_opacity
    densify = (mean_grad > cfg.grad_threshold) & ~prune

    scales = cloud.scales
    max_scale = scales.max(axis=1)
    clone = densify & (max_scale < cfg.clone_scale_fraction * scene_extent)
    split = densify & ~clone

    projected = n - int(prune.sum()) + int(clone.sum()) + int(split.sum())
    if projected > cfg.max_gaussians:
        warnings.warn(f"density control: cap {cfg.max_gaussians} reached, "
                      "densification disabled")
        clone = np.zeros(n, dtype=bool)
        split = np.zeros(n, dtype=bool)

    keep = ~prune & ~split
    keep_idx = np.nonzero(keep)[0]
    pieces = [cloud.take(keep_idx)]

    clone_idx = np.nonzero(clone & keep)[0]
    if clone_idx.size:
        pieces.append(cloud.take(clone_idx))

    split_idx = np.nonzero(split)[0]
    if split_idx.size:
        from .core import quat_to_rotation
        src = cloud.take(split_idx)
        axes = np.argmax(np.exp(src.log_scales), axis=1)
        rot = quat_to_rotation(src.rotations)
        major = rot[np.arange(split_idx.size), :, axes]       # (K, 3) column
        offset = major * np.exp(src.log_scales[np.arange(split_idx.size),
                                               axes])[:, np.newaxis]
        shrink = np.log(cfg.split_shrink)
        for sign in (1.0, -1.0):
            child = src.copy()
            child.positions = src.positions + sign * offset
            child.log_scales = src.log_scales - shrink
            pieces.append(child)

    new_cloud = pieces[0]
    for piece in pieces[1:]:
        new_cloud = new_cloud.extend(piece)
    n_new = new_cloud.count - keep_idx.size
    return new_cloud, keep_idx, n_new


# ---------------------------------------------------------------------------
# Checkpoints


def _write_array(f, arr):
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(f, shape):
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(count * 8), dtype="<f8").copy()
    return data.reshape(shape)


def save_checkpoint(path, cloud, adam, iteration, grad_accum=None,
                    denom=None, scene_extent=0.0):
    """Atomically write the documented binary checkpoint."""
    path = Path(path)
    n = cloud.count
    b = cloud.deform.basis_count
    if grad_accum is None:
        grad_accum = np.zeros(n)
    if denom is None:
        denom = np.zeros(n)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IIQI", CHECKPOINT_VERSION, int(iteration),
                            n, b))
        for k in GROUPS:
            _write_array(f, _cloud_param(cloud, k))
        for k in GROUPS:
            f.write(struct.pack("<Q", adam.steps[k]))
            _write_array(f, adam.m[k])
            _write_array(f, adam.v[k])
        _write_array(f, grad_accum)
        _write_array(f, denom)
        f.write(struct.pack("<d", float(scene_extent)))
    os.replace(tmp, path)


def _group_shapes(n, b):
    return {"positions": (n, 3), "rotations": (n, 4), "log_scales": (n, 3),
            "opacity_logits": (n,), "colors": (n, 3),
            "deform_weights": (n, NUM_COORDS, b),
            "deform_centers": (n, NUM_COORDS, b),
            "deform_widths": (n, NUM_COORDS, b)}


def load_checkpoint(path):
    """Read a checkpoint; returns (cloud, adam, iteration, accum, denom)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise InvalidStateError(f"{path}: not a checkpoint file")
        version, iteration, n, b = struct.unpack("<IIQI", f.read(20))
        if version != CHECKPOINT_VERSION:
            raise InvalidStateError(f"{path}: unsupported version {version}")
        shapes = _group_shapes(n, b)
        arrays = {k: _read_array(f, shapes[k]) for k in GROUPS}
        adam = Adam(shapes)
        for k in GROUPS:
            adam.steps[k] = struct.unpack("<Q", f.read(8))[0]
            adam.m[k] = _read_array(f, shapes[k])
            adam.v[k] = _read_array(f, shapes[k])
        grad_accum = _read_array(f, (n,))
        denom = _read_array(f, (n,))
        scene_extent = struct.unpack("<d", f.read(8))[0]
    bank = DeformBank(arrays["deform_weights"], arrays["deform_centers"],
                      arrays["deform_widths"])
    cloud = GaussianCloud(arrays["positions"], arrays["rotations"],
                          arrays["log_scales"], arrays["opacity_logits"],
                          arrays["colors"], bank)
    return Checkpoint(cloud, adam, iteration, grad_accum, denom,
                      scene_extent)


@dataclass
class Checkpoint:
    """Loaded checkpoint contents; iterable for unpacking convenience."""

    cloud: GaussianCloud
    adam: Adam
    iteration: int
    grad_accum: np.ndarray
    denom: np.ndarray
    scene_extent: float

    def __iter__(self):
        return iter((self.cloud, self.adam, self.iteration, self.grad_accum,
                     self.denom))


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    cloud: GaussianCloud
    adam: Adam
    iterations: int
    history: list          # (iteration, LossReport scalars, count) tuples
    log_lines: list


def _param_stats(cloud):
    parts = []
    for k in GROUPS:
        arr = _cloud_param(cloud, k)
        parts.append(f"{k}: min={arr.min():.3e} max={arr.max():.3e}")
    return "; ".join(parts)


def train(seq, cloud, cfg, out_dir=None, resume_iteration=0, adam=None,
          grad_accum=None, denom=None, scene_extent=None,
          stop_iteration=None):
    """Run the optimization loop over a sequence's training split.

    `stop_iteration` interrupts the schedule early (the checkpoint then
    records the stopping point); resuming from it under the same config
    reproduces the uninterrupted run's trajectory bitwise, since the
    position learning-rate schedule spans cfg.optim.iterations either
    way.  Writes `metrics.csv` and `checkpoint.bin` into out_dir when
    given; aborts with NumericalAbort on a non-finite loss.
    """
    train_frames = seq.train_indices
    if not train_frames:
        raise EmptyCloudError("no training frames in sequence")
    cam = seq.camera
    opt = cfg.optim
    dens = cfg.densify

    if adam is None:
        adam = Adam.for_cloud(cloud, opt)
    if grad_accum is None:
        grad_accum = np.zeros(cloud.count)
    if denom is None:
        denom = np.zeros(cloud.count)
    if scene_extent is None:
        scene_extent = scene_extent_of(cloud.positions)
    ndc_scale = np.array([cam.width * 0.5, cam.height * 0.5])

    nonedge_cache = {}
    history = []
    log_lines = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume_iteration else "w"
        metrics_file = open(out_path / "metrics.csv", mode)
    else:
        metrics_file = None

    last_iteration = opt.iterations if stop_iteration is None \
        else min(stop_iteration, opt.iterations)
    try:
        for it in range(resume_iteration, last_iteration):
            if cloud.count == 0:
                raise EmptyCloudError(
                    f"cloud became empty before iteration {it}")
            fidx = train_frames[it % len(train_frames)]
            frame = seq.frames[fidx]
            if fidx not in nonedge_cache:
                nonedge_cache[fidx] = canny_edges(
                    frame.depth, cfg.loss.canny_low, cfg.loss.canny_high,
                    cfg.loss.canny_blur_sigma)

            report, _ = training_step(cloud, frame, cam, cfg.loss,
                                      nonedge_cache[fidx], cfg.threads,
                                      cfg.stop_transmittance)
            if not np.isfinite(report.total):
                raise NumericalAbort(
                    f"non-finite loss at iteration {it} on frame {fidx} "
                    f"(color={report.color_loss}, depth={report.depth_loss}, "
                    f"smooth={report.smooth_loss}); {_param_stats(cloud)}")

            grads = report.grads
            adam.step(_cloud_params(cloud), grads.by_group,
                      opt.learning_rates(it))
            apply_constraints(cloud)

            vis = grads.visible
            grad_accum[vis] += np.linalg.norm(grads.mean2d[vis] * ndc_scale,
                                              axis=1)
            denom[vis] += 1.0

            if (dens.enabled and dens.warmup <= it + 1 <= dens.stop
                    and (it + 1) % dens.interval == 0):
                cloud, keep_idx, n_new = density_control(
                    cloud, grad_accum, denom, dens, scene_extent)
                adam.remap(keep_idx, n_new)
                grad_accum = np.zeros(cloud.count)
                denom = np.zeros(cloud.count)

            if (dens.enabled and dens.opacity_reset_interval > 0
                    and dens.warmup <= it + 1 <= dens.stop
                    and (it + 1) % dens.opacity_reset_interval == 0):
                reset_logit = float(inverse_sigmoid(dens.opacity_reset_value))
                np.minimum(cloud.opacity_logits, reset_logit,
                           out=cloud.opacity_logits)
                adam.m["opacity_logits"][:] = 0.0
                adam.v["opacity_logits"][:] = 0.0

            if (it + 1) % cfg.log_interval == 0 or it + 1 == last_iteration:
                line = (f"{it + 1},{report.color_loss:.10e},"
                        f"{report.depth_loss:.10e},{report.smooth_loss:.10e},"
                        f"{report.total:.10e},{cloud.count}")
                log_lines.append(line)
                history.append((it + 1, report.color_loss, report.depth_loss,
                                report.smooth_loss, report.total, cloud.count))
                if metrics_file is not None:
                    metrics_file.write(line + "\n")
                    metrics_file.flush()
    finally:
        if metrics_file is not None:
            metrics_file.close()

    if out_path is not None:
        save_checkpoint(out_path / "checkpoint.bin", cloud, adam,
                        last_iteration, grad_accum, denom, scene_extent)
    return TrainResult(cloud, adam, last_iteration, history, log_lines)
