"""Domain types and closed-form Gaussian math shared by all other modules.

Conventions used throughout the package:
  * quaternions are (w, x, y, z) and unit-norm wherever a rotation is meant;
  * per-axis scales are stored as log standard deviations (scene units);
  * opacity is stored as a logit, so sigmoid(logit) is always in (0, 1);
  * camera extrinsics are a 4x4 world-to-camera rigid transform;
  * pixel (u, v) = (column, row) samples the scene at (u + 0.5, v + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


# ---------------------------------------------------------------------------
# Errors


class DynsplatError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DynsplatError, ValueError):
    """Non-finite or otherwise malformed numeric input."""


class DegenerateCovarianceError(DynsplatError, ValueError):
    """Covariance matrix is singular or too ill-conditioned to invert."""


class EmptyCloudError(DynsplatError, RuntimeError):
    """An operation requires at least one Gaussian but the cloud is empty."""


class InvalidStateError(DynsplatError, RuntimeError):
    """Saved compositing/optimizer state does not match its consumer."""


class DatasetError(DynsplatError, RuntimeError):
    """Dataset on disk is missing, unreadable, or inconsistent."""


class NumericalAbort(DynsplatError, RuntimeError):
    """Training hit a non-finite loss and aborted."""


# ---------------------------------------------------------------------------
# Quaternion helpers


def quat_normalize(q):
    """Return q / ||q|| for an array of quaternions (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise InvalidInputError("zero-norm quaternion cannot be normalized")
    return q / norm


def quat_to_rotation(q):
    """Rotation matrices from unit quaternions.

    Accepts shape (4,) or (N, 4) in (w, x, y, z) order, returns (3, 3) or
    (N, 3, 3).  The input is assumed unit-norm; no renormalization happens
    here so gradients stay exact.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[:, 0, 1] = 2.0 * (x * y - w * z)
    R[:, 0, 2] = 2.0 * (x * z + w * y)
    R[:, 1, 0] = 2.0 * (x * y + w * z)
    R[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[:, 1, 2] = 2.0 * (y * z - w * x)
    R[:, 2, 0] = 2.0 * (x * z - w * y)
    R[:, 2, 1] = 2.0 * (y * z + w * x)
    R[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R[0] if single else R


def quat_to_rotation_grad(q, dR):
    """Backpropagate gradients through quat_to_rotation.

    q: (N, 4) unit quaternions, dR: (N, 3, 3) upstream gradients.
    Returns (N, 4) gradients w.r.t. the (unit) quaternion components.
    """
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    dR = np.asarray(dR, dtype=np.float64).reshape(q.shape[0], 3, 3)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = np.empty_like(q)
    # dR/dw
    g[:, 0] = 2.0 * (-z * dR[:, 0, 1] + y * dR[:, 0, 2]
                     + z * dR[:, 1, 0] - x * dR[:, 1, 2]
                     - y * dR[:, 2, 0] + x * dR[:, 2, 1])
    # dR/dx
    g[:, 1] = 2.0 * (y * dR[:, 0, 1] + z * dR[:, 0, 2]
                     + y * dR[:, 1, 0] - 2.0 * x * dR[:, 1, 1] - w * dR[:, 1, 2]
                     + z * dR[:, 2, 0] + w * dR[:, 2, 1] - 2.0 * x * dR[:, 2, 2])
    # dR/dy
    g[:, 2] = 2.0 * (-2.0 * y * dR[:, 0, 0] + x * dR[:, 0, 1] + w * dR[:, 0, 2]
                     + x * dR[:, 1, 0] + z * dR[:, 1, 2]
                     - w * dR[:, 2, 0] + z * dR[:, 2, 1] - 2.0 * y * dR[:, 2, 2])
    # dR/dz
    g[:, 3] = 2.0 * (-2.0 * z * dR[:, 0, 0] - w * dR[:, 0, 1] + x * dR[:, 0, 2]
                     + w * dR[:, 1, 0] - 2.0 * z * dR[:, 1, 1] + y * dR[:, 1, 2]
                     + x * dR[:, 2, 0] + y * dR[:, 2, 1])
    return g


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# Domain types


@dataclass
class Gaussian:
    """One anisotropic 3D Gaussian with optimizable attributes."""

    position: np.ndarray       # (3,) scene units
    rotation: np.ndarray       # (4,) unit quaternion (w, x, y, z)
    log_scale: np.ndarray      # (3,) log of per-axis std-dev
    opacity_logit: float
    color: np.ndarray          # (3,) RGB in [0, 1], degree-0 SH

    @property
    def opacity(self):
        return float(sigmoid(np.float64(self.opacity_logit)))

    @property
    def scale(self):
        return np.exp(np.asarray(self.log_scale, dtype=np.float64))


@dataclass
class CameraModel:
    """Pinhole camera with a fixed world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float
    extrinsics: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")
        if not (0 < self.near < self.far):
            raise InvalidInputError("need 0 < near < far")
        R = self.extrinsics[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise InvalidInputError("extrinsics rotation block is not orthonormal")

    @property
    def intrinsics(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def rotation(self):
        return self.extrinsics[:3, :3]

    @property
    def translation(self):
        return self.extrinsics[:3, 3]

    def world_to_camera(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return points @ self.rotation.T + self.translation

    def camera_to_world(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return (points - self.translation) @ self.rotation

    def project(self, points_cam):
        """Camera-space points (N, 3) to continuous pixel coords (N, 2)."""
        p = np.atleast_2d(np.asarray(points_cam, dtype=np.float64))
        z = p[:, 2]
        return np.stack([self.fx * p[:, 0] / z + self.cx,
                         self.fy * p[:, 1] / z + self.cy], axis=1)


@dataclass
class GaussianCloud:
    """The explicit scene: attribute arrays plus aligned deformation params.

    Stored struct-of-arrays; `deform` always has exactly one row per
    Gaussian (densify/prune go through take()/extend() which keep them
    aligned).
    """

    positions: np.ndarray       # (N, 3)
    rotations: np.ndarray       # (N, 4) unit quaternions
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray          # (N, 3)
    deform: "DeformBank"        # see dynsplat.deform

    def __post_init__(self):
        n = self.positions.shape[0]
        shapes = (self.rotations.shape, self.log_scales.shape,
                  self.opacity_logits.shape, self.colors.shape)
        if shapes != ((n, 4), (n, 3), (n,), (n, 3)):
            raise InvalidInputError("misaligned Gaussian attribute arrays")
        if self.deform.count != n:
            raise InvalidInputError("deform params misaligned with Gaussians")

    @property
    def count(self):
        return self.positions.shape[0]

    def __len__(self):
        return self.count

    def gaussian(self, i):
        """Per-item view, mainly for tests and inspection."""
        return Gaussian(self.positions[i].copy(), self.rotations[i].copy(),
                        self.log_scales[i].copy(), float(self.opacity_logits[i]),
                        self.colors[i].copy())

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    def copy(self):
        return GaussianCloud(self.positions.copy(), self.rotations.copy(),
                             self.log_scales.copy(), self.opacity_logits.copy(),
                             self.colors.copy(), self.deform.copy())

    def take(self, idx):
        """New cloud keeping rows idx (bool mask or index array)."""
        return GaussianCloud(self.positions[idx], self.rotations[idx],
                             self.log_scales[idx], self.opacity_logits[idx],
                             self.colors[idx], self.deform.take(idx))

    def extend(self, other):
        """New cloud with other's Gaussians appended after this one's."""
        return GaussianCloud(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.colors, other.colors]),
            self.deform.concat(other.deform))


# ---------------------------------------------------------------------------
# Closed-form operations


def build_covariance(rotation, scale):
    """Sigma = R S S^T R^T from a unit quaternion and per-axis std-devs.

    The result is symmetric positive semi-definite by construction.
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(scale))):
        raise InvalidInputError("non-finite rotation or scale")
    if np.any(scale <= 0.0):
        raise InvalidInputError("scale components must be positive")
    R = quat_to_rotation(quat_normalize(rotation))
    M = R * scale[np.newaxis, :]          # R @ diag(scale)
    return M @ M.T


def evaluate_gaussian(center, cov, x):
    """exp(-1/2 (x - mu)^T Sigma^-1 (x - mu)), in (0, 1]."""
    center = np.asarray(center, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if not (np.all(np.isfinite(center)) and np.all(np.isfinite(cov))
            and np.all(np.isfinite(x))):
        raise InvalidInputError("non-finite input")
    eig = np.linalg.eigvalsh(cov)
    if eig[0] <= 0.0 or eig[-1] / eig[0] >= 1e12:
        raise DegenerateCovarianceError(
            f"covariance condition number too large (eigenvalues {eig})")
    d = x - center
    m = d @ np.linalg.solve(cov, d)
    return float(np.exp(-0.5 * m))


# Screen-space covariance floor, in pixel^2. Keeps projected Gaussians at
# least ~half a pixel wide so tiny splats neither vanish nor alias.
COV2D_FLOOR = 0.3


def projection_jacobian(p_cam, fx, fy):
    """Jacobian of pinhole projection (u, v) w.r.t. the camera-space point.

    p_cam: (N, 3) with z > 0.  Returns (N, 2, 3).
    """
    p = np.atleast_2d(np.asarray(p_cam, dtype=np.float64))
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    J = np.zeros((p.shape[0], 2, 3), dtype=np.float64)
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / (z * z)
    return J


def project_covariance(cov, cam, position):
    """Screen-space 2x2 covariance Sigma' = J W Sigma W^T J^T + floor.

    `position` is the Gaussian center in world coordinates.  Returns None
    when the point is not in front of the camera (z <= near): the caller
    culls such Gaussians rather than treating them as errors.
    """
    cov = np.asarray(cov, dtype=np.float64)
    p_cam = cam.world_to_camera(position)[0]
    if p_cam[2] <= cam.near:
        return None
    W = cam.rotation
    cov_cam = W @ cov @ W.T
    J = projection_jacobian(p_cam[np.newaxis, :], cam.fx, cam.fy)[0]
    cov2d = J @ cov_cam @ J.T
    return cov2d + COV2D_FLOOR * np.eye(2)
