"""Per-Gaussian learned motion curves over time.

Each of the 10 deformed coordinates (position x/y/z, quaternion w/x/y/z,
log-scale x/y/z) gets its own weighted sum of Gaussian radial basis
functions of time:

    offset(t) = sum_j  w_j * exp(-(t - theta_j)^2 / (2 sigma_j^2))

All weights zero means the identity deformation.  Opacity and color are
not time-varying.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Coordinate layout of the deformation banks, axis 1:
#   0..2  position x, y, z
#   3..6  rotation quaternion w, x, y, z (additive, renormalized after)
#   7..9  log-scale x, y, z (exponentiated after)
NUM_COORDS = 10
POS = slice(0, 3)
ROT = slice(3, 7)
SCL = slice(7, 10)

# Basis widths are clamped here after every optimizer step; narrower basis
# functions degenerate into spikes the time sampling cannot see.
MIN_WIDTH = 1e-4

DEFAULT_BASIS_COUNT = 8


@dataclass
class DeformBank:
    """Deformation parameters for a whole cloud, one row per Gaussian.

    weights, centers, widths: (N, 10, B) arrays. A single Gaussian's slice
    (10, B) is its DeformParams.
    """

    weights: np.ndarray
    centers: np.ndarray
    widths: np.ndarray

    @classmethod
    def identity(cls, n, basis_count=DEFAULT_BASIS_COUNT):
        """Zero weights, centers spread over [0, 1], widths 1/B."""
        b = int(basis_count)
        centers = np.broadcast_to(np.linspace(0.0, 1.0, b),
                                  (n, NUM_COORDS, b)).copy()
        widths = np.full((n, NUM_COORDS, b), 1.0 / b, dtype=np.float64)
        return cls(np.zeros((n, NUM_COORDS, b)), centers, widths)

    @property
    def count(self):
        return self.weights.shape[0]

    @property
    def basis_count(self):
        return self.weights.shape[2]

    @property
    def is_identity(self):
        return not np.any(self.weights)

    def copy(self):
        return DeformBank(self.weights.copy(), self.centers.copy(), self.widths.copy())

    def take(self, idx):
        return DeformBank(self.weights[idx], self.centers[idx], self.widths[idx])

    def concat(self, other):
        if other.basis_count != self.basis_count:
            raise ValueError("basis counts differ")
        return DeformBank(np.concatenate([self.weights, other.weights]),
                          np.concatenate([self.centers, other.centers]),
                          np.concatenate([self.widths, other.widths]))


def basis_eval(t, theta, sigma):
    """exp(-(t - theta)^2 / (2 sigma^2)); peaks at 1 when t = theta."""
    d = np.asarray(t, dtype=np.float64) - np.asarray(theta, dtype=np.float64)
    s = np.asarray(sigma, dtype=np.float64)
    return np.exp(-(d * d) / (2.0 * s * s))


def deform_offset(t, weights, centers, widths):
    """Weighted basis sum for one coordinate: psi(t) = sum_j w_j b(t)."""
    return float(np.sum(np.asarray(weights, dtype=np.float64)
                        * basis_eval(t, centers, widths)))


@dataclass
class DeformedAttributes:
    """Attributes of a cloud evaluated at one time, plus backward state."""

    positions: np.ndarray       # (N, 3)
    rotations: np.ndarray       # (N, 4) unit quaternions
    scales: np.ndarray          # (N, 3) std-devs (exp applied)
    raw_rotations: np.ndarray   # (N, 4) pre-normalization, for backward
    time: float


def deform_gaussians(cloud, t):
    """All attributes of `cloud` at time t in [0, 1].

    Adds the per-coordinate basis offsets to the canonical attributes,
    renormalizes the quaternion, and exponentiates the offset log-scale.
    Opacity and color are untouched by design.
    """
    bank = cloud.deform
    basis = basis_eval(t, bank.centers, bank.widths)       # (N, 10, B)
    offsets = np.sum(bank.weights * basis, axis=2)         # (N, 10)

    positions = cloud.positions + offsets[:, POS]
    raw_rot = cloud.rotations + offsets[:, ROT]
    norms = np.linalg.norm(raw_rot, axis=1, keepdims=True)
    rotations = raw_rot / norms
    scales = np.exp(cloud.log_scales + offsets[:, SCL])
    return DeformedAttributes(positions, rotations, scales, raw_rot, float(t))


@dataclass
class CanonicalGrads:
    """Gradients w.r.t. a cloud's own parameters for one time sample."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    weights: np.ndarray
    centers: np.ndarray
    widths: np.ndarray


def deform_backward(cloud, deformed, grad_positions, grad_rotations, grad_scales):
    """Chain upstream attribute gradients back to canonical + basis params.

    grad_rotations is w.r.t. the renormalized quaternion, grad_scales
    w.r.t. the exponentiated scale; both chains are unwound here.
    """
    bank = cloud.deform
    t = deformed.time

    # Quaternion normalization: q = raw / ||raw||.
    raw = deformed.raw_rotations
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    unit = raw / norms
    dot = np.sum(grad_rotations * unit, axis=1, keepdims=True)
    grad_raw_rot = (grad_rotations - unit * dot) / norms

    # Scale exponentiation: s = exp(log_s + offset).
    grad_log_scale_total = grad_scales * deformed.scales

    grad_offsets = np.concatenate(
        [grad_positions, grad_raw_rot, grad_log_scale_total], axis=1)  # (N, 10)

    diff = t - bank.centers                                # (N, 10, B)
    inv_w2 = 1.0 / (bank.widths * bank.widths)
    basis = np.exp(-0.5 * diff * diff * inv_w2)
    go = grad_offsets[:, :, np.newaxis]
    grad_weights = go * basis
    grad_centers = go * bank.weights * basis * diff * inv_w2
    grad_widths = go * bank.weights * basis * diff * diff * inv_w2 / bank.widths

    return CanonicalGrads(grad_positions.copy(), grad_raw_rot,
                          grad_log_scale_total, grad_weights,
                          grad_centers, grad_widths)
