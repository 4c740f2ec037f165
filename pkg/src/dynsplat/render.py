"""Differentiable tile-based rasterizer for 3D Gaussians.

Forward: project each Gaussian to a screen-space 2D Gaussian, sort by
camera depth (ties broken by source index), then alpha-composite color
and depth front to back per pixel:

    C(x) = sum_i c_i a_i prod_{j<i} (1 - a_j),   a_i = o_i G_i^2D(x)

and the same weights applied to camera-space z for the depth map.

Backward: analytic gradients of the compositing w.r.t. every splat field,
then chain rules through the projection back to world-space attributes.

Work is split into 16x16 pixel tiles with per-tile primitive lists.
Tiles own disjoint pixels, and per-primitive gradients are merged over
tiles in tile order, so outputs are identical for any thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import InvalidStateError, projection_jacobian, quat_to_rotation, \
    quat_to_rotation_grad, COV2D_FLOOR

TILE = 16

# Default transmittance below which a pixel stops accepting primitives.
# Small enough that the truncated tail stays below the rasterizer's
# documented 1e-5 agreement with the unstopped reference renderer.
STOP_TRANSMITTANCE = 1e-6


@dataclass
class SplatPrimitives:
    """Screen-space splats, depth-sorted ascending, ties by source index."""

    mean2d: np.ndarray        # (M, 2) pixel coords
    cov2d: np.ndarray         # (M, 2, 2) pixel^2, floor already added
    conic: np.ndarray         # (M, 3) inverse cov2d as (a, b, c)
    depth_z: np.ndarray       # (M,) camera-space z
    opacity: np.ndarray       # (M,) in (0, 1)
    color: np.ndarray         # (M, 3)
    source_index: np.ndarray  # (M,) original Gaussian index
    radius: np.ndarray        # (M,) 3-sigma screen radius in pixels

    @property
    def count(self):
        return self.mean2d.shape[0]

    @classmethod
    def empty(cls):
        z = np.zeros(0)
        return cls(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros((0, 3)),
                   z, z.copy(), np.zeros((0, 3)), np.zeros(0, dtype=np.int64),
                   z.copy())


def conic_from_cov2d(cov2d):
    """Inverse of symmetric 2x2 covariances as (a, b, c) triplets."""
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=1)


@dataclass
class CompositingState:
    """Everything the backward pass needs from a forward rasterization."""

    primitives: SplatPrimitives
    tile_ids: list            # per tile: int64 array of primitive indices
    tile_bounds: list         # per tile: (y0, y1, x0, x1)
    final_trans: np.ndarray   # (H, W) transmittance after compositing
    n_contrib: np.ndarray     # (H, W) int32, count into the tile's id list
    width: int
    height: int
    stop_transmittance: float


@dataclass
class RenderOutput:
    color: np.ndarray             # (H, W, 3) in [0, 1]
    depth: np.ndarray             # (H, W) scene units, 0 where uncovered
    alpha: np.ndarray             # (H, W) accumulated opacity
    compositing_state: CompositingState | None = None

    @property
    def covered(self):
        return self.alpha > 0.0


@dataclass
class ProjectionCache:
    """Intermediates of cull_and_project, for projection_backward."""

    kept: np.ndarray          # indices into the input attribute arrays
    total: int                # number of input Gaussians
    p_cam: np.ndarray         # (M, 3)
    rot_mats: np.ndarray      # (M, 3, 3)
    scales: np.ndarray        # (M, 3)
    rotations: np.ndarray     # (M, 4) unit quaternions
    cov_cam: np.ndarray       # (M, 3, 3)
    jacobians: np.ndarray     # (M, 2, 3)
    conic: np.ndarray         # (M, 3)
    cam: object


def cull_and_project(positions, rotations, scales, opacities, colors, cam):
    """Project Gaussians to screen splats; drop the invisible ones.

    Culls Gaussians with camera-space z outside (near, far) or whose
    3-sigma screen extent misses the image entirely.  Returns the splats
    sorted by (depth, source index) plus a cache for the backward pass.
    """
    n = positions.shape[0]
    p_cam_all = cam.world_to_camera(positions)
    z_all = p_cam_all[:, 2]
    infront = (z_all > cam.near) & (z_all < cam.far)
    idx = np.nonzero(infront)[0]
    if idx.size == 0:
        return SplatPrimitives.empty(), ProjectionCache(
            idx, n, np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)),
            np.zeros((0, 4)), np.zeros((0, 3, 3)), np.zeros((0, 2, 3)),
            np.zeros((0, 3)), cam)

    p_cam = p_cam_all[idx]
    mean2d = cam.project(p_cam)

    rot_mats = quat_to_rotation(rotations[idx])
    m = rot_mats * scales[idx][:, np.newaxis, :]          # R @ diag(s)
    cov3d = m @ np.transpose(m, (0, 2, 1))
    w = cam.rotation
    cov_cam = np.einsum('ij,njk,lk->nil', w, cov3d, w)
    jac = projection_jacobian(p_cam, cam.fx, cam.fy)
    cov2d = np.einsum('nij,njk,nlk->nil', jac, cov_cam, jac)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR

    # 3-sigma radius from the larger eigenvalue of the 2x2 covariance.
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    disc = np.sqrt(np.maximum(
        0.25 * (cov2d[:, 0, 0] - cov2d[:, 1, 1]) ** 2 + cov2d[:, 0, 1] ** 2,
        0.0))
    radius = 3.0 * np.sqrt(mid + disc)

    onscreen = ((mean2d[:, 0] + radius > 0.0)
                & (mean2d[:, 0] - radius < cam.width)
                & (mean2d[:, 1] + radius > 0.0)
                & (mean2d[:, 1] - radius < cam.height))
    if not np.all(onscreen):
        keep = np.nonzero(onscreen)[0]
        idx, p_cam, mean2d = idx[keep], p_cam[keep], mean2d[keep]
        rot_mats, cov_cam, jac = rot_mats[keep], cov_cam[keep], jac[keep]
        cov2d, radius = cov2d[keep], radius[keep]

    order = np.lexsort((idx, p_cam[:, 2]))
    idx, p_cam, mean2d = idx[order], p_cam[order], mean2d[order]
    rot_mats, cov_cam, jac = rot_mats[order], cov_cam[order], jac[order]
    cov2d, radius = cov2d[order], radius[order]

    conic = conic_from_cov2d(cov2d)
    prims = SplatPrimitives(
        mean2d=np.ascontiguousarray(mean2d),
        cov2d=cov2d,
        conic=np.ascontiguousarray(conic),
        depth_z=np.ascontiguousarray(p_cam[:, 2]),
        opacity=np.ascontiguousarray(opacities[idx]),
        color=np.ascontiguousarray(colors[idx].astype(np.float64)),
        source_index=idx,
        radius=radius)
    cache = ProjectionCache(idx, n, p_cam, rot_mats, scales[idx],
                            rotations[idx], cov_cam, jac, conic, cam)
    return prims, cache


def _tile_layout(prims, width, height):
    """Per-tile primitive id lists (tile-major, row order) and pixel bounds."""
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    u, v, r = prims.mean2d[:, 0], prims.mean2d[:, 1], prims.radius
    # Pixel px covers the splat when |px + 0.5 - u| <= r.
    x_lo = np.clip(np.floor(u - r - 0.5).astype(np.int64), 0, width)
    x_hi = np.clip(np.ceil(u + r - 0.5).astype(np.int64) + 1, 0, width)
    y_lo = np.clip(np.floor(v - r - 0.5).astype(np.int64), 0, height)
    y_hi = np.clip(np.ceil(v + r - 0.5).astype(np.int64) + 1, 0, height)

    tx0, tx1 = x_lo // TILE, (np.maximum(x_hi, x_lo + 1) - 1) // TILE + 1
    ty0, ty1 = y_lo // TILE, (np.maximum(y_hi, y_lo + 1) - 1) // TILE + 1
    spans_x = tx1 - tx0
    spans = spans_x * (ty1 - ty0)
    spans[(x_lo >= x_hi) | (y_lo >= y_hi)] = 0

    total = int(spans.sum())
    ids = [np.zeros(0, dtype=np.int64)] * (ntx * nty)
    if total:
        prim = np.repeat(np.arange(prims.count, dtype=np.int64), spans)
        starts = np.concatenate([[0], np.cumsum(spans)[:-1]])
        local = np.arange(total, dtype=np.int64) - np.repeat(starts, spans)
        w = spans_x[prim]
        tile_x = tx0[prim] + local % w
        tile_y = ty0[prim] + local // w
        tile = tile_y * ntx + tile_x
        order = np.argsort(tile, kind="stable")   # keeps depth order per tile
        tile_sorted = tile[order]
        prim_sorted = prim[order]
        cuts = np.searchsorted(tile_sorted, np.arange(ntx * nty + 1))
        ids = [prim_sorted[cuts[t]:cuts[t + 1]] for t in range(ntx * nty)]

    bounds = []
    for ty in range(nty):
        for tx in range(ntx):
            bounds.append((ty * TILE, min((ty + 1) * TILE, height),
                           tx * TILE, min((tx + 1) * TILE, width)))
    return ids, bounds


def _run_tiles(tasks, worker, threads):
    if threads <= 1 or len(tasks) <= 1:
        for task in tasks:
            worker(task)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(worker, tasks))


def rasterize(prims, cam, threads=1, stop_transmittance=STOP_TRANSMITTANCE):
    """Tile-based forward rendering; saves state for the backward pass."""
    height, width = int(cam.height), int(cam.width)
    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    trans = np.ones((height, width))
    ncontrib = np.zeros((height, width), dtype=np.int32)

    if prims.count:
        ids, bounds = _tile_layout(prims, width, height)
        tasks = [t for t in range(len(ids)) if ids[t].size]

        def worker(t):
            y0, y1, x0, x1 = bounds[t]
            _kernels.tile_forward(ids[t], y0, y1, x0, x1, prims.mean2d,
                                  prims.conic, prims.opacity, prims.color,
                                  prims.depth_z, stop_transmittance,
                                  color, depth, trans, ncontrib)

        _run_tiles(tasks, worker, threads)
    else:
        ids, bounds = [], []

    state = CompositingState(prims, ids, bounds, trans, ncontrib,
                             width, height, stop_transmittance)
    return RenderOutput(color, depth, 1.0 - trans, state)


def reference_render(prims, cam):
    """Per-pixel loop over all primitives: the oracle for `rasterize`.

    No tiling and no early stopping; identical contribution arithmetic.
    """
    height, width = int(cam.height), int(cam.width)
    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    trans = np.ones((height, width))
    if prims.count:
        _kernels.reference_forward(prims.mean2d, prims.conic, prims.opacity,
                                   prims.color, prims.depth_z, height, width,
                                   color, depth, trans)
    return RenderOutput(color, depth, 1.0 - trans, None)


@dataclass
class SplatGrads:
    """Gradients w.r.t. every splat field, aligned with the primitives."""

    mean2d: np.ndarray    # (M, 2)
    cov2d: np.ndarray     # (M, 2, 2)
    opacity: np.ndarray   # (M,)
    color: np.ndarray     # (M, 3)
    depth_z: np.ndarray   # (M,)


def rasterize_backward(state, grad_color, grad_depth, threads=1):
    """Exact gradients of the compositing equations.

    `state` must come from the matching rasterize() call; grad_color is
    (H, W, 3) and grad_depth (H, W) upstream gradients of the rendered
    images.  Per-tile partial gradients are merged in tile order so the
    result does not depend on the thread count.
    """
    if not isinstance(state, CompositingState):
        raise InvalidStateError("backward needs the forward's compositing state")
    grad_color = np.ascontiguousarray(grad_color, dtype=np.float64)
    grad_depth = np.ascontiguousarray(grad_depth, dtype=np.float64)
    if grad_color.shape != (state.height, state.width, 3) \
            or grad_depth.shape != (state.height, state.width):
        raise InvalidStateError("gradient image shape mismatch")

    prims = state.primitives
    m = prims.count
    g_mean2d = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_opacity = np.zeros(m)
    g_color = np.zeros((m, 3))
    g_depth = np.zeros(m)
    if m == 0:
        return SplatGrads(g_mean2d, np.zeros((m, 2, 2)), g_opacity,
                          g_color, g_depth)

    tasks = [t for t in range(len(state.tile_ids)) if state.tile_ids[t].size]
    partials = {}

    def worker(t):
        ids = state.tile_ids[t]
        y0, y1, x0, x1 = state.tile_bounds[t]
        k = ids.shape[0]
        buf = (np.zeros((k, 2)), np.zeros((k, 3)), np.zeros(k),
               np.zeros((k, 3)), np.zeros(k))
        _kernels.tile_backward(ids, y0, y1, x0, x1, prims.mean2d, prims.conic,
                               prims.opacity, prims.color, prims.depth_z,
                               state.final_trans, state.n_contrib,
                               grad_color, grad_depth, *buf)
        partials[t] = buf

    _run_tiles(tasks, worker, threads)

    for t in tasks:   # fixed reduction order regardless of thread count
        ids = state.tile_ids[t]   # unique within a tile by construction
        bm, bc, bo, bcol, bd = partials[t]
        g_mean2d[ids] += bm
        g_conic[ids] += bc
        g_opacity[ids] += bo
        g_color[ids] += bcol
        g_depth[ids] += bd

    # Conic -> covariance: N = M^-1 gives dM = -N dN N with the shared
    # off-diagonal gradient split across both slots.
    dn = np.empty((m, 2, 2))
    dn[:, 0, 0] = g_conic[:, 0]
    dn[:, 0, 1] = 0.5 * g_conic[:, 1]
    dn[:, 1, 0] = 0.5 * g_conic[:, 1]
    dn[:, 1, 1] = g_conic[:, 2]
    nmat = np.empty((m, 2, 2))
    nmat[:, 0, 0] = prims.conic[:, 0]
    nmat[:, 0, 1] = prims.conic[:, 1]
    nmat[:, 1, 0] = prims.conic[:, 1]
    nmat[:, 1, 1] = prims.conic[:, 2]
    g_cov2d = -np.einsum('nij,njk,nkl->nil', nmat, dn, nmat)

    return SplatGrads(g_mean2d, g_cov2d, g_opacity, g_color, g_depth)


@dataclass
class AttributeGrads:
    """Gradients w.r.t. world-space attributes, full-length arrays."""

    positions: np.ndarray   # (N, 3)
    rotations: np.ndarray   # (N, 4), w.r.t. the unit quaternion
    scales: np.ndarray      # (N, 3), w.r.t. std-dev scale
    opacities: np.ndarray   # (N,), w.r.t. opacity in (0, 1)
    colors: np.ndarray      # (N, 3)
    mean2d: np.ndarray      # (N, 2) screen-space gradients, for densification


def projection_backward(cache, splat_grads):
    """Chain splat-field gradients back through the projection.

    Inverts cull_and_project: covariance back through J W Sigma W^T J^T
    and R S S^T R^T, screen means back through the pinhole division.
    Culled Gaussians get zero gradients.
    """
    cam = cache.cam
    n = cache.total
    out = AttributeGrads(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                         np.zeros(n), np.zeros((n, 3)), np.zeros((n, 2)))
    mkept = cache.kept.size
    if mkept == 0:
        return out

    g2 = splat_grads.cov2d                       # (M, 2, 2)
    jac = cache.jacobians
    d_cov_cam = np.einsum('nji,njk,nkl->nil', jac, g2, jac)
    d_jac = np.einsum('nij,njk,nkl->nil', g2 + np.transpose(g2, (0, 2, 1)),
                      jac, cache.cov_cam)

    x, y, z = cache.p_cam[:, 0], cache.p_cam[:, 1], cache.p_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z

    gu = splat_grads.mean2d[:, 0]
    gv = splat_grads.mean2d[:, 1]
    dp = np.zeros((mkept, 3))
    dp[:, 0] = d_jac[:, 0, 2] * (-fx * inv_z2) + gu * fx * inv_z
    dp[:, 1] = d_jac[:, 1, 2] * (-fy * inv_z2) + gv * fy * inv_z
    dp[:, 2] = (d_jac[:, 0, 0] * (-fx * inv_z2)
                + d_jac[:, 1, 1] * (-fy * inv_z2)
                + d_jac[:, 0, 2] * (2.0 * fx * x * inv_z2 * inv_z)
                + d_jac[:, 1, 2] * (2.0 * fy * y * inv_z2 * inv_z)
                - gu * fx * x * inv_z2 - gv * fy * y * inv_z2
                + splat_grads.depth_z)

    w = cam.rotation
    d_cov3d = np.einsum('ji,njk,kl->nil', w, d_cov_cam, w)
    d_positions = dp @ w

    # Sigma = M M^T with M = R diag(s).
    m3 = cache.rot_mats * cache.scales[:, np.newaxis, :]
    d_m3 = np.einsum('nij,njk->nik',
                     d_cov3d + np.transpose(d_cov3d, (0, 2, 1)), m3)
    d_scales = np.einsum('nrk,nrk->nk', cache.rot_mats, d_m3)
    d_rot_mats = d_m3 * cache.scales[:, np.newaxis, :]
    d_quats = quat_to_rotation_grad(cache.rotations, d_rot_mats)

    kept = cache.kept
    out.positions[kept] = d_positions
    out.rotations[kept] = d_quats
    out.scales[kept] = d_scales
    out.opacities[kept] = splat_grads.opacity
    out.colors[kept] = splat_grads.color
    out.mean2d[kept] = splat_grads.mean2d
    return out
