"""Compiled inner loops of the rasterizer.

Forward, backward, and the naive reference renderer share one arithmetic
definition of a splat's contribution so that their outputs agree bitwise
whenever early stopping is inert:

    power  = -0.5 * (a du^2 + c dv^2) - b du dv      (conic (a, b, c))
    skip when power < POWER_CUTOFF (outside the 3-sigma support)
    alpha  = min(ALPHA_MAX, opacity * exp(power))
    skip when alpha < ALPHA_MIN
    composite front to back with weight alpha * transmittance

The backward kernel reconstructs per-pixel transmittance by walking the
composited primitives in reverse and dividing final transmittance by
(1 - alpha); the alpha clamp bounds each divisor away from zero.
"""

import math

import numpy as np
from numba import njit

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
# Mahalanobis^2 = 9 boundary: splats end exactly at their 3-sigma ellipse,
# matching the 3-sigma bounding boxes used for tile assignment.
POWER_CUTOFF = -4.5


@njit(nogil=True, cache=True)
def tile_forward(ids, y0, y1, x0, x1, mean2d, conic, opacity, color, depth,
                 stop_t, out_color, out_depth, out_trans, out_ncontrib):
    """Composite primitives `ids` (depth-sorted) over one pixel block."""
    for py in range(y0, y1):
        pv = py + 0.5
        for px in range(x0, x1):
            pu = px + 0.5
            t = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            d = 0.0
            cnt = 0
            for k in range(ids.shape[0]):
                if t < stop_t:
                    break
                i = ids[k]
                du = pu - mean2d[i, 0]
                dv = pv - mean2d[i, 1]
                power = (-0.5 * (conic[i, 0] * du * du + conic[i, 2] * dv * dv)
                         - conic[i, 1] * du * dv)
                if power < POWER_CUTOFF:
                    continue
                alpha = opacity[i] * math.exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_MIN:
                    continue
                w = alpha * t
                c0 += w * color[i, 0]
                c1 += w * color[i, 1]
                c2 += w * color[i, 2]
                d += w * depth[i]
                t *= 1.0 - alpha
                cnt = k + 1
            out_color[py, px, 0] = c0
            out_color[py, px, 1] = c1
            out_color[py, px, 2] = c2
            out_depth[py, px] = d
            out_trans[py, px] = t
            out_ncontrib[py, px] = cnt


@njit(nogil=True, cache=True)
def tile_backward(ids, y0, y1, x0, x1, mean2d, conic, opacity, color, depth,
                  final_trans, n_contrib, grad_color, grad_depth,
                  g_mean2d, g_conic, g_opacity, g_color, g_depth):
    """Gradients of the composited color/depth w.r.t. primitive fields.

    Accumulates into per-tile buffers indexed like `ids` (g_mean2d is
    (len(ids), 2) and so on); the caller merges tiles in a fixed order.
    """
    for py in range(y0, y1):
        pv = py + 0.5
        for px in range(x0, x1):
            n = n_contrib[py, px]
            if n == 0:
                continue
            gc0 = grad_color[py, px, 0]
            gc1 = grad_color[py, px, 1]
            gc2 = grad_color[py, px, 2]
            gd = grad_depth[py, px]
            if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0:
                continue
            pu = px + 0.5
            t_after = final_trans[py, px]
            suffix = 0.0     # sum of w_j * g_j over primitives behind k
            for k in range(n - 1, -1, -1):
                i = ids[k]
                du = pu - mean2d[i, 0]
                dv = pv - mean2d[i, 1]
                a = conic[i, 0]
                b = conic[i, 1]
                c = conic[i, 2]
                power = -0.5 * (a * du * du + c * dv * dv) - b * du * dv
                if power < POWER_CUTOFF:
                    continue
                g = math.exp(power)
                raw = opacity[i] * g
                clamped = raw > ALPHA_MAX
                alpha = ALPHA_MAX if clamped else raw
                if alpha < ALPHA_MIN:
                    continue
                t_before = t_after / (1.0 - alpha)
                w = alpha * t_before
                gi = (gc0 * color[i, 0] + gc1 * color[i, 1]
                      + gc2 * color[i, 2] + gd * depth[i])
                g_color[k, 0] += w * gc0
                g_color[k, 1] += w * gc1
                g_color[k, 2] += w * gc2
                g_depth[k] += w * gd
                dalpha = t_before * gi - suffix / (1.0 - alpha)
                if not clamped:
                    # alpha = opacity * exp(power); clamped splats block
                    # the gradient into opacity and shape.
                    g_opacity[k] += dalpha * g
                    dpower = dalpha * raw
                    g_mean2d[k, 0] += dpower * (a * du + b * dv)
                    g_mean2d[k, 1] += dpower * (b * du + c * dv)
                    g_conic[k, 0] += dpower * (-0.5 * du * du)
                    g_conic[k, 1] += dpower * (-du * dv)
                    g_conic[k, 2] += dpower * (-0.5 * dv * dv)
                suffix += w * gi
                t_after = t_before


@njit(nogil=True, cache=True)
def reference_forward(mean2d, conic, opacity, color, depth, height, width,
                      out_color, out_depth, out_trans):
    """Naive compositing: every primitive at every pixel, no early stop."""
    m = mean2d.shape[0]
    for py in range(height):
        pv = py + 0.5
        for px in range(width):
            pu = px + 0.5
            t = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            d = 0.0
            for i in range(m):
                du = pu - mean2d[i, 0]
                dv = pv - mean2d[i, 1]
                power = (-0.5 * (conic[i, 0] * du * du + conic[i, 2] * dv * dv)
                         - conic[i, 1] * du * dv)
                if power < POWER_CUTOFF:
                    continue
                alpha = opacity[i] * math.exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_MIN:
                    continue
                w = alpha * t
                c0 += w * color[i, 0]
                c1 += w * color[i, 1]
                c2 += w * color[i, 2]
                d += w * depth[i]
                t *= 1.0 - alpha
            out_color[py, px, 0] = c0
            out_color[py, px, 1] = c1
            out_color[py, px, 2] = c2
            out_depth[py, px] = d
            out_trans[py, px] = t
