"""Scratch FD verification of the render backward chain (not part of repo tests)."""
import numpy as np
from dynsplat.core import CameraModel, GaussianCloud, sigmoid
from dynsplat.deform import DeformBank, deform_gaussians, deform_backward
from dynsplat.render import (cull_and_project, rasterize, rasterize_backward,
                             reference_render, projection_backward)

rng = np.random.default_rng(7)
N, H, W, B = 6, 24, 24, 2
cam = CameraModel(fx=30.0, fy=28.0, cx=12.0, cy=11.5, width=W, height=H,
                  near=0.5, far=100.0,
                  extrinsics=np.array([[0.9689124, -0.2474040, 0., 0.3],
                                       [0.2474040, 0.9689124, 0., -0.2],
                                       [0., 0., 1., 0.1],
                                       [0., 0., 0., 1.]]))

def make_cloud():
    pos = rng.uniform(-2.5, 2.5, (N, 3)); pos[:, 2] = rng.uniform(8, 14, N)
    q = rng.normal(0, 1, (N, 4)); q /= np.linalg.norm(q, axis=1, keepdims=True)
    ls = rng.uniform(-0.6, 0.3, (N, 3))
    ol = rng.uniform(-2.0, 1.0, N)
    col = rng.uniform(0.05, 0.95, (N, 3))
    bank = DeformBank.identity(N, B)
    bank.weights[:] = rng.normal(0, 0.08, bank.weights.shape)
    bank.centers[:] += rng.normal(0, 0.05, bank.centers.shape)
    bank.widths[:] = np.abs(bank.widths + rng.normal(0, 0.02, bank.widths.shape)) + 0.05
    return GaussianCloud(pos, q, ls, ol, col, bank)

cloud = make_cloud()
t = 0.37
gc = rng.normal(0, 1, (H, W, 3))
gd = rng.normal(0, 1, (H, W))

def forward(cl):
    attrs = deform_gaussians(cl, t)
    prims, cache = cull_and_project(attrs.positions, attrs.rotations,
                                    attrs.scales, sigmoid(cl.opacity_logits),
                                    cl.colors, cam)
    out = rasterize(prims, cam)
    return out, prims, cache, attrs

out, prims, cache, attrs = forward(cloud)
print("visible:", prims.count, "of", N, " alpha range:", out.alpha.min(), out.alpha.max())
ref = reference_render(prims, cam)
print("rasterize vs reference max delta:", np.abs(out.color - ref.color).max(),
      np.abs(out.depth - ref.depth).max())

def objective(cl):
    o, *_ = forward(cl)
    return float(np.sum(o.color * gc) + np.sum(o.depth * gd))

# analytic
sg = rasterize_backward(out.compositing_state, gc, gd)
ag = projection_backward(cache, sg)
cg = deform_backward(cloud, attrs, ag.positions, ag.rotations, ag.scales)
op = sigmoid(cloud.opacity_logits)
glogit = ag.opacities * op * (1 - op)

analytic = {"positions": cg.positions, "rotations": cg.rotations,
            "log_scales": cg.log_scales, "opacity_logits": glogit,
            "colors": ag.colors, "weights": cg.weights,
            "centers": cg.centers, "widths": cg.widths}

def get_arr(cl, key):
    if key in ("weights", "centers", "widths"):
        return getattr(cl.deform, key)
    return getattr(cl, key)

h = 1e-5
worst = {}
for key, an in analytic.items():
    arr = get_arr(cloud, key)
    fd = np.zeros_like(an)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h; fp = objective(cloud)
        arr[idx] = orig - h; fm = objective(cloud)
        arr[idx] = orig
        fd[idx] = (fp - fm) / (2 * h)
        it.iternext()
    err = np.abs(fd - an) / np.maximum(np.abs(fd), 1e-6)
    worst[key] = (float(err.max()), float(np.abs(an).max()))
    print(f"{key:16s} max rel err {err.max():.3e}  (grad mag {np.abs(an).max():.3e})")
