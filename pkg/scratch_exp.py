"""Experiments on training dynamics: densify settings vs quality."""
import sys, time
import numpy as np
from dynsplat.synthetic import SyntheticSpec, generate_synthetic
from dynsplat.init import InitConfig, fuse_initial_cloud
from dynsplat.train import TrainConfig, OptimConfig, DensifyConfig, train
from dynsplat.losses import LossConfig
from dynsplat.metrics import psnr, depth_metrics
from dynsplat.deform import deform_gaussians
from dynsplat.render import cull_and_project, rasterize
from dynsplat.core import sigmoid

mode = sys.argv[1] if len(sys.argv) > 1 else "nodensify"

spec = SyntheticSpec(count=200, num_frames=24, height=64, width=64,
                     motion_amplitude=1.0, depth_noise=0.0, seed=0)
scene = generate_synthetic(spec)
seq = scene.sequence

def eval_test(cloud):
    ps, rm, al = [], [], []
    for i in seq.test_indices:
        fr = seq.frames[i]
        attrs = deform_gaussians(cloud, fr.time)
        prims, _ = cull_and_project(attrs.positions, attrs.rotations,
                                    attrs.scales, sigmoid(cloud.opacity_logits),
                                    cloud.colors, seq.camera)
        out = rasterize(prims, seq.camera)
        ps.append(psnr(out.color, fr.image))
        m = fr.tissue_mask & (scene.clean_depths[i] > 0) & out.covered
        rm.append(depth_metrics(out.depth, scene.clean_depths[i], m)[2])
        al.append(out.alpha[m].mean())
    return np.mean(ps), np.mean(rm), np.mean(al)

cloud = fuse_initial_cloud(seq, InitConfig(), basis_count=8)
print(f"mode={mode} init count {cloud.count}, 2%range={0.02*scene.depth_range:.4f}")

if mode == "nodensify":
    dens = DensifyConfig(enabled=False)
elif mode == "thresh01":
    dens = DensifyConfig(grad_threshold=0.01)
elif mode == "thresh003":
    dens = DensifyConfig(grad_threshold=0.003)
else:
    dens = DensifyConfig()

total = 2000
step = 500
cur = cloud.copy()
from dynsplat.train import Adam
adam = None; accum = None; denom = None
start_it = 0
t0 = time.perf_counter()
for seg_end in range(step, total + 1, step):
    cfg = TrainConfig(loss=LossConfig(), optim=OptimConfig(iterations=seg_end),
                      densify=dens)
    res = train(seq, cur, cfg, resume_iteration=start_it, adam=adam,
                grad_accum=accum, denom=denom)
    cur = res.cloud; adam = res.adam; start_it = seg_end
    accum = None; denom = None  # fresh accumulators per segment (approximation)
    p, r, a = eval_test(cur)
    print(f"iter {seg_end:5d}: psnr {p:6.2f} rmse {r:8.4f} alpha {a:.3f} "
          f"count {cur.count} ({time.perf_counter()-t0:.0f}s)")
