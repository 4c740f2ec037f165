"""Experiment: sharp textured scene, with/without opacity reset."""
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

reset = int(sys.argv[1]) if len(sys.argv) > 1 else 0
stride = int(sys.argv[2]) if len(sys.argv) > 2 else 4
thresh = float(sys.argv[3]) if len(sys.argv) > 3 else 0.01
kind = sys.argv[4] if len(sys.argv) > 4 else "normalized"
prune = float(sys.argv[5]) if len(sys.argv) > 5 else 0.005

spec = SyntheticSpec(count=200, num_frames=24, height=64, width=64,
                     motion_amplitude=1.0, depth_noise=0.0, seed=0)
scene = generate_synthetic(spec)
seq = scene.sequence

def eval_test(cloud):
    ps, rm, al, bias = [], [], [], []
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
        bias.append((out.depth[m] - scene.clean_depths[i][m]).mean())
    return np.mean(ps), np.mean(rm), np.mean(al), np.mean(bias)

cloud = fuse_initial_cloud(seq, InitConfig(stride=stride), basis_count=8)
print(f"reset={reset} stride={stride} thresh={thresh} kind={kind} "
      f"prune={prune} init={cloud.count} budget={0.02*scene.depth_range:.4f}", flush=True)
dens = DensifyConfig(grad_threshold=thresh, opacity_reset_interval=reset, prune_opacity=prune)
cur = cloud.copy(); adam = None; start_it = 0
t0 = time.perf_counter()
for seg_end in (500, 1000, 1500, 2000):
    cfg = TrainConfig(loss=LossConfig(depth_loss_kind=kind),
                      optim=OptimConfig(iterations=seg_end), densify=dens)
    res = train(seq, cur, cfg, resume_iteration=start_it, adam=adam)
    cur = res.cloud; adam = res.adam; start_it = seg_end
    p, r, a, b = eval_test(cur)
    op = np.percentile(sigmoid(cur.opacity_logits), [25, 50, 75])
    print(f"iter {seg_end:5d}: psnr {p:6.2f} rmse {r:8.4f} alpha {a:.4f} "
          f"bias {b:7.3f} count {cur.count} op_q={np.round(op,3)} "
          f"({time.perf_counter()-t0:.0f}s)", flush=True)
EOF