"""Optimizer closed forms, density control rules, checkpoint round trips,
and training-loop determinism."""

import numpy as np
import pytest

from dynsplat.core import EmptyCloudError, GaussianCloud, sigmoid, \
    inverse_sigmoid
from dynsplat.deform import DeformBank
from dynsplat.losses import LossConfig
from dynsplat.synthetic import SyntheticSpec, generate_synthetic
from dynsplat.init import InitConfig, fuse_initial_cloud
from dynsplat.train import (Adam, DensifyConfig, OptimConfig, TrainConfig,
                            adam_step, density_control, load_checkpoint,
                            save_checkpoint, scene_extent_of, train)


def tiny_scene(**kw):
    args = dict(count=30, num_frames=9, height=24, width=24, seed=3,
                motion_amplitude=0.4)
    args.update(kw)
    return generate_synthetic(SyntheticSpec(**args))


def tiny_cloud(n=5, basis=2, seed=0):
    rng = np.random.default_rng(seed)
    pos = rng.normal(0, 1, (n, 3)) + [0, 0, 8.0]
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(pos, q, rng.uniform(-1, 0, (n, 3)),
                         rng.normal(0, 1, n), rng.uniform(0, 1, (n, 3)),
                         DeformBank.identity(n, basis))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = {"w": np.array([1.0, -2.0])}
        adam = Adam({"w": (2,)})
        adam.step(params, {"w": np.zeros(2)}, {"w": 0.1})
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])
        assert np.all(adam.m["w"] == 0.0)

    def test_first_step_is_lr_times_sign(self):
        for g in (0.3, -5.0, 1e-4):
            params = {"w": np.array([1.0])}
            adam = Adam({"w": (1,)}, eps=1e-15)
            adam.step(params, {"w": np.array([g])}, {"w": 0.01})
            assert params["w"][0] == pytest.approx(1.0 - 0.01 * np.sign(g),
                                                   abs=1e-10)

    def test_matches_reference_formula(self):
        # Hand-rolled Adam recurrences over a few steps.
        rng = np.random.default_rng(1)
        w = np.array([0.5, -1.0, 2.0])
        params = {"w": w.copy()}
        adam = Adam({"w": (3,)}, beta1=0.9, beta2=0.999, eps=1e-15)
        m = np.zeros(3)
        v = np.zeros(3)
        ref = w.copy()
        for t in range(1, 6):
            g = rng.normal(size=3)
            adam.step(params, {"w": g}, {"w": 0.05})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.05 * (m / (1 - 0.9 ** t)) / (
                np.sqrt(v / (1 - 0.999 ** t)) + 1e-15)
            np.testing.assert_allclose(params["w"], ref, atol=1e-12)

    def test_nonfinite_gradient_skipped_and_counted(self):
        params = {"w": np.array([1.0]), "u": np.array([2.0])}
        adam = Adam({"w": (1,), "u": (1,)})
        adam.step(params, {"w": np.array([np.nan]), "u": np.array([1.0])},
                  {"w": 0.1, "u": 0.1})
        assert params["w"][0] == 1.0          # skipped
        assert params["u"][0] != 2.0          # applied
        assert adam.skipped["w"] == 1
        assert adam.steps["w"] == 0

    def test_determinism(self):
        def run():
            params = {"w": np.linspace(-1, 1, 8)}
            adam = Adam({"w": (8,)})
            for t in range(20):
                g = np.sin(np.arange(8) + t)
                adam.step(params, {"w": g}, {"w": 0.01})
            return params["w"]
        np.testing.assert_array_equal(run(), run())

    def test_adam_step_wrapper(self):
        params = {"w": np.array([0.0])}
        state = Adam({"w": (1,)})
        schedule = lambda it: {"w": 0.1 if it == 0 else 0.0}
        adam_step(params, {"w": np.array([1.0])}, state, schedule, 0)
        assert params["w"][0] == pytest.approx(-0.1, abs=1e-10)


class TestLrSchedule:
    def test_position_decays_exponentially(self):
        opt = OptimConfig(iterations=1000)
        lr0 = opt.learning_rates(0)["positions"]
        lr_half = opt.learning_rates(500)["positions"]
        lr_end = opt.learning_rates(1000)["positions"]
        assert lr0 == pytest.approx(1.6e-3)
        assert lr_end == pytest.approx(1.6e-5)
        assert lr_half == pytest.approx(np.sqrt(lr0 * lr_end), rel=1e-9)

    def test_other_groups_constant(self):
        opt = OptimConfig(iterations=1000)
        assert opt.learning_rates(0)["opacity_logits"] == \
            opt.learning_rates(999)["opacity_logits"] == 0.05


class TestDensityControl:
    def test_no_trigger_no_change(self):
        cloud = tiny_cloud()
        cloud.opacity_logits[:] = 2.0       # opacity ~0.88, no pruning
        out, keep, n_new = density_control(
            cloud, np.zeros(5), np.ones(5), DensifyConfig(), 10.0)
        assert out.count == 5
        assert n_new == 0
        np.testing.assert_array_equal(keep, np.arange(5))
        np.testing.assert_array_equal(out.positions, cloud.positions)

    def test_clone_small_high_gradient(self):
        cloud = tiny_cloud()
        cloud.opacity_logits[:] = 2.0
        cloud.log_scales[:] = np.log(0.01)  # small vs extent
        grads = np.zeros(5)
        grads[2] = 1.0
        out, keep, n_new = density_control(cloud, grads, np.ones(5),
                                           DensifyConfig(grad_threshold=0.5),
                                           10.0)
        assert out.count == 6
        assert n_new == 1
        np.testing.assert_array_equal(out.positions[5], cloud.positions[2])
        np.testing.assert_array_equal(out.colors[5], cloud.colors[2])
        np.testing.assert_array_equal(out.deform.weights[5],
                                      cloud.deform.weights[2])

    def test_split_large_high_gradient(self):
        cloud = tiny_cloud()
        cloud.opacity_logits[:] = 2.0
        cloud.log_scales[:] = np.log(0.5)   # large vs extent*0.01
        grads = np.zeros(5)
        grads[1] = 1.0
        out, keep, n_new = density_control(cloud, grads, np.ones(5),
                                           DensifyConfig(grad_threshold=0.5),
                                           10.0)
        assert out.count == 6               # one removed, two added
        assert n_new == 2
        assert 1 not in keep
        children = out.positions[4:]
        np.testing.assert_allclose(children.mean(axis=0),
                                   cloud.positions[1], atol=1e-12)
        np.testing.assert_allclose(np.exp(out.log_scales[4]), 0.5 / 1.6,
                                   rtol=1e-12)

    def test_prune_transparent(self):
        cloud = tiny_cloud()
        cloud.opacity_logits[:] = 2.0
        cloud.opacity_logits[3] = float(inverse_sigmoid(0.001))
        out, keep, n_new = density_control(cloud, np.zeros(5), np.ones(5),
                                           DensifyConfig(), 10.0)
        assert out.count == 4
        assert 3 not in keep

    def test_cap_disables_densification(self):
        cloud = tiny_cloud()
        cloud.opacity_logits[:] = 2.0
        grads = np.ones(5)
        with pytest.warns(UserWarning, match="cap"):
            out, _, n_new = density_control(
                cloud, grads, np.ones(5),
                DensifyConfig(grad_threshold=0.1, max_gaussians=5), 10.0)
        assert out.count == 5
        assert n_new == 0

    def test_deform_stays_aligned(self):
        cloud = tiny_cloud()
        cloud.opacity_logits[:] = 2.0
        cloud.opacity_logits[0] = float(inverse_sigmoid(0.001))
        grads = np.array([0.0, 1.0, 0.0, 1.0, 0.0])
        cloud.log_scales[1] = np.log(0.001)
        out, _, _ = density_control(cloud, grads, np.ones(5),
                                    DensifyConfig(grad_threshold=0.5), 10.0)
        assert out.deform.count == out.count


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        cloud = tiny_cloud(7, basis=3, seed=5)
        adam = Adam.for_cloud(cloud, OptimConfig())
        adam.m["positions"][:] = 0.25
        adam.steps["colors"] = 12
        accum = np.arange(7.0)
        denom = np.ones(7) * 2
        path = tmp_path / "ck.bin"
        save_checkpoint(path, cloud, adam, 123, accum, denom)
        cloud2, adam2, it2, accum2, denom2 = load_checkpoint(path)
        assert it2 == 123
        np.testing.assert_array_equal(cloud2.positions, cloud.positions)
        np.testing.assert_array_equal(cloud2.rotations, cloud.rotations)
        np.testing.assert_array_equal(cloud2.deform.widths,
                                      cloud.deform.widths)
        np.testing.assert_array_equal(adam2.m["positions"],
                                      adam.m["positions"])
        assert adam2.steps["colors"] == 12
        np.testing.assert_array_equal(accum2, accum)
        save_checkpoint(tmp_path / "ck2.bin", cloud2, adam2, 123, accum2,
                        denom2)
        assert (tmp_path / "ck.bin").read_bytes() == \
            (tmp_path / "ck2.bin").read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        from dynsplat.core import InvalidStateError
        (tmp_path / "bad.bin").write_bytes(b"NOTACKPT" + b"\0" * 64)
        with pytest.raises(InvalidStateError):
            load_checkpoint(tmp_path / "bad.bin")


def short_config(iters, **kw):
    dens = kw.pop("densify", DensifyConfig(warmup=20, interval=10, stop=60,
                                           grad_threshold=0.05,
                                           opacity_reset_interval=0))
    return TrainConfig(loss=LossConfig(), optim=OptimConfig(iterations=iters),
                       densify=dens, log_interval=10, **kw)


class TestTrainLoop:
    def test_loss_decreases_on_static_scene(self):
        scene = tiny_scene(motion_amplitude=0.0)
        cloud = fuse_initial_cloud(scene.sequence, InitConfig(stride=2))
        cfg = short_config(80)
        res = train(scene.sequence, cloud, cfg)
        first = res.history[0][4]
        last = res.history[-1][4]
        assert last < first

    def test_psnr_improves_from_start(self):
        from dynsplat.metrics import psnr
        from dynsplat.deform import deform_gaussians
        from dynsplat.render import cull_and_project, rasterize

        scene = tiny_scene(motion_amplitude=0.0)
        seq = scene.sequence

        def render_psnr(cloud):
            vals = []
            for i in seq.train_indices[:3]:
                fr = seq.frames[i]
                attrs = deform_gaussians(cloud, fr.time)
                prims, _ = cull_and_project(
                    attrs.positions, attrs.rotations, attrs.scales,
                    sigmoid(cloud.opacity_logits), cloud.colors, seq.camera)
                vals.append(psnr(rasterize(prims, seq.camera).color,
                                 fr.image))
            return np.mean(vals)

        cloud = fuse_initial_cloud(seq, InitConfig(stride=2))
        before = render_psnr(cloud)
        res = train(seq, cloud.copy(), short_config(150))
        assert render_psnr(res.cloud) > before

    def test_two_runs_bitwise_identical(self, tmp_path):
        scene = tiny_scene()
        cloud = fuse_initial_cloud(scene.sequence, InitConfig(stride=2))
        cfg = short_config(60)
        train(scene.sequence, cloud.copy(), cfg, out_dir=tmp_path / "a")
        train(scene.sequence, cloud.copy(), cfg, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == \
            (tmp_path / "b" / "checkpoint.bin").read_bytes()
        assert (tmp_path / "a" / "metrics.csv").read_text() == \
            (tmp_path / "b" / "metrics.csv").read_text()

    def test_resume_reproduces_trajectory(self, tmp_path):
        scene = tiny_scene()
        cloud = fuse_initial_cloud(scene.sequence, InitConfig(stride=2))
        full_cfg = short_config(60)
        train(scene.sequence, cloud.copy(), full_cfg,
              out_dir=tmp_path / "full")

        # Interrupt the same 60-iteration schedule at 30, then resume.
        train(scene.sequence, cloud.copy(), short_config(60),
              out_dir=tmp_path / "part", stop_iteration=30)
        ck = load_checkpoint(tmp_path / "part" / "checkpoint.bin")
        assert ck.iteration == 30
        train(scene.sequence, ck.cloud, short_config(60),
              out_dir=tmp_path / "part", resume_iteration=ck.iteration,
              adam=ck.adam, grad_accum=ck.grad_accum, denom=ck.denom,
              scene_extent=ck.scene_extent)
        assert (tmp_path / "full" / "checkpoint.bin").read_bytes() == \
            (tmp_path / "part" / "checkpoint.bin").read_bytes()

    def test_empty_training_split_rejected(self):
        scene = tiny_scene()
        seq = scene.sequence
        seq.split[:] = "test"
        cloud = fuse_initial_cloud(seq, InitConfig(stride=4))
        with pytest.raises(EmptyCloudError, match="training frames"):
            train(seq, cloud, short_config(10))

    def test_nonfinite_loss_aborts_with_diagnostics(self):
        from dynsplat.core import NumericalAbort
        scene = tiny_scene()
        cloud = fuse_initial_cloud(scene.sequence, InitConfig(stride=2))
        cloud.colors[0, 0] = np.nan
        with pytest.raises(NumericalAbort, match="iteration 0"):
            train(scene.sequence, cloud, short_config(5))

    def test_total_decomposition_every_logged_iteration(self):
        scene = tiny_scene()
        cloud = fuse_initial_cloud(scene.sequence, InitConfig(stride=2))
        cfg = short_config(40)
        res = train(scene.sequence, cloud, cfg)
        lam = cfg.loss.lambda_smooth
        for (_, color, depth, smooth, total, _) in res.history:
            assert total == pytest.approx(color + depth + lam * smooth,
                                          abs=1e-9)

    def test_constraints_maintained(self):
        scene = tiny_scene()
        cloud = fuse_initial_cloud(scene.sequence, InitConfig(stride=2))
        res = train(scene.sequence, cloud, short_config(50))
        norms = np.linalg.norm(res.cloud.rotations, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)
        assert res.cloud.deform.widths.min() >= 1e-4
        assert res.cloud.colors.min() >= 0.0
        assert res.cloud.colors.max() <= 1.0

    def test_scene_extent(self):
        pts = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0], [0, 0, 2.0]])
        assert scene_extent_of(pts) == pytest.approx(np.sqrt(12) / 2)
