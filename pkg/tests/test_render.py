"""Rasterizer: culling, compositing closed forms, oracle agreement,
thread-count determinism, and analytic backward vs finite differences."""

import numpy as np
import pytest

from dynsplat.core import CameraModel, InvalidStateError, sigmoid
from dynsplat.render import (SplatPrimitives, conic_from_cov2d,
                             cull_and_project, projection_backward, rasterize,
                             rasterize_backward, reference_render)


def camera(w=32, h=32, **kw):
    args = dict(fx=40.0, fy=40.0, cx=w / 2, cy=h / 2, width=w, height=h,
                near=0.5, far=100.0)
    args.update(kw)
    return CameraModel(**args)


def make_prims(mean2d, depth_z, opacity, color, cov2d=None):
    mean2d = np.atleast_2d(np.asarray(mean2d, dtype=np.float64))
    m = mean2d.shape[0]
    if cov2d is None:
        cov2d = np.tile(np.eye(2) * 2.0, (m, 1, 1))
    cov2d = np.asarray(cov2d, dtype=np.float64).reshape(m, 2, 2)
    depth_z = np.asarray(depth_z, dtype=np.float64).reshape(m)
    opacity = np.asarray(opacity, dtype=np.float64).reshape(m)
    color = np.asarray(color, dtype=np.float64).reshape(m, 3)
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    disc = np.sqrt(0.25 * (cov2d[:, 0, 0] - cov2d[:, 1, 1]) ** 2
                   + cov2d[:, 0, 1] ** 2)
    radius = 3.0 * np.sqrt(mid + disc)
    return SplatPrimitives(mean2d, cov2d, conic_from_cov2d(cov2d), depth_z,
                           opacity, color, np.arange(m, dtype=np.int64),
                           radius)


def random_scene(rng, count, w=32, h=32, opacity_range=(0.05, 0.95)):
    mean2d = np.column_stack([rng.uniform(-2, w + 2, count),
                              rng.uniform(-2, h + 2, count)])
    cov2d = np.zeros((count, 2, 2))
    for i in range(count):
        a = rng.uniform(0.4, 6.0)
        c = rng.uniform(0.4, 6.0)
        b = rng.uniform(-0.8, 0.8) * np.sqrt(a * c)
        cov2d[i] = [[a + 0.3, b], [b, c + 0.3]]
    depth = np.sort(rng.uniform(2.0, 30.0, count))
    opacity = rng.uniform(*opacity_range, count)
    color = rng.uniform(0, 1, (count, 3))
    return make_prims(mean2d, depth, opacity, color, cov2d)


class TestCullAndProject:
    def setup_method(self):
        self.cam = camera()
        self.rng = np.random.default_rng(21)

    def attrs(self, positions):
        n = len(positions)
        q = np.zeros((n, 4))
        q[:, 0] = 1.0
        return (np.asarray(positions, dtype=np.float64), q,
                np.full((n, 3), 0.3), np.full(n, 0.8),
                np.full((n, 3), 0.5))

    def test_behind_camera_culled(self):
        prims, _ = cull_and_project(*self.attrs([[0, 0, -5.0], [0, 0, 10.0]]),
                                    self.cam)
        assert prims.count == 1
        assert prims.source_index[0] == 1

    def test_depth_sorted_ascending(self):
        prims, _ = cull_and_project(*self.attrs([[0, 0, 5.0], [0, 0, 3.0]]),
                                    self.cam)
        np.testing.assert_array_equal(prims.depth_z, [3.0, 5.0])
        np.testing.assert_array_equal(prims.source_index, [1, 0])

    def test_equal_depth_tie_break_by_index(self):
        pos = [[0.5, 0, 7.0]] * 8
        prims, _ = cull_and_project(*self.attrs(pos), self.cam)
        np.testing.assert_array_equal(prims.source_index, np.arange(8))

    def test_offscreen_extent_culled(self):
        prims, _ = cull_and_project(
            *self.attrs([[100.0, 0, 5.0], [0, 0, 5.0]]), self.cam)
        assert prims.count == 1

    def test_matches_scalar_projection(self):
        from dynsplat.core import build_covariance, project_covariance
        rng = self.rng
        n = 12
        pos = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n),
                               rng.uniform(4, 20, n)])
        q = rng.normal(size=(n, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        scales = rng.uniform(0.1, 0.6, (n, 3))
        prims, _ = cull_and_project(pos, q, scales, np.full(n, 0.5),
                                    np.full((n, 3), 0.5), self.cam)
        for k in range(prims.count):
            i = prims.source_index[k]
            expected = project_covariance(
                build_covariance(q[i], scales[i]), self.cam, pos[i])
            np.testing.assert_allclose(prims.cov2d[k], expected, atol=1e-12)


class TestRasterizeClosedForms:
    def setup_method(self):
        self.cam = camera(16, 16)

    def test_single_opaque_primitive_clamped(self):
        # opacity 1 at its own center: alpha clamps to 0.99.
        prims = make_prims([[8.5, 8.5]], [5.0], [1.0], [[0.8, 0.6, 0.4]])
        out = rasterize(prims, self.cam)
        assert out.alpha[8, 8] == pytest.approx(0.99, abs=1e-15)
        np.testing.assert_allclose(out.color[8, 8],
                                   0.99 * np.array([0.8, 0.6, 0.4]),
                                   atol=1e-15)
        assert out.depth[8, 8] == pytest.approx(0.99 * 5.0, abs=1e-12)

    def test_two_primitive_compositing(self):
        # alpha 0.6 in front, 0.5 behind: C = 0.6 c1 + 0.4*0.5 c2.
        c1 = np.array([1.0, 0.0, 0.2])
        c2 = np.array([0.0, 1.0, 0.6])
        prims = make_prims([[8.5, 8.5], [8.5, 8.5]], [3.0, 5.0], [0.6, 0.5],
                           [c1, c2])
        out = rasterize(prims, self.cam)
        np.testing.assert_allclose(out.color[8, 8], 0.6 * c1 + 0.2 * c2,
                                   atol=1e-12)
        assert out.depth[8, 8] == pytest.approx(0.6 * 3.0 + 0.2 * 5.0,
                                                abs=1e-12)
        assert out.alpha[8, 8] == pytest.approx(0.8, abs=1e-12)

    def test_empty_scene(self):
        out = rasterize(SplatPrimitives.empty(), self.cam)
        assert not out.color.any()
        assert not out.depth.any()
        assert not out.alpha.any()

    def test_weight_sum_equals_alpha(self):
        rng = np.random.default_rng(3)
        prims = random_scene(rng, 20, 16, 16)
        out = rasterize(prims, self.cam)
        # Independent accumulation of compositing weights per pixel.
        wsum = np.zeros((16, 16))
        trans = np.ones((16, 16))
        for k in range(prims.count):
            a, b, c = prims.conic[k]
            yy, xx = np.mgrid[0:16, 0:16]
            du = xx + 0.5 - prims.mean2d[k, 0]
            dv = yy + 0.5 - prims.mean2d[k, 1]
            power = -0.5 * (a * du * du + c * dv * dv) - b * du * dv
            alpha = np.minimum(prims.opacity[k] * np.exp(power), 0.99)
            use = (power >= -4.5) & (alpha >= 1.0 / 255.0) & (trans >= 1e-6)
            w = np.where(use, alpha * trans, 0.0)
            wsum += w
            trans = np.where(use, trans * (1 - alpha), trans)
        np.testing.assert_allclose(out.alpha, wsum, atol=1e-12)

    def test_uncovered_pixels_flagged(self):
        prims = make_prims([[2.5, 2.5]], [5.0], [0.9], [[1, 1, 1]],
                           cov2d=[[[0.5, 0], [0, 0.5]]])
        out = rasterize(prims, self.cam)
        assert not out.covered[15, 15]
        assert out.depth[15, 15] == 0.0
        assert out.covered[2, 2]


class TestRasterizeVsReference:
    def test_agreement_on_random_scenes(self):
        rng = np.random.default_rng(42)
        cam = camera()
        worst = 0.0
        for _ in range(25):
            prims = random_scene(rng, int(rng.integers(1, 64)))
            out = rasterize(prims, cam)
            ref = reference_render(prims, cam)
            worst = max(worst,
                        float(np.abs(out.color - ref.color).max()),
                        float(np.abs(out.depth - ref.depth).max()
                              / max(prims.depth_z.max(), 1.0)))
            np.testing.assert_allclose(out.color, ref.color, atol=1e-5)
            np.testing.assert_allclose(out.alpha, ref.alpha, atol=1e-5)
        assert worst <= 1e-5

    def test_bitwise_equal_when_early_stop_inert(self):
        rng = np.random.default_rng(11)
        cam = camera()
        prims = random_scene(rng, 30, opacity_range=(0.05, 0.5))
        out = rasterize(prims, cam)
        ref = reference_render(prims, cam)
        assert (1.0 - out.alpha).min() > 1e-4   # early stop inert
        np.testing.assert_array_equal(out.color, ref.color)
        np.testing.assert_array_equal(out.depth, ref.depth)
        np.testing.assert_array_equal(out.alpha, ref.alpha)

    def test_bitwise_identical_across_thread_counts(self):
        rng = np.random.default_rng(17)
        cam = camera(48, 40)
        prims = random_scene(rng, 50, 48, 40)
        out1 = rasterize(prims, cam, threads=1)
        out4 = rasterize(prims, cam, threads=4)
        np.testing.assert_array_equal(out1.color, out4.color)
        np.testing.assert_array_equal(out1.depth, out4.depth)
        g_color = rng.normal(size=(40, 48, 3))
        g_depth = rng.normal(size=(40, 48))
        b1 = rasterize_backward(out1.compositing_state, g_color, g_depth,
                                threads=1)
        b4 = rasterize_backward(out4.compositing_state, g_color, g_depth,
                                threads=4)
        for field in ("mean2d", "cov2d", "opacity", "color", "depth_z"):
            np.testing.assert_array_equal(getattr(b1, field),
                                          getattr(b4, field))

    def test_splat_straddling_image_edge(self):
        cam = camera()
        prims = make_prims([[0.2, 31.5]], [4.0], [0.9], [[0.2, 0.9, 0.4]],
                           cov2d=[[[6.0, 1.0], [1.0, 4.0]]])
        out = rasterize(prims, cam)
        ref = reference_render(prims, cam)
        np.testing.assert_array_equal(out.color, ref.color)


class TestRasterizeBackward:
    def setup_method(self):
        self.cam = camera(16, 16)

    def test_zero_upstream_zero_grads(self):
        prims = random_scene(np.random.default_rng(0), 10, 16, 16)
        out = rasterize(prims, self.cam)
        g = rasterize_backward(out.compositing_state, np.zeros((16, 16, 3)),
                               np.zeros((16, 16)))
        for field in ("mean2d", "cov2d", "opacity", "color", "depth_z"):
            assert not getattr(g, field).any()

    def test_single_primitive_color_grad_is_alpha(self):
        prims = make_prims([[8.5, 8.5]], [5.0], [0.7], [[0.5, 0.5, 0.5]])
        out = rasterize(prims, self.cam)
        grad_color = np.zeros((16, 16, 3))
        grad_color[8, 8, 0] = 1.0
        g = rasterize_backward(out.compositing_state, grad_color,
                               np.zeros((16, 16)))
        assert g.color[0, 0] == out.alpha[8, 8]   # exactly alpha at the peak
        assert g.color[0, 1] == 0.0

    def test_wrong_state_rejected(self):
        prims = random_scene(np.random.default_rng(0), 4, 16, 16)
        out = rasterize(prims, self.cam)
        with pytest.raises(InvalidStateError):
            rasterize_backward(None, np.zeros((16, 16, 3)), np.zeros((16, 16)))
        with pytest.raises(InvalidStateError):
            rasterize_backward(out.compositing_state, np.zeros((8, 8, 3)),
                               np.zeros((8, 8)))

    def test_splat_field_gradients_match_fd(self):
        rng = np.random.default_rng(5)
        cam = camera(20, 20)
        base = random_scene(rng, 8, 20, 20, opacity_range=(0.1, 0.85))
        g_color = rng.normal(size=(20, 20, 3))
        g_depth = rng.normal(size=(20, 20))

        def objective(prims):
            out = rasterize(prims, cam)
            return float(np.sum(out.color * g_color)
                         + np.sum(out.depth * g_depth))

        def rebuild(mean2d, cov2d, depth, opacity, color):
            return make_prims(mean2d, depth, opacity, color, cov2d)

        out = rasterize(base, cam)
        g = rasterize_backward(out.compositing_state, g_color, g_depth)
        h = 1e-5

        def fd(pack, unpack):
            x0 = pack.copy()
            grad = np.zeros_like(x0)
            it = np.nditer(x0, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                for sign in (1, -1):
                    x = x0.copy()
                    x[idx] += sign * h
                    val = objective(unpack(x))
                    grad[idx] += sign * val / (2 * h)
                it.iternext()
            return grad

        fd_mean = fd(base.mean2d, lambda x: rebuild(
            x, base.cov2d, base.depth_z, base.opacity, base.color))
        np.testing.assert_allclose(g.mean2d, fd_mean, rtol=2e-5, atol=1e-7)

        fd_op = fd(base.opacity, lambda x: rebuild(
            base.mean2d, base.cov2d, base.depth_z, x, base.color))
        np.testing.assert_allclose(g.opacity, fd_op, rtol=2e-5, atol=1e-7)

        fd_col = fd(base.color, lambda x: rebuild(
            base.mean2d, base.cov2d, base.depth_z, base.opacity, x))
        np.testing.assert_allclose(g.color, fd_col, rtol=2e-5, atol=1e-7)

        fd_z = fd(base.depth_z, lambda x: rebuild(
            base.mean2d, base.cov2d, x, base.opacity, base.color))
        np.testing.assert_allclose(g.depth_z, fd_z, rtol=2e-5, atol=1e-7)

        # cov2d: perturb symmetric pairs together; analytic off-diagonal
        # gradient is then g[0,1] + g[1,0].
        for k in range(base.count):
            for (i, j) in ((0, 0), (1, 1), (0, 1)):
                cov = base.cov2d.copy()
                covm = base.cov2d.copy()
                cov[k, i, j] += h
                covm[k, i, j] -= h
                if i != j:
                    cov[k, j, i] += h
                    covm[k, j, i] -= h
                val = (objective(rebuild(base.mean2d, cov, base.depth_z,
                                         base.opacity, base.color))
                       - objective(rebuild(base.mean2d, covm, base.depth_z,
                                           base.opacity, base.color))) / (2 * h)
                analytic = g.cov2d[k, i, j] if i == j \
                    else g.cov2d[k, 0, 1] + g.cov2d[k, 1, 0]
                assert analytic == pytest.approx(val, rel=2e-5, abs=1e-7)


class TestDepthIntegration:
    def test_opaque_slab_depth(self):
        # A fronto-parallel slab of overlapping splats should composite to
        # a depth within 2% of the slab's z on covered pixels.
        cam = camera(32, 32)
        z = 10.0
        n_side = 12
        g = np.linspace(-3.0, 3.0, n_side)
        xs, ys = np.meshgrid(g, g)
        pos = np.column_stack([xs.ravel(), ys.ravel(),
                               np.full(n_side * n_side, z)])
        n = pos.shape[0]
        q = np.zeros((n, 4))
        q[:, 0] = 1.0
        scales = np.full((n, 3), 0.5)
        prims, _ = cull_and_project(pos, q, scales, np.full(n, 0.95),
                                    np.full((n, 3), 0.6), cam)
        out = rasterize(prims, cam)
        solid = out.alpha > 0.99
        assert solid.sum() > 100
        mean_err = np.abs(out.depth[solid] - z).mean()
        assert mean_err <= 0.02 * z


class TestProjectionBackward:
    def test_full_chain_matches_fd(self):
        rng = np.random.default_rng(23)
        cam = camera()
        n = 5
        pos = np.column_stack([rng.uniform(-1.5, 1.5, n),
                               rng.uniform(-1.5, 1.5, n),
                               rng.uniform(5, 15, n)])
        q = rng.normal(size=(n, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        scales = rng.uniform(0.1, 0.5, (n, 3))
        opac = rng.uniform(0.2, 0.9, n)
        colors = rng.uniform(0, 1, (n, 3))
        g_color = rng.normal(size=(32, 32, 3))
        g_depth = rng.normal(size=(32, 32))

        def objective(pos_, q_, scales_, opac_, colors_):
            prims, _ = cull_and_project(pos_, q_, scales_, opac_, colors_, cam)
            out = rasterize(prims, cam)
            return float(np.sum(out.color * g_color)
                         + np.sum(out.depth * g_depth))

        prims, cache = cull_and_project(pos, q, scales, opac, colors, cam)
        out = rasterize(prims, cam)
        sg = rasterize_backward(out.compositing_state, g_color, g_depth)
        ag = projection_backward(cache, sg)

        h = 1e-6
        for arr, grad in ((pos, ag.positions), (scales, ag.scales),
                          (opac, ag.opacities), (colors, ag.colors)):
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                fp = objective(pos, q, scales, opac, colors)
                arr[idx] = orig - h
                fm = objective(pos, q, scales, opac, colors)
                arr[idx] = orig
                fd = (fp - fm) / (2 * h)
                assert grad[idx] == pytest.approx(fd, rel=1e-4, abs=1e-6)
                it.iternext()
