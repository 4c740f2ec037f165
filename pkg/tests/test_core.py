"""Closed-form checks of the core Gaussian math.

Expected values are hand-computed or produced by independent numpy
oracles (direct matrix products, eigenvalue checks).
"""

import numpy as np
import pytest

from dynsplat.core import (CameraModel, DegenerateCovarianceError,
                           InvalidInputError, build_covariance,
                           evaluate_gaussian, project_covariance,
                           projection_jacobian, quat_normalize,
                           quat_to_rotation, quat_to_rotation_grad)

RT2 = np.sqrt(2.0) / 2.0


def random_unit_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


class TestBuildCovariance:
    def test_identity_rotation_diagonal(self):
        cov = build_covariance((1, 0, 0, 0), (1, 2, 3))
        np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 9.0]), atol=1e-14)

    def test_z_rotation_90_degrees(self):
        # R_z(90) @ diag(1,4,1) @ R_z(90)^T swaps the x/y variances.
        cov = build_covariance((RT2, 0, 0, RT2), (1, 2, 1))
        np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_matches_direct_matrix_product(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            q = random_unit_quat(rng)
            s = rng.uniform(0.2, 3.0, 3)
            R = quat_to_rotation(q)
            expected = R @ np.diag(s) @ np.diag(s).T @ R.T
            np.testing.assert_allclose(build_covariance(q, s), expected,
                                       atol=1e-12)

    def test_symmetric_psd_on_random_inputs(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            cov = build_covariance(random_unit_quat(rng),
                                   rng.uniform(0.1, 5.0, 3))
            np.testing.assert_allclose(cov, cov.T, atol=1e-12)
            assert np.linalg.eigvalsh(cov).min() >= -1e-9

    def test_quaternion_sign_invariance(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            q = random_unit_quat(rng)
            s = rng.uniform(0.2, 2.0, 3)
            np.testing.assert_array_equal(build_covariance(q, s),
                                          build_covariance(-q, s))

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            build_covariance((np.nan, 0, 0, 0), (1, 1, 1))
        with pytest.raises(InvalidInputError):
            build_covariance((1, 0, 0, 0), (1, np.inf, 1))

    def test_non_positive_scale_rejected(self):
        with pytest.raises(InvalidInputError):
            build_covariance((1, 0, 0, 0), (1, 0.0, 1))


class TestEvaluateGaussian:
    def test_at_center_is_one(self):
        assert evaluate_gaussian((1, 2, 3), np.eye(3), (1, 2, 3)) == 1.0

    def test_unit_cov_unit_offset(self):
        val = evaluate_gaussian((0, 0, 0), np.eye(3), (1, 0, 0))
        assert val == pytest.approx(np.exp(-0.5), rel=1e-12)

    def test_anisotropic_mahalanobis_one(self):
        val = evaluate_gaussian((0, 0, 0), np.diag([4.0, 1, 1]), (2, 0, 0))
        assert val == pytest.approx(np.exp(-0.5), rel=1e-12)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        cov = build_covariance(random_unit_quat(rng), rng.uniform(0.5, 2, 3))
        d = rng.normal(size=3)
        base = evaluate_gaussian(np.zeros(3), cov, d)
        for _ in range(10):
            R = quat_to_rotation(random_unit_quat(rng))
            rotated = evaluate_gaussian(np.zeros(3), R @ cov @ R.T, R @ d)
            assert rotated == pytest.approx(base, rel=1e-10)

    def test_singular_covariance_raises(self):
        with pytest.raises(DegenerateCovarianceError):
            evaluate_gaussian((0, 0, 0), np.diag([1.0, 1.0, 0.0]), (1, 1, 1))

    def test_ill_conditioned_raises(self):
        with pytest.raises(DegenerateCovarianceError):
            evaluate_gaussian((0, 0, 0), np.diag([1e13, 1.0, 1.0]), (1, 0, 0))


def default_camera(**kw):
    args = dict(fx=50.0, fy=50.0, cx=16.0, cy=16.0, width=32, height=32,
                near=0.1, far=100.0)
    args.update(kw)
    return CameraModel(**args)


class TestProjectCovariance:
    def test_isotropic_on_axis(self):
        # J = [[f/z, 0, 0], [0, f/z, 0]] at the optical axis, so an
        # isotropic s^2 I maps to (f s / z)^2 I before the floor.
        f, s, z = 50.0, 0.7, 7.0
        cam = default_camera(fx=f, fy=f)
        cov2d = project_covariance(s * s * np.eye(3), cam, (0, 0, z))
        expected = (f * s / z) ** 2 * np.eye(2) + 0.3 * np.eye(2)
        np.testing.assert_allclose(cov2d, expected, atol=1e-12)

    def test_doubling_depth_quarters_variance(self):
        cam = default_camera()
        s2 = 0.25
        near_cov = project_covariance(s2 * np.eye(3), cam, (0, 0, 5.0))
        far_cov = project_covariance(s2 * np.eye(3), cam, (0, 0, 10.0))
        pre_near = near_cov - 0.3 * np.eye(2)
        pre_far = far_cov - 0.3 * np.eye(2)
        np.testing.assert_allclose(pre_far, pre_near / 4.0, atol=1e-12)

    def test_zero_covariance_gives_floor(self):
        cam = default_camera()
        np.testing.assert_allclose(
            project_covariance(np.zeros((3, 3)), cam, (0, 0, 5.0)),
            0.3 * np.eye(2), atol=1e-15)

    def test_behind_camera_returns_none(self):
        cam = default_camera()
        assert project_covariance(np.eye(3), cam, (0, 0, -1.0)) is None
        assert project_covariance(np.eye(3), cam, (0, 0, 0.05)) is None

    def test_result_positive_definite(self):
        rng = np.random.default_rng(9)
        cam = default_camera()
        for _ in range(50):
            cov = build_covariance(random_unit_quat(rng),
                                   rng.uniform(0.05, 2.0, 3))
            pos = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2),
                            rng.uniform(2, 30)])
            cov2d = project_covariance(cov, cam, pos)
            assert np.linalg.eigvalsh(cov2d).min() >= 0.3 - 1e-12

    def test_nontrivial_extrinsics_match_manual_chain(self):
        angle = 0.3
        c, s = np.cos(angle), np.sin(angle)
        extr = np.array([[c, -s, 0, 0.5], [s, c, 0, -0.2],
                         [0, 0, 1, 1.0], [0, 0, 0, 1]])
        cam = default_camera(extrinsics=extr)
        cov = np.diag([0.4, 0.2, 0.3])
        pos = np.array([0.3, -0.4, 8.0])
        p_cam = extr[:3, :3] @ pos + extr[:3, 3]
        J = projection_jacobian(p_cam[None], cam.fx, cam.fy)[0]
        W = extr[:3, :3]
        expected = J @ W @ cov @ W.T @ J.T + 0.3 * np.eye(2)
        np.testing.assert_allclose(project_covariance(cov, cam, pos),
                                   expected, atol=1e-12)


class TestQuaternionHelpers:
    def test_rotation_grad_matches_fd(self):
        rng = np.random.default_rng(13)
        q = random_unit_quat(rng)
        upstream = rng.normal(size=(3, 3))
        grad = quat_to_rotation_grad(q[None], upstream[None])[0]
        h = 1e-7
        for k in range(4):
            dq = np.zeros(4)
            dq[k] = h
            fd = (np.sum(quat_to_rotation(q + dq) * upstream)
                  - np.sum(quat_to_rotation(q - dq) * upstream)) / (2 * h)
            assert grad[k] == pytest.approx(fd, rel=1e-6, abs=1e-8)

    def test_normalize_zero_raises(self):
        with pytest.raises(InvalidInputError):
            quat_normalize(np.zeros(4))


class TestCameraModel:
    def test_invariant_validation(self):
        with pytest.raises(InvalidInputError):
            default_camera(fx=-1.0)
        with pytest.raises(InvalidInputError):
            default_camera(cx=40.0)
        with pytest.raises(InvalidInputError):
            default_camera(near=5.0, far=2.0)
        bad = np.eye(4)
        bad[0, 1] = 0.2
        with pytest.raises(InvalidInputError):
            default_camera(extrinsics=bad)

    def test_world_camera_round_trip(self):
        angle = 0.7
        c, s = np.cos(angle), np.sin(angle)
        extr = np.array([[1, 0, 0, 0.3], [0, c, -s, 0.1],
                         [0, s, c, -2.0], [0, 0, 0, 1]])
        cam = default_camera(extrinsics=extr)
        pts = np.random.default_rng(0).normal(size=(10, 3))
        back = cam.camera_to_world(cam.world_to_camera(pts))
        np.testing.assert_allclose(back, pts, atol=1e-12)
