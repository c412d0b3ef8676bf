"""Geometry tests: rotations, projection, and derivative exactness."""

import numpy as np
import pytest

from diffpnp.errors import NotARotation, PointBehindCamera
from diffpnp.geometry import (
    Correspondences,
    Intrinsics,
    Pose,
    log_rotation,
    objective,
    project,
    project_with_jets,
    residuals,
    rodrigues,
)
from helpers import DEFAULT_K, central_diff_jacobian, random_instance, rel_err


class TestRotations:
    def test_zero_vector_gives_identity(self):
        assert np.array_equal(rodrigues(np.zeros(3)), np.eye(3))

    def test_half_turn_about_x(self):
        assert np.allclose(rodrigues([np.pi, 0, 0]), np.diag([1.0, -1.0, -1.0]), atol=1e-12)

    def test_output_is_special_orthogonal(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            R = rodrigues(rng.normal(size=3))
            assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12
            assert abs(np.linalg.det(R) - 1.0) < 1e-12

    def test_round_trip_1000_samples(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            v = rng.normal(size=3)
            v = v / np.linalg.norm(v) * rng.uniform(1e-6, np.pi - 1e-3)
            w = log_rotation(rodrigues(v))
            assert np.abs(w - v).max() < 1e-10

    def test_log_identity(self):
        assert np.array_equal(log_rotation(np.eye(3)), np.zeros(3))

    def test_log_half_turn_sign_convention(self):
        # At exactly pi the axis sign is ambiguous; the convention makes the
        # largest-magnitude component positive.
        v = log_rotation(np.diag([1.0, -1.0, -1.0]))
        assert np.allclose(v, [np.pi, 0.0, 0.0], atol=1e-12)

    def test_log_near_pi_branch(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            v = axis * (np.pi - 10 ** rng.uniform(-9, -4))
            w = log_rotation(rodrigues(v))
            assert np.abs(w - v).max() < 1e-8
            assert np.abs(rodrigues(w) - rodrigues(v)).max() < 1e-8

    def test_rejects_non_orthogonal(self):
        with pytest.raises(NotARotation):
            log_rotation(np.eye(3) + 1e-3)

    def test_rejects_reflection(self):
        with pytest.raises(NotARotation):
            log_rotation(np.diag([1.0, 1.0, -1.0]))

    def test_canonicalization_wraps_angle(self):
        axis = np.array([0.0, 0.6, 0.8])
        pose = Pose(axis * 5.0, np.zeros(3))  # angle 5 rad > pi
        canon = pose.canonicalized()
        assert np.linalg.norm(canon.rot) <= np.pi
        assert np.abs(canon.rotation_matrix - pose.rotation_matrix).max() < 1e-12


class TestProjection:
    def test_optical_axis_point(self):
        pi = project([[0.0, 0.0, 1.0]], Pose.identity(), Intrinsics(1, 1, 0, 0))
        assert np.array_equal(pi, [0.0, 0.0])

    def test_pinhole_formula(self):
        pi = project([[1.0, 2.0, 2.0]], Pose.identity(), DEFAULT_K)
        assert np.allclose(pi, [800.0, 1000.0])

    def test_point_behind_camera(self):
        with pytest.raises(PointBehindCamera) as ei:
            project([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]], Pose.identity(), DEFAULT_K)
        assert ei.value.index == 1

    def test_world_to_camera_consistency(self):
        corrs, pose = random_instance(10, seed=3)
        pts = corrs.points3d
        cam_pts = pts @ pose.rotation_matrix.T + pose.trans
        a = project(pts, pose, DEFAULT_K)
        b = project(cam_pts, Pose.identity(), DEFAULT_K)
        assert np.abs(a - b).max() < 1e-9

    def test_residual_sign_convention(self):
        corrs, pose = random_instance(6, seed=5)
        x = corrs.points2d.copy()
        x[2] += [1.0, 0.0]
        r = residuals(x, corrs.points3d, pose, DEFAULT_K)
        assert np.allclose(r[4:6], [1.0, 0.0], atol=1e-9)
        assert abs(objective(x, corrs.points3d, pose, DEFAULT_K) - 1.0) < 1e-9

    def test_zero_residual_at_exact_projection(self):
        corrs, pose = random_instance(8, seed=9)
        r = residuals(corrs.x2d, corrs.pts3d, pose, DEFAULT_K)
        assert np.abs(r).max() == 0.0

    def test_objective_matches_per_point_sum(self):
        corrs, pose = random_instance(15, seed=11, noise=2.0)
        o = objective(corrs.x2d, corrs.pts3d, pose, DEFAULT_K)
        pi = project(corrs.pts3d, pose, DEFAULT_K).reshape(-1, 2)
        brute = sum(float(np.sum((xi - pii) ** 2)) for xi, pii in zip(corrs.points2d, pi))
        assert abs(o - brute) < 1e-9 * max(1.0, brute)


class TestCorrespondences:
    def test_requires_four_points(self):
        with pytest.raises(ValueError):
            Correspondences(np.zeros(6), np.zeros(9))

    def test_rejects_count_mismatch(self):
        with pytest.raises(ValueError):
            Correspondences(np.zeros(8), np.zeros(9))

    def test_rejects_non_finite(self):
        x = np.zeros(8)
        x[0] = np.nan
        with pytest.raises(ValueError):
            Correspondences(x, np.zeros(12))

    def test_accepts_stacked_shapes(self):
        c = Correspondences(np.zeros((4, 2)), np.arange(12.0).reshape(4, 3))
        assert c.n == 4
        assert c.x2d.shape == (8,)
        assert c.pts3d.shape == (12,)


def _projection_of_all_inputs(pts_count):
    """project(...) as a function of one flat vector [pose, points, intrinsics]."""

    def fun(vec):
        pose = Pose.from_vector(vec[:6])
        pts = vec[6 : 6 + 3 * pts_count].reshape(pts_count, 3)
        intr = Intrinsics.from_params(vec[6 + 3 * pts_count :])
        return project(pts, pose, intr)

    return fun


class TestProjectionJets:
    def test_pi_field_equals_project(self):
        corrs, pose = random_instance(8, seed=1)
        jet = project_with_jets(corrs.pts3d, pose, DEFAULT_K)
        assert np.array_equal(jet.pi, project(corrs.pts3d, pose, DEFAULT_K))

    def test_principal_point_column_is_constant(self):
        corrs, pose = random_instance(8, seed=2)
        jet = project_with_jets(corrs.pts3d, pose, DEFAULT_K)
        d_cx = jet.d_intrinsics[:, 2]
        d_cy = jet.d_intrinsics[:, 3]
        assert np.array_equal(d_cx, np.tile([1.0, 0.0], 8))
        assert np.array_equal(d_cy, np.tile([0.0, 1.0], 8))

    def test_point_jacobian_is_block_sparse(self):
        corrs, pose = random_instance(5, seed=3)
        jet = project_with_jets(corrs.pts3d, pose, DEFAULT_K)
        dense = jet.d_points
        assert dense.shape == (10, 15)
        for i in range(5):
            block = dense[2 * i : 2 * i + 2, 3 * i : 3 * i + 3]
            assert np.abs(block).max() > 0.0
            outside = dense[2 * i : 2 * i + 2].copy()
            outside[:, 3 * i : 3 * i + 3] = 0.0
            assert np.abs(outside).max() == 0.0

    @pytest.mark.parametrize("n", [4, 8, 50])
    def test_first_order_matches_fd(self, n):
        # 100 seeded instances total across the parametrized sizes.
        for seed in range(34 if n != 50 else 32):
            corrs, pose = random_instance(n, seed=1000 + seed)
            jet = project_with_jets(corrs.pts3d, pose, DEFAULT_K)
            vec = np.concatenate([pose.vector, corrs.pts3d, DEFAULT_K.params])
            step = 1e-6 * max(1.0, float(np.linalg.norm(pose.vector)))
            fd = central_diff_jacobian(_projection_of_all_inputs(n), vec, step)
            assert rel_err(jet.d_pose, fd[:, :6]) < 1e-5
            assert rel_err(jet.d_points, fd[:, 6 : 6 + 3 * n]) < 1e-4
            assert rel_err(jet.d_intrinsics, fd[:, 6 + 3 * n :]) < 1e-6

    @pytest.mark.parametrize("n", [4, 8, 50])
    def test_second_order_matches_fd(self, n):
        rng = np.random.default_rng(99)
        fun_all = _projection_of_all_inputs(n)
        for seed in range(10):
            corrs, pose = random_instance(n, seed=2000 + seed)
            jet = project_with_jets(corrs.pts3d, pose, DEFAULT_K, second_order=True)
            vec = np.concatenate([pose.vector, corrs.pts3d, DEFAULT_K.params])
            for _ in range(3):
                d = rng.normal(size=vec.size)
                d /= np.linalg.norm(d)
                got = jet.second_directional_derivative(
                    d[:6], d[6 : 6 + 3 * n], d[6 + 3 * n :]
                )
                h = 1e-4
                fd = (fun_all(vec + h * d) - 2.0 * fun_all(vec) + fun_all(vec - h * d)) / h**2
                assert rel_err(got, fd) < 1e-4

    def test_first_directional_derivative(self):
        n = 6
        corrs, pose = random_instance(n, seed=4)
        jet = project_with_jets(corrs.pts3d, pose, DEFAULT_K)
        rng = np.random.default_rng(5)
        d = rng.normal(size=6 + 3 * n + 4)
        got = jet.directional_derivative(d[:6], d[6 : 6 + 3 * n], d[6 + 3 * n :])
        vec = np.concatenate([pose.vector, corrs.pts3d, DEFAULT_K.params])
        fun = _projection_of_all_inputs(n)
        fd = (fun(vec + 1e-6 * d) - fun(vec - 1e-6 * d)) / 2e-6
        assert rel_err(got, fd) < 1e-6

    def test_second_order_gradients_match_closed_form(self):
        # The jet machinery and the closed-form first-order path are
        # independent; their agreement is machine-precision tight.
        from diffpnp.geometry import _second_order_hessians  # noqa: PLC2701

        corrs, pose = random_instance(7, seed=8)
        jet = project_with_jets(corrs.pts3d, pose, DEFAULT_K, second_order=True)
        hess = jet.hess
        assert hess.shape == (7, 2, 13, 13)
        # Hessian symmetry per output coordinate.
        assert np.abs(hess - hess.transpose(0, 1, 3, 2)).max() < 1e-10

    def test_second_directional_requires_flag(self):
        corrs, pose = random_instance(4, seed=6)
        jet = project_with_jets(corrs.pts3d, pose, DEFAULT_K)
        with pytest.raises(ValueError):
            jet.second_directional_derivative(np.zeros(6), np.zeros(12), np.zeros(4))
