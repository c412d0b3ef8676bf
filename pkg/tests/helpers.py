"""Shared test utilities: random instances and finite-difference oracles."""

from __future__ import annotations

import numpy as np

from diffpnp.geometry import Correspondences, Intrinsics, Pose, project

DEFAULT_K = Intrinsics(800.0, 700.0, 400.0, 300.0)


def random_instance(n: int, seed: int, noise: float = 0.0, intrinsics=DEFAULT_K):
    """Random pose/points/observations with all points well in front.

    Returns (correspondences, true_pose). The rotation angle stays inside
    (0.1, 2.2) so axis-angle round trips are far from the branch points.
    """
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.5, 0.5, size=(n, 3))
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rot = axis * rng.uniform(0.1, 2.2)
    trans = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(3.0, 8.0)])
    pose = Pose(rot, trans)
    x2d = project(pts, pose, intrinsics)
    if noise > 0.0:
        x2d = x2d + noise * rng.normal(size=x2d.size)
    return Correspondences(x2d, pts), pose


def central_diff_jacobian(fun, x0: np.ndarray, step: float) -> np.ndarray:
    """Dense central-difference Jacobian of fun: R^d -> R^m at x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    f0 = np.atleast_1d(fun(x0))
    jac = np.zeros((f0.size, x0.size))
    for j in range(x0.size):
        xp = x0.copy()
        xp[j] += step
        xm = x0.copy()
        xm[j] -= step
        jac[:, j] = (np.atleast_1d(fun(xp)) - np.atleast_1d(fun(xm))) / (2.0 * step)
    return jac


def central_diff_gradient(fun, x0: np.ndarray, step: float) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    return central_diff_jacobian(lambda x: np.array([fun(x)]), x0, step)[0]


def rel_err(candidate, reference) -> float:
    """Max abs deviation normalized by the reference's max abs entry."""
    reference = np.asarray(reference, dtype=np.float64)
    scale = max(float(np.abs(reference).max()), 1e-300)
    return float(np.abs(np.asarray(candidate) - reference).max()) / scale
