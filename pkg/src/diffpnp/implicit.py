"""Input gradients of the PnP solve via implicit differentiation.

The solver output is a stationary point of the reprojection objective, so
the gradient of the objective w.r.t. the pose vanishes there. That
stationarity condition, viewed as an equation f(inputs, pose) = 0, defines
the solver output as an implicit function of its inputs; differentiating it
gives exact Jacobians of the solved pose w.r.t. the 2D points, the 3D
points, and the intrinsics, at the cost of one 6x6 factorization instead of
thousands of re-solves.

`fd_jacobian_oracle` implements the central-difference alternative (two
warm-started re-solves per input coordinate); it exists to verify the
implicit path, not to replace it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import SingularStationaryHessian
from .geometry import (
    Correspondences,
    Intrinsics,
    Pose,
    as_points_2d,
    as_points_3d,
    project_with_jets,
)
from .solver import PnPSolution, SolverConfig, solve_pnp

# Condition-number gate on the stationarity Hessian. Beyond this the
# stationary point is numerically non-isolated and gradients are garbage;
# fail loudly instead of returning them.
COND_MAX = 1e12

_POSE_DIM = 6


@dataclass(frozen=True)
class ConstraintJacobians:
    """Partial derivatives of the stationarity constraint f (shape (6,))."""

    df_dy: np.ndarray  # (6, 6), symmetric: Hessian of the objective w.r.t. pose
    df_dx: np.ndarray  # (6, 2n)
    df_dz: np.ndarray  # (6, 3n)
    df_dK: np.ndarray  # (6, 4) w.r.t. (fx, fy, cx, cy)


@dataclass(frozen=True)
class SolutionJacobians:
    """Jacobians of the solved pose w.r.t. each solver input."""

    dg_dx: np.ndarray  # (6, 2n)
    dg_dz: np.ndarray  # (6, 3n)
    dg_dK: np.ndarray  # (6, 4)
    conditioning: float  # condition number of df_dy


@dataclass(frozen=True)
class GradientBundle:
    """Input gradients pulled back from an upstream pose gradient."""

    grad_x: np.ndarray  # (2n,)
    grad_z: np.ndarray  # (3n,)
    grad_K: np.ndarray  # (4,)
    conditioning: float


def constraint_f(x2d, pose: Pose, pts3d, intrinsics: Intrinsics) -> np.ndarray:
    """Gradient of the reprojection objective w.r.t. the pose, shape (6,).

    Zero exactly at a stationary point of the PnP objective; this is the
    constraint whose implicit differentiation yields the solver Jacobians.
    """
    x = as_points_2d(x2d).reshape(-1)
    jet = project_with_jets(as_points_3d(pts3d), pose, intrinsics)
    r = x - jet.pi
    return -2.0 * (jet.d_pose.T @ r)


def constraint_jacobians(
    x2d, pose: Pose, pts3d, intrinsics: Intrinsics
) -> ConstraintJacobians:
    """Exact Jacobians of the stationarity constraint w.r.t. all variables.

    df_dy is the objective Hessian w.r.t. the pose and is symmetric up to
    rounding. The second-order projection terms come from forward-mode
    jets; everything is closed-form exact, no numerical differentiation.
    """
    x = as_points_2d(x2d).reshape(-1)
    pts = as_points_3d(pts3d)
    n = pts.shape[0]
    jet = project_with_jets(pts, pose, intrinsics, second_order=True)
    r = x - jet.pi
    r_blocks = r.reshape(n, 2)

    J = jet.d_pose  # (2n, 6)
    J_blocks = J.reshape(n, 2, _POSE_DIM)
    hess = jet.hess  # (n, 2, 13, 13)
    h_yy = hess[:, :, 0:6, 0:6]
    h_yz = hess[:, :, 0:6, 6:9]
    h_yk = hess[:, :, 0:6, 9:13]

    df_dy = 2.0 * (J.T @ J) - 2.0 * np.einsum(
        "np,npab->ab", r_blocks, h_yy, optimize=True
    )
    df_dx = -2.0 * J.T

    t1 = np.einsum("npc,npj->njc", jet.point_blocks, J_blocks, optimize=True)
    t2 = np.einsum("np,npjc->njc", r_blocks, h_yz, optimize=True)
    df_dz = 2.0 * (t1 - t2).transpose(1, 0, 2).reshape(_POSE_DIM, 3 * n)

    t1k = np.einsum("npc,npj->jc", jet.d_intrinsics.reshape(n, 2, 4), J_blocks)
    t2k = np.einsum("np,npjc->jc", r_blocks, h_yk)
    df_dK = 2.0 * (t1k - t2k)

    return ConstraintJacobians(df_dy=df_dy, df_dx=df_dx, df_dz=df_dz, df_dK=df_dK)


def implicit_jacobians(
    jac: ConstraintJacobians, cond_max: float = COND_MAX
) -> SolutionJacobians:
    """Solver Jacobians from the constraint Jacobians.

    Solves df_dy @ dg_input = -df_input for each input as one LDL^T-factored
    linear system with stacked right-hand sides; the matrix is never
    inverted explicitly.

    Raises:
        SingularStationaryHessian: if cond(df_dy) exceeds `cond_max`,
            signalling a degenerate or non-isolated minimum.
    """
    cond = float(np.linalg.cond(jac.df_dy))
    if not np.isfinite(cond) or cond > cond_max:
        raise SingularStationaryHessian(cond, cond_max)

    rhs = -np.concatenate([jac.df_dx, jac.df_dz, jac.df_dK], axis=1)
    sol = scipy.linalg.solve(jac.df_dy, rhs, assume_a="sym")
    nx = jac.df_dx.shape[1]
    nz = jac.df_dz.shape[1]
    return SolutionJacobians(
        dg_dx=sol[:, :nx],
        dg_dz=sol[:, nx : nx + nz],
        dg_dK=sol[:, nx + nz :],
        conditioning=cond,
    )


def backward(jacs: SolutionJacobians, grad_y) -> GradientBundle:
    """Pull an upstream pose gradient back to the solver inputs."""
    gy = np.asarray(grad_y, dtype=np.float64).reshape(_POSE_DIM)
    return GradientBundle(
        grad_x=jacs.dg_dx.T @ gy,
        grad_z=jacs.dg_dz.T @ gy,
        grad_K=jacs.dg_dK.T @ gy,
        conditioning=jacs.conditioning,
    )


def solution_jacobians(
    corrs: Correspondences,
    intrinsics: Intrinsics,
    solution: PnPSolution,
    cond_max: float = COND_MAX,
) -> SolutionJacobians:
    """Implicit Jacobians at a converged solver output.

    Refuses non-converged solutions: the stationarity premise does not hold
    there and the resulting gradients would be meaningless.
    """
    if not solution.converged:
        raise ValueError(
            "backward pass requires a converged solution; "
            f"stationarity norm is {solution.stationarity_norm:.3e}"
        )
    jac = constraint_jacobians(corrs.x2d, solution.pose, corrs.pts3d, intrinsics)
    return implicit_jacobians(jac, cond_max)


def input_gradients(
    corrs: Correspondences,
    intrinsics: Intrinsics,
    solution: PnPSolution,
    grad_y,
    cond_max: float = COND_MAX,
) -> GradientBundle:
    """One-call backward pass: upstream pose gradient to input gradients."""
    return backward(solution_jacobians(corrs, intrinsics, solution, cond_max), grad_y)


_INPUT_ALIASES = {
    "x2d": "x2d",
    "x": "x2d",
    "pts3d": "pts3d",
    "z": "pts3d",
    "intrinsics": "intrinsics",
    "k": "intrinsics",
}


@dataclass(frozen=True)
class FdJacobian:
    """Central-difference Jacobian of the solver output plus its cost."""

    which_input: str
    jacobian: np.ndarray  # (6, dim)
    solver_calls: int


def fd_jacobian_oracle(
    corrs: Correspondences,
    intrinsics: Intrinsics,
    base_solution: PnPSolution,
    which_input: str,
    step: float = 1e-5,
    cfg: SolverConfig | None = None,
) -> FdJacobian:
    """Numeric solver Jacobian by central differences over one input.

    Every perturbed problem is re-solved warm-started from the base pose so
    all solves track the same local minimum; this costs exactly two solver
    calls per input coordinate. Solver failures propagate.
    """
    if not base_solution.converged:
        raise ValueError("FD oracle requires a converged base solution")
    key = _INPUT_ALIASES.get(which_input.lower())
    if key is None:
        raise ValueError(f"unknown input {which_input!r}; use x2d, pts3d or intrinsics")

    cfg = cfg or SolverConfig()
    base_pose = base_solution.pose
    x0 = corrs.x2d.copy()
    z0 = corrs.pts3d.copy()
    k0 = intrinsics.params

    calls = 0

    def solve_at(vec: np.ndarray) -> np.ndarray:
        nonlocal calls
        calls += 1
        if key == "x2d":
            c, K = Correspondences(vec, z0), intrinsics
        elif key == "pts3d":
            c, K = Correspondences(x0, vec), intrinsics
        else:
            c, K = corrs, Intrinsics.from_params(vec)
        return solve_pnp(c, K, init=base_pose, cfg=cfg).pose.vector

    target = {"x2d": x0, "pts3d": z0, "intrinsics": k0}[key]
    dim = target.size
    jacobian = np.empty((_POSE_DIM, dim))
    for d in range(dim):
        plus = target.copy()
        plus[d] += step
        minus = target.copy()
        minus[d] -= step
        jacobian[:, d] = (solve_at(plus) - solve_at(minus)) / (2.0 * step)

    return FdJacobian(which_input=key, jacobian=jacobian, solver_calls=calls)


def max_relative_error(candidate: np.ndarray, reference: np.ndarray) -> float:
    """Largest absolute deviation, normalized by the reference's own scale."""
    ref_scale = max(float(np.abs(reference).max()), 1e-300)
    return float(np.abs(candidate - reference).max()) / ref_scale
