"""diffpnp: a differentiable Perspective-n-Point solver.

The forward pass estimates a 6DOF camera pose from 2D-3D correspondences by
Levenberg-Marquardt (RANSAC-initialized when no pose is supplied). The
backward pass differentiates the solve exactly, via implicit
differentiation of the stationarity condition, yielding gradients of the
pose w.r.t. the 2D points, the 3D points, and the intrinsics. On top sit
three end-to-end learning tasks (pose estimation, small-scale structure
from motion, camera calibration) and a finite-difference oracle that
verifies every gradient the library produces.
"""

from . import tasks
from .errors import (
    Degenerate,
    DiffPnPError,
    GenerationFailed,
    NoHypothesisFound,
    NotARotation,
    NumericalFailure,
    PointBehindCamera,
    SingularStationaryHessian,
)
from .geometry import (
    DEPTH_EPSILON,
    Correspondences,
    Intrinsics,
    Pose,
    ProjectionJet,
    log_rotation,
    objective,
    project,
    project_with_jets,
    residuals,
    rodrigues,
)
from .implicit import (
    COND_MAX,
    ConstraintJacobians,
    FdJacobian,
    GradientBundle,
    SolutionJacobians,
    backward,
    constraint_f,
    constraint_jacobians,
    fd_jacobian_oracle,
    implicit_jacobians,
    input_gradients,
    max_relative_error,
    solution_jacobians,
)
from .solver import (
    PnPSolution,
    RansacConfig,
    SolverConfig,
    inlier_mask,
    minimal_solve,
    ransac_init,
    reprojection_distances,
    solve_pnp,
)

__version__ = "0.1.0"

__all__ = [
    "COND_MAX",
    "DEPTH_EPSILON",
    "ConstraintJacobians",
    "Correspondences",
    "Degenerate",
    "DiffPnPError",
    "FdJacobian",
    "GenerationFailed",
    "GradientBundle",
    "Intrinsics",
    "NoHypothesisFound",
    "NotARotation",
    "NumericalFailure",
    "PnPSolution",
    "PointBehindCamera",
    "Pose",
    "ProjectionJet",
    "RansacConfig",
    "SingularStationaryHessian",
    "SolutionJacobians",
    "SolverConfig",
    "backward",
    "constraint_f",
    "constraint_jacobians",
    "fd_jacobian_oracle",
    "implicit_jacobians",
    "inlier_mask",
    "input_gradients",
    "log_rotation",
    "max_relative_error",
    "minimal_solve",
    "objective",
    "project",
    "project_with_jets",
    "ransac_init",
    "reprojection_distances",
    "residuals",
    "rodrigues",
    "solution_jacobians",
    "solve_pnp",
    "tasks",
    "__version__",
]
