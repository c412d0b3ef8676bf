"""End-to-end training loops that differentiate through the PnP solve.

Three tasks share the same skeleton: a parameter provider emits the learned
quantity, a warm-started PnP solve turns it into poses, a task loss is
evaluated, and its gradient is chained through the solver's implicit
Jacobians back to the provider parameters, which take a plain gradient
descent step. The per-epoch forward-and-gradient computations are exposed
as `pose_epoch`, `sfm_epoch` and `calib_epoch` so they can be checked
against end-to-end finite differences; the `run_*` drivers wrap them in the
descent loop. Solver or backward failures abort the loop and are recorded
on the returned trace together with everything computed so far.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DiffPnPError, NumericalFailure
from ..geometry import Correspondences, Intrinsics, Pose
from ..implicit import backward, solution_jacobians
from ..solver import PnPSolution, RansacConfig, SolverConfig, solve_pnp
from .losses import FrameError, calib_loss, pose_loss, sfm_loss
from .providers import DirectProvider, MlpProvider, SigmoidBoxProvider
from .synthetic import SfmProblem, SyntheticScene, rng_stream


@dataclass(frozen=True)
class TrainConfig:
    """Gradient-descent settings shared by the three task drivers.

    The default update is plain `theta -= step_size * grad`. Setting
    `optimizer="adam"` switches to moment-normalized steps, needed where
    the gradient magnitude spans many orders along the trajectory (the
    calibration task; see README).
    """

    step_size: float
    lambda_reg: float = 1.0
    max_epochs: int = 2000
    rel_tol: float = 1e-9  # relative loss change that counts as converged
    patience: int = 10  # epochs the change must stay below rel_tol
    target_loss: float = 0.0  # absolute early stop; 0 disables
    optimizer: str = "gd"  # "gd" or "adam"
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0.0:
            raise ValueError("step_size must be positive")
        if self.lambda_reg < 0.0:
            raise ValueError("lambda_reg must be >= 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class _Update:
    """Parameter update rule selected by TrainConfig.optimizer."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m = None
        self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        if self.cfg.optimizer == "gd":
            theta -= self.cfg.step_size * grad
            return
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.m = b1 * self.m + (1.0 - b1) * grad
        self.v = b2 * self.v + (1.0 - b2) * grad * grad
        m_hat = self.m / (1.0 - b1**self.t)
        v_hat = self.v / (1.0 - b2**self.t)
        theta -= self.cfg.step_size * m_hat / (np.sqrt(v_hat) + eps)


class _Stopper:
    """Flat-loss detector: relative change below rel_tol for `patience` epochs."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.history: list[float] = []

    def update(self, loss: float) -> bool:
        self.history.append(loss)
        if self.cfg.target_loss > 0.0 and loss <= self.cfg.target_loss:
            return True
        p = self.cfg.patience
        if len(self.history) <= p:
            return False
        ref = self.history[-p - 1]
        return abs(loss - ref) <= self.cfg.rel_tol * max(abs(ref), 1e-30)


def _solve_tracked(
    corrs: Correspondences,
    intrinsics: Intrinsics,
    warm: Pose,
    solver_cfg: SolverConfig,
    ransac_cfg: RansacConfig,
) -> PnPSolution:
    """Warm-started solve with cold RANSAC restarts if the warm basin stalls.

    Restarts use fresh (deterministically derived) RANSAC seeds and a larger
    iteration budget: the point of a restart is a different basin, which a
    re-run with the identical hypothesis set cannot provide.
    """
    sol = solve_pnp(corrs, intrinsics, init=warm, cfg=solver_cfg, ransac_cfg=ransac_cfg)
    retry_cfg = SolverConfig(
        max_iters=3 * solver_cfg.max_iters,
        grad_tol=solver_cfg.grad_tol,
        step_tol=solver_cfg.step_tol,
        lambda_init=solver_cfg.lambda_init,
        lambda_up=solver_cfg.lambda_up,
        lambda_down=solver_cfg.lambda_down,
    )
    for bump in (1, 2):
        if sol.converged:
            return sol
        fresh = RansacConfig(
            iterations=ransac_cfg.iterations,
            inlier_threshold=ransac_cfg.inlier_threshold,
            sample_size=ransac_cfg.sample_size,
            seed=ransac_cfg.seed + bump,
        )
        sol = solve_pnp(corrs, intrinsics, init=None, cfg=retry_cfg, ransac_cfg=fresh)
    if not sol.converged:
        raise NumericalFailure(
            f"PnP did not converge (stationarity {sol.stationarity_norm:.3e})"
        )
    return sol


# One-epoch computations. Each returns the loss, the full gradient w.r.t.
# the provider parameters (both the direct loss path and the implicit path
# through the solved poses), and the solver output(s) for warm-starting.


def pose_epoch(
    provider,
    target_pose: Pose,
    pts3d: np.ndarray,
    intrinsics: Intrinsics,
    lambda_reg: float,
    warm_pose: Pose,
    solver_cfg: SolverConfig,
    ransac_cfg: RansacConfig,
):
    x = provider.forward()
    corrs = Correspondences(x, pts3d)
    sol = _solve_tracked(corrs, intrinsics, warm_pose, solver_cfg, ransac_cfg)
    loss = pose_loss(x, sol.pose, pts3d, intrinsics, target_pose, lambda_reg)
    jacs = solution_jacobians(corrs, intrinsics, sol)
    grad_x_total = loss.grad_x + backward(jacs, loss.grad_pose).grad_x
    return loss.value, provider.backward(grad_x_total), sol, x


def sfm_epoch(
    provider,
    problem: SfmProblem,
    solver_cfg: SolverConfig,
    ransac_cfg: RansacConfig,
):
    """One reconstruction epoch; updates `problem.poses` in place."""
    z = provider.forward()
    n = problem.n_points
    pts = z.reshape(n, 3)
    solutions = []
    for j, obs in enumerate(problem.observations):
        try:
            corrs = Correspondences(obs.x2d, pts[obs.indices])
            sol = _solve_tracked(
                corrs, problem.intrinsics, problem.poses[j], solver_cfg, ransac_cfg
            )
        except (DiffPnPError, ValueError) as e:
            raise FrameError(j, e) from e
        problem.poses[j] = sol.pose
        solutions.append((corrs, sol))

    loss = sfm_loss(problem, pts)
    grad_z = np.zeros(3 * n)
    for j, obs in enumerate(problem.observations):
        corrs, sol = solutions[j]
        try:
            jacs = solution_jacobians(corrs, problem.intrinsics, sol)
        except DiffPnPError as e:
            raise FrameError(j, e) from e
        frame_grad = loss.grad_z_frames[j] + backward(jacs, loss.grad_pose_frames[j]).grad_z
        flat_idx = (3 * obs.indices[:, None] + np.arange(3)).reshape(-1)
        np.add.at(grad_z, flat_idx, frame_grad)
    return loss.value, provider.backward(grad_z), pts


def calib_epoch(
    provider,
    corrs: Correspondences,
    warm_pose: Pose,
    solver_cfg: SolverConfig,
    ransac_cfg: RansacConfig,
):
    params = provider.forward()
    intrinsics = Intrinsics.from_params(params)
    sol = _solve_tracked(corrs, intrinsics, warm_pose, solver_cfg, ransac_cfg)
    loss = calib_loss(corrs.x2d, corrs.pts3d, sol.pose, intrinsics)
    jacs = solution_jacobians(corrs, intrinsics, sol)
    grad_k_total = loss.grad_K + backward(jacs, loss.grad_pose).grad_K
    return loss.value, provider.backward(grad_k_total), sol, params


@dataclass
class PoseEpochRecord:
    epoch: int
    loss: float
    pose: np.ndarray  # solved pose 6-vector
    x2d: np.ndarray  # provider output at this epoch, flat (2n,)


@dataclass
class PoseTrace:
    records: list = field(default_factory=list)
    converged: bool = False
    failure: str | None = None

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss

    @property
    def final_pose(self) -> Pose:
        return Pose.from_vector(self.records[-1].pose)

    @property
    def final_x2d(self) -> np.ndarray:
        return self.records[-1].x2d


def run_pose_estimation(
    provider,
    target_pose: Pose,
    pts3d: np.ndarray,
    intrinsics: Intrinsics,
    cfg: TrainConfig,
    solver_cfg: SolverConfig | None = None,
) -> PoseTrace:
    """Learn 2D keypoints whose PnP pose matches a target pose."""
    solver_cfg = solver_cfg or SolverConfig()
    ransac_cfg = RansacConfig(seed=cfg.seed)
    trace = PoseTrace()
    stop = _Stopper(cfg)
    update = _Update(cfg)
    pose = Pose.identity()
    for epoch in range(cfg.max_epochs):
        try:
            loss_value, grad_theta, sol, x = pose_epoch(
                provider, target_pose, pts3d, intrinsics, cfg.lambda_reg,
                pose, solver_cfg, ransac_cfg,
            )
        except (DiffPnPError, ValueError) as e:
            trace.failure = f"epoch {epoch}: {e}"
            return trace
        pose = sol.pose
        trace.records.append(
            PoseEpochRecord(epoch=epoch, loss=loss_value, pose=pose.vector.copy(), x2d=x)
        )
        if stop.update(loss_value):
            trace.converged = True
            return trace
        update.step(provider.theta, grad_theta)
    return trace


@dataclass
class SfmTrace:
    losses: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # (epoch, (n, 3) structure copy)
    final_structure: np.ndarray | None = None
    converged: bool = False
    failure: str | None = None

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def run_sfm(
    provider,
    problem: SfmProblem,
    cfg: TrainConfig,
    solver_cfg: SolverConfig | None = None,
    snapshot_stride: int = 0,
) -> SfmTrace:
    """Recover 3D structure from multi-frame 2D tracks with known intrinsics.

    Per epoch: the provider emits the global structure, every frame's pose
    is re-solved warm-started from the previous epoch, and the summed
    reprojection loss is backpropagated through all per-frame solves into
    the structure parameters. `problem.poses` is updated in place.
    """
    solver_cfg = solver_cfg or SolverConfig()
    ransac_cfg = RansacConfig(seed=cfg.seed)
    trace = SfmTrace()
    stop = _Stopper(cfg)
    update = _Update(cfg)
    for epoch in range(cfg.max_epochs):
        try:
            loss_value, grad_theta, pts = sfm_epoch(provider, problem, solver_cfg, ransac_cfg)
        except DiffPnPError as e:
            trace.failure = f"epoch {epoch}: {e}"
            return trace
        trace.losses.append(loss_value)
        if snapshot_stride > 0 and epoch % snapshot_stride == 0:
            trace.snapshots.append((epoch, pts.copy()))
        if stop.update(loss_value):
            trace.converged = True
            break
        update.step(provider.theta, grad_theta)
    trace.final_structure = provider.forward().reshape(problem.n_points, 3)
    return trace


@dataclass
class CalibEpochRecord:
    epoch: int
    loss: float
    params: np.ndarray  # (fx, fy, cx, cy)


@dataclass
class CalibTrace:
    records: list = field(default_factory=list)
    converged: bool = False
    failure: str | None = None

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss

    @property
    def final_params(self) -> np.ndarray:
        return self.records[-1].params


def run_calibration(
    provider,
    corrs: Correspondences,
    cfg: TrainConfig,
    solver_cfg: SolverConfig | None = None,
) -> CalibTrace:
    """Learn pinhole intrinsics from fixed 2D-3D correspondences.

    The provider output is bounded (sigmoid-scaled), the pose is re-solved
    per epoch under the current intrinsics guess, and the reprojection loss
    gradient reaches the provider both directly and through the solved
    pose's sensitivity to the intrinsics.
    """
    solver_cfg = solver_cfg or SolverConfig()
    ransac_cfg = RansacConfig(seed=cfg.seed)
    trace = CalibTrace()
    stop = _Stopper(cfg)
    update = _Update(cfg)
    pose = Pose.identity()
    for epoch in range(cfg.max_epochs):
        try:
            loss_value, grad_theta, sol, params = calib_epoch(
                provider, corrs, pose, solver_cfg, ransac_cfg
            )
        except (DiffPnPError, ValueError) as e:
            trace.failure = f"epoch {epoch}: {e}"
            return trace
        pose = sol.pose
        trace.records.append(
            CalibEpochRecord(epoch=epoch, loss=loss_value, params=params.copy())
        )
        if stop.update(loss_value):
            trace.converged = True
            return trace
        update.step(provider.theta, grad_theta)
    return trace


# Initialization helpers matching each task's shipped setup.


def keypoint_provider(scene: SyntheticScene, seed: int, spread: float = 30.0):
    """Direct keypoint parameters: true projections plus uniform pixel noise."""
    clean = scene.clean_projection(0)
    jitter = rng_stream(seed, "init").uniform(-spread, spread, size=clean.size)
    return DirectProvider(clean + jitter)


def mlp_keypoint_provider(scene: SyntheticScene, seed: int, hidden=(32, 32)):
    """MLP keypoint provider whose initial output spreads around the image center."""
    n = scene.frames[0].count
    provider = MlpProvider(output_dim=2 * n, hidden=hidden, seed=seed)
    rng = rng_stream(seed, "init")
    center = np.tile([scene.intrinsics.cx, scene.intrinsics.cy], n)
    _set_output_bias(provider, center + rng.uniform(-100.0, 100.0, size=2 * n))
    return provider


def structure_provider(n_points: int, seed: int, std: float = 0.5):
    """Direct structure parameters: a random Gaussian cloud of unit scale."""
    theta0 = rng_stream(seed, "init").normal(0.0, std, size=3 * n_points)
    return DirectProvider(theta0)


def mlp_structure_provider(n_points: int, seed: int, hidden=(64, 64), std: float = 0.5):
    provider = MlpProvider(output_dim=3 * n_points, hidden=hidden, seed=seed)
    rng = rng_stream(seed, "init")
    _set_output_bias(provider, rng.normal(0.0, std, size=3 * n_points))
    return provider


def calibration_provider(seed: int, scale: float = 1000.0):
    """Sigmoid-bounded intrinsics provider with standard-normal parameters."""
    return SigmoidBoxProvider(rng_stream(seed, "init").normal(size=4), scale=scale)


def _set_output_bias(provider: MlpProvider, bias: np.ndarray) -> None:
    """Rescale the output layer so the initial output equals `bias` plus a
    small weight-driven term (keeps gradients alive without swamping the
    intended starting point)."""
    out_w, in_w = provider.shapes[-1]
    end = provider.theta.size
    provider.theta[end - out_w :] = bias
    provider.theta[end - out_w - out_w * in_w : end - out_w] *= 0.01
