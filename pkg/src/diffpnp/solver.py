"""Pose estimation from 2D-3D correspondences.

`solve_pnp` minimizes the sum of squared reprojection errors over the 6
pose parameters with a damped Gauss-Newton (Levenberg-Marquardt) loop,
starting from a caller-provided pose or, failing that, from a RANSAC
hypothesis built on a DLT minimal solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import Degenerate, NoHypothesisFound, NumericalFailure, PointBehindCamera
from .geometry import (
    DEPTH_EPSILON,
    Correspondences,
    Intrinsics,
    Pose,
    camera_points,
    log_rotation,
    project_with_jets,
)

_LAMBDA_MAX = 1e16
_LAMBDA_MIN = 1e-15


@dataclass(frozen=True)
class SolverConfig:
    """Levenberg-Marquardt knobs.

    grad_tol bounds the infinity norm of the objective gradient w.r.t. the
    pose at an accepted solution; step_tol is the smallest accepted step
    norm before iteration stops. The damping factor is multiplied by
    lambda_up on a rejected step and by lambda_down on an accepted one.
    """

    max_iters: int = 100
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if min(self.grad_tol, self.step_tol, self.lambda_init) <= 0.0:
            raise ValueError("tolerances and lambda_init must be positive")
        if not (self.lambda_up > 1.0 > self.lambda_down > 0.0):
            raise ValueError("need lambda_up > 1 > lambda_down > 0")


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 64
    inlier_threshold: float = 2.0
    sample_size: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.sample_size < 4:
            raise ValueError("sample_size must be >= 4")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.inlier_threshold <= 0.0:
            raise ValueError("inlier_threshold must be positive")


@dataclass(frozen=True)
class PnPSolution:
    """Converged (or best-so-far) pose with solver diagnostics.

    `trace` lists the objective at the initial pose and after every
    accepted step; it is non-increasing by construction. `converged` is
    true iff the stationarity residual met grad_tol.
    """

    pose: Pose
    objective: float
    stationarity_norm: float
    iterations: int
    converged: bool
    trace: tuple = field(default=(), repr=False)


def _projection_state(x2d_flat, pts, pose, intrinsics):
    jet = project_with_jets(pts, pose, intrinsics)
    r = x2d_flat - jet.pi
    return r, jet.d_pose, float(r @ r)


def _pose_hessian(x2d_flat, pts, pose, intrinsics):
    """Exact Hessian of the reprojection objective w.r.t. the pose (6, 6)."""
    jet = project_with_jets(pts, pose, intrinsics, second_order=True)
    r = x2d_flat - jet.pi
    n = pts.shape[0]
    h_yy = jet.hess[:, :, 0:6, 0:6]
    return 2.0 * (jet.d_pose.T @ jet.d_pose) - 2.0 * np.einsum(
        "np,npab->ab", r.reshape(n, 2), h_yy
    )


def _gradient_polish(x2d_flat, pts, intrinsics, y, cfg: SolverConfig, budget: int):
    """Newton iteration on the stationarity residual.

    Descent on the objective value bottoms out once the remaining
    improvement falls below the float resolution of the objective, which
    can leave the gradient orders of magnitude above grad_tol. The gradient
    itself is free of that cancellation, so a few exact-Hessian Newton
    steps accepted on gradient-norm decrease finish the job. Pose motion
    here is at rounding scale; these steps are not recorded in the
    objective trace.
    """
    pose = Pose.from_vector(y)
    jet = project_with_jets(pts, pose, intrinsics)
    f = -2.0 * (jet.d_pose.T @ (x2d_flat - jet.pi))
    f_norm = float(np.abs(f).max())
    used = 0
    for _ in range(budget):
        if f_norm <= 0.5 * cfg.grad_tol:
            break
        used += 1
        H = _pose_hessian(x2d_flat, pts, pose, intrinsics)
        mu = 0.0
        improved = False
        for _ in range(8):
            try:
                step = np.linalg.solve(H + mu * np.eye(6), -f)
            except np.linalg.LinAlgError:
                mu = max(10.0 * mu, 1e-6 * np.abs(H).max())
                continue
            y_trial = y + step
            trial_pose = Pose.from_vector(y_trial)
            try:
                jet_t = project_with_jets(pts, trial_pose, intrinsics)
            except PointBehindCamera:
                mu = max(10.0 * mu, 1e-6 * np.abs(H).max())
                continue
            f_t = -2.0 * (jet_t.d_pose.T @ (x2d_flat - jet_t.pi))
            f_t_norm = float(np.abs(f_t).max())
            if f_t_norm < f_norm:
                y, pose, f, f_norm = y_trial, trial_pose, f_t, f_t_norm
                improved = True
                break
            mu = max(10.0 * mu, 1e-6 * np.abs(H).max())
        if not improved:
            break
    return y, f_norm, used


def _levenberg_marquardt(x2d_flat, pts, intrinsics, y0, cfg: SolverConfig):
    """Core LM loop on the 6-vector pose. The initial pose must project."""
    y = np.asarray(y0, dtype=np.float64).copy()
    r, J, obj = _projection_state(x2d_flat, pts, Pose.from_vector(y), intrinsics)
    trace = [obj]
    lam = cfg.lambda_init
    iterations = 0

    for _ in range(cfg.max_iters):
        iterations += 1
        grad = -2.0 * (J.T @ r)
        if np.abs(grad).max() <= cfg.grad_tol:
            break

        JtJ = J.T @ J
        Jtr = J.T @ r
        damp = np.maximum(np.diag(JtJ), 1e-12)

        accepted = False
        small_step = False
        while lam <= _LAMBDA_MAX:
            A = JtJ + lam * np.diag(damp)
            try:
                step = np.linalg.solve(A, Jtr)
            except np.linalg.LinAlgError:
                lam *= cfg.lambda_up
                if lam > _LAMBDA_MAX:
                    raise NumericalFailure(
                        "normal equations singular beyond damping recovery"
                    ) from None
                continue
            if not np.all(np.isfinite(step)):
                lam *= cfg.lambda_up
                if lam > _LAMBDA_MAX:
                    raise NumericalFailure("non-finite step beyond damping recovery")
                continue

            # Model reduction of the damped step; once it falls below the
            # float resolution of the objective no larger lambda can help,
            # so hand over to the gradient polish instead of churning.
            predicted = float(step @ (JtJ @ step) + 2.0 * lam * (step @ (damp * step)))
            if predicted <= 1e-14 * obj:
                break

            y_trial = y + step
            try:
                r_t, J_t, obj_t = _projection_state(
                    x2d_flat, pts, Pose.from_vector(y_trial), intrinsics
                )
            except PointBehindCamera:
                # Treat a step that pushes points behind the camera as a
                # failed step rather than a hard error.
                lam *= cfg.lambda_up
                continue

            if obj_t < obj:
                y, r, J, obj = y_trial, r_t, J_t, obj_t
                trace.append(obj)
                lam = max(lam * cfg.lambda_down, _LAMBDA_MIN)
                accepted = True
                small_step = float(np.linalg.norm(step)) < cfg.step_tol
                break
            lam *= cfg.lambda_up

        if not accepted or small_step:
            break

    grad = -2.0 * (J.T @ r)
    stationarity = float(np.abs(grad).max())
    if stationarity > cfg.grad_tol:
        # The polish has its own small budget: it is the quadratic-rate
        # finisher for exactly the cases where the descent phase ran out of
        # iterations or objective resolution.
        y, stationarity, used = _gradient_polish(
            x2d_flat, pts, intrinsics, y, cfg, budget=12
        )
        iterations += used
        r, _, obj = _projection_state(x2d_flat, pts, Pose.from_vector(y), intrinsics)

    return PnPSolution(
        pose=Pose.from_vector(y),
        objective=obj,
        stationarity_norm=stationarity,
        iterations=iterations,
        converged=stationarity <= cfg.grad_tol,
        trace=tuple(trace),
    )


def _projects_validly(pts, pose) -> bool:
    return bool(np.all(camera_points(pts, pose)[:, 2] > DEPTH_EPSILON))


def _pushed_back(pts, pose: Pose) -> Pose:
    """Retreat along the optical axis until every point is safely in front.

    A RANSAC hypothesis scored on partly wrong correspondences can leave
    some points behind the camera; moving the camera backwards preserves
    the hypothesis's image geometry approximately while making the
    projection (and hence the LM linearization) well-defined.
    """
    depths = camera_points(pts, pose)[:, 2]
    lo, hi = float(depths.min()), float(depths.max())
    if lo > DEPTH_EPSILON:
        return pose
    margin = 0.05 * max(hi - lo, 1.0)
    return Pose(pose.rot, pose.trans + np.array([0.0, 0.0, margin - lo]))


def solve_pnp(
    corrs: Correspondences,
    intrinsics: Intrinsics,
    init: Pose | None = None,
    cfg: SolverConfig | None = None,
    ransac_cfg: RansacConfig | None = None,
) -> PnPSolution:
    """Least-squares PnP by Levenberg-Marquardt.

    If `init` is omitted, or does not place every point in front of the
    camera, the initial pose comes from `ransac_init`. The returned pose is
    kept in the coordinate chart of its initialization (no re-wrapping of
    the rotation angle), so warm-started re-solves track the same local
    minimum continuously.

    Raises:
        NumericalFailure: normal equations unsalvageable by damping.
        NoHypothesisFound: RANSAC initialization was needed and failed.
    """
    cfg = cfg or SolverConfig()
    if init is None or not _projects_validly(corrs.points3d, init):
        init = _pushed_back(
            corrs.points3d, ransac_init(corrs, intrinsics, ransac_cfg or RansacConfig())
        )
    return _levenberg_marquardt(
        corrs.x2d, corrs.points3d, intrinsics, init.vector, cfg
    )


def reprojection_distances(
    corrs: Correspondences, intrinsics: Intrinsics, pose: Pose
) -> np.ndarray:
    """Per-point reprojection distance in pixels; +inf for points behind camera."""
    cam = camera_points(corrs.points3d, pose)
    dists = np.full(corrs.n, np.inf)
    ok = cam[:, 2] > DEPTH_EPSILON
    if np.any(ok):
        u = intrinsics.fx * cam[ok, 0] / cam[ok, 2] + intrinsics.cx
        v = intrinsics.fy * cam[ok, 1] / cam[ok, 2] + intrinsics.cy
        d = np.hypot(u - corrs.points2d[ok, 0], v - corrs.points2d[ok, 1])
        dists[ok] = d
    return dists


def inlier_mask(
    corrs: Correspondences, intrinsics: Intrinsics, pose: Pose, threshold: float
) -> np.ndarray:
    """Boolean inlier mask at the given reprojection threshold."""
    return reprojection_distances(corrs, intrinsics, pose) < threshold


def minimal_solve(
    sample: Correspondences, intrinsics: Intrinsics, refine_steps: int = 5
) -> list[Pose]:
    """Pose hypotheses from a minimal sample via a 12-parameter DLT.

    Needs at least 6 correspondences (the linear system for the 3x4
    projection matrix is underdetermined below that). The raw DLT pose is
    polished by a few LM steps on the sample before being returned.

    Raises:
        Degenerate: collinear 3D points or coincident 2D points.
    """
    x = sample.points2d
    P = sample.points3d
    k = sample.n
    if k < 6:
        raise Degenerate(f"DLT minimal solver needs >= 6 points, got {k}")

    # Coincident 2D points give duplicate equations and unstable fits.
    diff = x[:, None, :] - x[None, :, :]
    pair_d2 = np.square(diff).sum(-1) + np.eye(k)
    if pair_d2.min() < 1e-16:
        raise Degenerate("coincident 2D points in sample")

    centroid = P.mean(axis=0)
    centered = P - centroid
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] <= 1e-10 * max(svals[0], 1e-300):
        raise Degenerate("collinear 3D points in sample")
    scale = float(np.sqrt((centered**2).sum(-1).mean()))
    Pn = centered / scale

    # Normalized image coordinates (K^-1 applied to pixels).
    a = (x[:, 0] - intrinsics.cx) / intrinsics.fx
    b = (x[:, 1] - intrinsics.cy) / intrinsics.fy

    A = np.zeros((2 * k, 12))
    A[0::2, 0:3] = Pn
    A[0::2, 3] = 1.0
    A[0::2, 8:11] = -a[:, None] * Pn
    A[0::2, 11] = -a
    A[1::2, 4:7] = Pn
    A[1::2, 7] = 1.0
    A[1::2, 8:11] = -b[:, None] * Pn
    A[1::2, 11] = -b

    _, _, Vt = np.linalg.svd(A)
    M = Vt[-1].reshape(3, 4)

    U, S, Vt2 = np.linalg.svd(M[:, :3])
    if np.linalg.det(U @ Vt2) < 0.0:
        M = -M
        U, S, Vt2 = np.linalg.svd(M[:, :3])
    R = U @ Vt2
    alpha = float(S.mean())
    if alpha <= 0.0 or not np.all(np.isfinite(R)):
        raise Degenerate("rank-deficient DLT system")
    t = M[:, 3] * (scale / alpha) - R @ centroid

    try:
        rot = log_rotation(R)
    except Exception:
        raise Degenerate("DLT rotation factor is not a rotation") from None
    pose = Pose(rot, t).canonicalized()

    if refine_steps > 0 and _projects_validly(P, pose):
        refine_cfg = SolverConfig(max_iters=refine_steps, grad_tol=1e-12, step_tol=1e-14)
        try:
            pose = _levenberg_marquardt(
                sample.x2d, P, intrinsics, pose.vector, refine_cfg
            ).pose
        except NumericalFailure:
            pass
    return [pose]


def ransac_init(
    corrs: Correspondences, intrinsics: Intrinsics, cfg: RansacConfig | None = None
) -> Pose:
    """Best-consensus pose hypothesis from random minimal samples.

    Deterministic for a fixed seed: the iteration-to-sample mapping is drawn
    up front from a single generator, and hypotheses are scored in order.

    Raises:
        NoHypothesisFound: every sample was degenerate or produced no
            usable hypothesis.
    """
    cfg = cfg or RansacConfig()
    n = corrs.n
    if n < cfg.sample_size:
        raise ValueError(f"need at least sample_size={cfg.sample_size} points, got {n}")
    if cfg.sample_size < 6:
        raise ValueError("sample_size below 6 is unsupported by the DLT minimal solver")

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    samples = [
        rng.choice(n, size=cfg.sample_size, replace=False)
        for _ in range(cfg.iterations)
    ]

    best_pose = None
    best_count = -1
    best_err = np.inf
    for idx in samples:
        try:
            hypotheses = minimal_solve(corrs.subset(idx), intrinsics)
        except Degenerate:
            continue
        for pose in hypotheses:
            dists = reprojection_distances(corrs, intrinsics, pose)
            mask = dists < cfg.inlier_threshold
            count = int(mask.sum())
            err = float(dists[mask].sum()) if count else np.inf
            if count > best_count or (count == best_count and err < best_err):
                best_pose, best_count, best_err = pose, count, err
        if best_count == n:
            # A full-consensus hypothesis cannot be beaten on inlier count.
            break

    if best_pose is None:
        raise NoHypothesisFound(f"no usable hypothesis from {cfg.iterations} samples")
    return best_pose
