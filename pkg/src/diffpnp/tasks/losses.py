"""Task losses with exact gradients w.r.t. their upstream quantities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DiffPnPError
from ..geometry import (
    Intrinsics,
    Pose,
    as_points_2d,
    as_points_3d,
    project,
    project_with_jets,
)


class FrameError(DiffPnPError):
    """A per-frame failure inside a multi-frame computation."""

    def __init__(self, frame: int, cause: Exception):
        self.frame = int(frame)
        super().__init__(f"frame {self.frame}: {cause}")


@dataclass(frozen=True)
class PoseLossValue:
    value: float
    grad_x: np.ndarray  # (2n,)
    grad_pose: np.ndarray  # (6,)


def pose_loss(
    x2d,
    pose: Pose,
    pts3d,
    intrinsics: Intrinsics,
    target_pose: Pose,
    lambda_reg: float,
) -> PoseLossValue:
    """Squared distance between current and target reprojections, plus a
    keypoint-anchoring term.

    loss = ||pi(z|pose) - pi(z|target)||^2 + lambda * ||x - pi(z|pose)||^2

    The first term only constrains the pose; the anchoring term is what
    ties the keypoints x to the projection (with lambda = 0 they are free
    to drift). Returns exact partials w.r.t. x and the pose.
    """
    x = as_points_2d(x2d).reshape(-1)
    pts = as_points_3d(pts3d)
    jet = project_with_jets(pts, pose, intrinsics)
    pi_target = project(pts, target_pose, intrinsics)

    d_pose_term = jet.pi - pi_target
    anchor = x - jet.pi
    value = float(d_pose_term @ d_pose_term) + lambda_reg * float(anchor @ anchor)

    grad_x = 2.0 * lambda_reg * anchor
    grad_pose = 2.0 * (jet.d_pose.T @ d_pose_term) - 2.0 * lambda_reg * (
        jet.d_pose.T @ anchor
    )
    return PoseLossValue(value=value, grad_x=grad_x, grad_pose=grad_pose)


@dataclass(frozen=True)
class SfmLossValue:
    value: float
    grad_z_frames: tuple  # per frame, (3k_j,) w.r.t. the frame's visible points
    grad_pose_frames: tuple  # per frame, (6,)


def sfm_loss(problem, pts3d) -> SfmLossValue:
    """Total squared reprojection error across all frames.

    Gradients are returned per frame, w.r.t. that frame's selected 3D
    points and its pose; the caller scatters them into global storage.

    Raises:
        FrameError: projection failed in some frame (carries the index).
    """
    pts = as_points_3d(pts3d)
    total = 0.0
    grad_z = []
    grad_pose = []
    for j, obs in enumerate(problem.observations):
        try:
            jet = project_with_jets(pts[obs.indices], problem.poses[j], problem.intrinsics)
        except DiffPnPError as e:
            raise FrameError(j, e) from e
        r = obs.x2d - jet.pi
        total += float(r @ r)
        k = obs.indices.size
        grad_z.append(
            -2.0 * np.einsum("npc,np->nc", jet.point_blocks, r.reshape(k, 2)).reshape(-1)
        )
        grad_pose.append(-2.0 * (jet.d_pose.T @ r))
    return SfmLossValue(
        value=total, grad_z_frames=tuple(grad_z), grad_pose_frames=tuple(grad_pose)
    )


@dataclass(frozen=True)
class CalibLossValue:
    value: float
    grad_K: np.ndarray  # (4,) w.r.t. (fx, fy, cx, cy)
    grad_pose: np.ndarray  # (6,)


def calib_loss(x2d, pts3d, pose: Pose, intrinsics: Intrinsics) -> CalibLossValue:
    """Squared reprojection error with exact partials w.r.t. intrinsics and pose."""
    x = as_points_2d(x2d).reshape(-1)
    jet = project_with_jets(as_points_3d(pts3d), pose, intrinsics)
    r = x - jet.pi
    return CalibLossValue(
        value=float(r @ r),
        grad_K=-2.0 * (jet.d_intrinsics.T @ r),
        grad_pose=-2.0 * (jet.d_pose.T @ r),
    )
