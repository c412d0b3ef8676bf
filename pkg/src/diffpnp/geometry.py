"""Camera geometry: rotations, pinhole projection, and exact derivatives.

Conventions used throughout the library:

* A pose is world-to-camera: ``p_cam = R @ p_world + t`` with ``R`` built
  from an axis-angle 3-vector (unit axis scaled by the angle in radians).
* The flat pose vector is ``y = [rot, trans]`` with m = 6 entries.
* Projected points are flat arrays ``[u1, v1, u2, v2, ...]`` of length 2n.
* Intrinsics are the four pinhole parameters (fx, fy, cx, cy).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import NotARotation, PointBehindCamera
from .jets import Jet2, cubic_ratio, sin_ratio, versine_ratio

# Minimum admissible camera-frame depth. Projection is undefined at Z = 0; a
# hard error beats silent NaN propagation.
DEPTH_EPSILON = 1e-8

# Below this distance from an angle of pi, log_rotation switches to the
# diagonal-pivot branch (the sin-based axis formula loses all digits there).
_PI_BRANCH = 1e-6

_ORTHO_TOL = 1e-8

# Ambient variable layout of second-order projection jets:
# [rot(3), trans(3), own 3D point(3), fx, fy, cx, cy].
JET_VARS = 13
_SL_POSE = slice(0, 6)
_SL_POINT = slice(6, 9)
_SL_INTR = slice(9, 13)


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric cross-product matrix of a 3-vector."""
    v = np.asarray(v, dtype=np.float64)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def _hat_batch(pts: np.ndarray) -> np.ndarray:
    """hat() applied to each row of an (n, 3) array, giving (n, 3, 3)."""
    n = pts.shape[0]
    out = np.zeros((n, 3, 3))
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    out[:, 0, 1] = -z
    out[:, 0, 2] = y
    out[:, 1, 0] = z
    out[:, 1, 2] = -x
    out[:, 2, 0] = -y
    out[:, 2, 1] = x
    return out


def rodrigues(rot: np.ndarray) -> np.ndarray:
    """Rotation matrix of an axis-angle vector (SO(3) exponential)."""
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape != (3,) or not np.all(np.isfinite(rot)):
        raise ValueError(f"axis-angle vector must be a finite 3-vector, got {rot!r}")
    q = float(rot @ rot)
    a = sin_ratio(q)[0]
    b = versine_ratio(q)[0]
    w = hat(rot)
    return np.eye(3) + a * w + b * (w @ w)


def right_jacobian(rot: np.ndarray) -> np.ndarray:
    """Right Jacobian of the SO(3) exponential at `rot`.

    Satisfies rodrigues(rot + d) ~= rodrigues(rot) @ rodrigues(J_r @ d) for
    small d, which is what turns derivatives in the tangent space into
    derivatives with respect to the axis-angle coordinates.
    """
    rot = np.asarray(rot, dtype=np.float64)
    q = float(rot @ rot)
    b = versine_ratio(q)[0]
    c = cubic_ratio(q)
    w = hat(rot)
    return np.eye(3) - b * w + c * (w @ w)


def log_rotation(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, with angle in [0, pi].

    Near an angle of pi the axis is recovered from the largest diagonal
    entry of (R + I)/2 instead of the vanishing antisymmetric part. At
    exactly pi the axis sign is ambiguous (both represent the same
    rotation); the convention here makes the largest-magnitude axis
    component positive.

    Raises:
        NotARotation: if R fails the orthogonality or determinant check.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise NotARotation(f"expected a 3x3 matrix, got shape {R.shape}")
    if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
        raise NotARotation("matrix is not orthogonal within 1e-8")
    if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
        raise NotARotation("determinant is not +1 within 1e-8")

    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(vee)  # |sin(angle)|
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arctan2(s, c))

    if angle < np.pi - _PI_BRANCH:
        if angle < 1e-6:
            return vee * (1.0 + angle * angle / 6.0)
        return vee * (angle / s)

    # Angle at or near pi: the symmetric part of R is
    # cos(a) I + (1 - cos(a)) axis axis^T, so subtracting the cosine leaves a
    # clean rank-one copy of axis axis^T; pivot on its largest diagonal.
    M = 0.5 * (R + R.T) - c * np.eye(3)
    k = int(np.argmax(np.diag(M)))
    axis = M[:, k] / np.sqrt(M[k, k] * (1.0 - c))
    axis = axis / np.linalg.norm(axis)
    if s > 1e-12:
        if float(axis @ vee) < 0.0:
            axis = -axis
    else:
        j = int(np.argmax(np.abs(axis)))
        if axis[j] < 0.0:
            axis = -axis
    return angle * axis


@dataclass(frozen=True)
class Pose:
    """SE(3) camera pose: axis-angle rotation plus translation."""

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rot, dtype=np.float64).reshape(3)
        trans = np.asarray(self.trans, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("pose components must be finite")
        object.__setattr__(self, "rot", rot)
        object.__setattr__(self, "trans", trans)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, y: np.ndarray) -> "Pose":
        y = np.asarray(y, dtype=np.float64).reshape(6)
        return cls(y[:3], y[3:])

    @property
    def vector(self) -> np.ndarray:
        """Flat 6-vector [rot, trans]."""
        return np.concatenate([self.rot, self.trans])

    @property
    def rotation_matrix(self) -> np.ndarray:
        return rodrigues(self.rot)

    def canonicalized(self) -> "Pose":
        """Equivalent pose with rotation angle wrapped into [0, pi]."""
        angle = float(np.linalg.norm(self.rot))
        if angle == 0.0:
            return self
        wrapped = angle % (2.0 * np.pi)
        if wrapped <= np.pi:
            scale = wrapped / angle
        else:
            scale = (wrapped - 2.0 * np.pi) / angle
        return Pose(self.rot * scale, self.trans)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("intrinsics must be finite")
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def from_params(cls, params: np.ndarray) -> "Intrinsics":
        fx, fy, cx, cy = np.asarray(params, dtype=np.float64).reshape(4)
        return cls(fx, fy, cx, cy)

    @property
    def params(self) -> np.ndarray:
        """Free parameters as [fx, fy, cx, cy]."""
        return np.array([self.fx, self.fy, self.cx, self.cy])

    @property
    def matrix(self) -> np.ndarray:
        """Upper-triangular 3x3 calibration matrix."""
        return np.array(
            [
                [self.fx, 0.0, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )


def as_points_2d(x2d: np.ndarray) -> np.ndarray:
    """Coerce a flat (2n,) or stacked (n, 2) array to (n, 2)."""
    x = np.asarray(x2d, dtype=np.float64)
    if x.ndim == 1:
        if x.size % 2 != 0:
            raise ValueError(f"flat 2D array must have even length, got {x.size}")
        return x.reshape(-1, 2)
    if x.ndim == 2 and x.shape[1] == 2:
        return x
    raise ValueError(f"expected (2n,) or (n, 2) array, got shape {x.shape}")


def as_points_3d(pts3d: np.ndarray) -> np.ndarray:
    """Coerce a flat (3n,) or stacked (n, 3) array to (n, 3)."""
    p = np.asarray(pts3d, dtype=np.float64)
    if p.ndim == 1:
        if p.size % 3 != 0:
            raise ValueError(f"flat 3D array must have length 3n, got {p.size}")
        return p.reshape(-1, 3)
    if p.ndim == 2 and p.shape[1] == 3:
        return p
    raise ValueError(f"expected (3n,) or (n, 3) array, got shape {p.shape}")


@dataclass(frozen=True)
class Correspondences:
    """Paired 2D observations and 3D points.

    Stored flat: x2d has length 2n, pts3d has length 3n. At least 4
    correspondences are required (fewer cannot pin down 6 pose parameters
    unambiguously).
    """

    x2d: np.ndarray
    pts3d: np.ndarray

    def __post_init__(self):
        x = as_points_2d(self.x2d)
        p = as_points_3d(self.pts3d)
        if x.shape[0] != p.shape[0]:
            raise ValueError(f"2D/3D count mismatch: {x.shape[0]} vs {p.shape[0]}")
        if x.shape[0] < 4:
            raise ValueError(f"need at least 4 correspondences, got {x.shape[0]}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(p))):
            raise ValueError("correspondences must be finite")
        object.__setattr__(self, "x2d", x.reshape(-1).copy())
        object.__setattr__(self, "pts3d", p.reshape(-1).copy())

    @property
    def n(self) -> int:
        return self.x2d.size // 2

    @property
    def points2d(self) -> np.ndarray:
        return self.x2d.reshape(-1, 2)

    @property
    def points3d(self) -> np.ndarray:
        return self.pts3d.reshape(-1, 3)

    def subset(self, indices) -> "Correspondences":
        idx = np.asarray(indices, dtype=int)
        return Correspondences(self.points2d[idx], self.points3d[idx])


def camera_points(pts3d: np.ndarray, pose: Pose) -> np.ndarray:
    """World points mapped into the camera frame, shape (n, 3)."""
    p = as_points_3d(pts3d)
    return p @ pose.rotation_matrix.T + pose.trans


def _checked_camera_points(pts3d, pose) -> np.ndarray:
    cam = camera_points(pts3d, pose)
    bad = np.flatnonzero(cam[:, 2] <= DEPTH_EPSILON)
    if bad.size:
        raise PointBehindCamera(bad[0], cam[bad[0], 2])
    return cam


def project(pts3d: np.ndarray, pose: Pose, intrinsics: Intrinsics) -> np.ndarray:
    """Pinhole projection of 3D points, flat (2n,).

    Raises:
        PointBehindCamera: if any camera-frame depth is <= DEPTH_EPSILON.
    """
    cam = _checked_camera_points(pts3d, pose)
    out = np.empty((cam.shape[0], 2))
    out[:, 0] = intrinsics.fx * cam[:, 0] / cam[:, 2] + intrinsics.cx
    out[:, 1] = intrinsics.fy * cam[:, 1] / cam[:, 2] + intrinsics.cy
    return out.reshape(-1)


def residuals(x2d, pts3d, pose: Pose, intrinsics: Intrinsics) -> np.ndarray:
    """Reprojection residuals r = x - pi, flat (2n,)."""
    x = as_points_2d(x2d).reshape(-1)
    return x - project(pts3d, pose, intrinsics)


def objective(x2d, pts3d, pose: Pose, intrinsics: Intrinsics) -> float:
    """Sum of squared reprojection residuals (pixels^2)."""
    r = residuals(x2d, pts3d, pose, intrinsics)
    return float(r @ r)


@dataclass(frozen=True)
class ProjectionJet:
    """Projection values plus their derivatives w.r.t. every input.

    First-order fields are always populated:
      pi            (2n,)   projected points
      d_pose        (2n, 6) d pi / d [rot, trans]
      point_blocks  (n, 2, 3) the only nonzero 2x3 block of d pi / d pts3d
                    per point (point i's projection depends on point i only)
      d_intrinsics  (2n, 4) d pi / d [fx, fy, cx, cy]

    `hess` holds exact second derivatives when requested: shape
    (n, 2, 13, 13), per point and output coordinate, over the ambient
    variables [rot(3), trans(3), own point(3), fx, fy, cx, cy].
    """

    pi: np.ndarray
    d_pose: np.ndarray
    point_blocks: np.ndarray
    d_intrinsics: np.ndarray
    hess: np.ndarray | None = field(default=None, repr=False)

    @cached_property
    def d_points(self) -> np.ndarray:
        """Dense (2n, 3n) Jacobian w.r.t. the flat 3D point array."""
        n = self.point_blocks.shape[0]
        out = np.zeros((2 * n, 3 * n))
        for i in range(n):
            out[2 * i : 2 * i + 2, 3 * i : 3 * i + 3] = self.point_blocks[i]
        return out

    def directional_derivative(self, d_pose_vec, d_points_vec, d_intr_vec) -> np.ndarray:
        """First derivative of pi along a combined input direction, (2n,)."""
        dy = np.asarray(d_pose_vec, dtype=np.float64).reshape(6)
        dz = as_points_3d(d_points_vec)
        dk = np.asarray(d_intr_vec, dtype=np.float64).reshape(4)
        out = self.d_pose @ dy + self.d_intrinsics @ dk
        out += np.einsum("npc,nc->np", self.point_blocks, dz).reshape(-1)
        return out

    def second_directional_derivative(
        self, d_pose_vec, d_points_vec, d_intr_vec
    ) -> np.ndarray:
        """Second derivative of pi along a combined input direction, (2n,)."""
        if self.hess is None:
            raise ValueError("second-order jets were not requested")
        dy = np.asarray(d_pose_vec, dtype=np.float64).reshape(6)
        dz = as_points_3d(d_points_vec)
        dk = np.asarray(d_intr_vec, dtype=np.float64).reshape(4)
        n = self.point_blocks.shape[0]
        dirs = np.empty((n, JET_VARS))
        dirs[:, _SL_POSE] = dy
        dirs[:, _SL_POINT] = dz
        dirs[:, _SL_INTR] = dk
        return np.einsum("na,npab,nb->np", dirs, self.hess, dirs).reshape(-1)


def _first_order_fields(pts, pose, intrinsics):
    cam = camera_points(pts, pose)
    bad = np.flatnonzero(cam[:, 2] <= DEPTH_EPSILON)
    if bad.size:
        raise PointBehindCamera(bad[0], cam[bad[0], 2])

    n = pts.shape[0]
    X, Y, Z = cam[:, 0], cam[:, 1], cam[:, 2]
    fx, fy = intrinsics.fx, intrinsics.fy
    pi = np.empty((n, 2))
    pi[:, 0] = fx * X / Z + intrinsics.cx
    pi[:, 1] = fy * Y / Z + intrinsics.cy

    # d pi / d cam, per point (n, 2, 3)
    dpi_ds = np.zeros((n, 2, 3))
    dpi_ds[:, 0, 0] = fx / Z
    dpi_ds[:, 0, 2] = -fx * X / Z**2
    dpi_ds[:, 1, 1] = fy / Z
    dpi_ds[:, 1, 2] = -fy * Y / Z**2

    R = pose.rotation_matrix
    # d cam / d rot = -R hat(z) J_r, per point
    ds_dw = -np.einsum("ab,nbc,cd->nad", R, _hat_batch(pts), right_jacobian(pose.rot))

    d_pose = np.empty((n, 2, 6))
    d_pose[:, :, :3] = dpi_ds @ ds_dw
    d_pose[:, :, 3:] = dpi_ds
    point_blocks = dpi_ds @ R

    d_intr = np.zeros((n, 2, 4))
    d_intr[:, 0, 0] = X / Z
    d_intr[:, 1, 1] = Y / Z
    d_intr[:, 0, 2] = 1.0
    d_intr[:, 1, 3] = 1.0

    return pi.reshape(-1), d_pose.reshape(2 * n, 6), point_blocks, d_intr.reshape(2 * n, 4)


def _second_order_hessians(pts, pose, intrinsics) -> np.ndarray:
    """Exact (n, 2, 13, 13) projection Hessians via forward-mode jets."""
    d = JET_VARS
    n = pts.shape[0]

    w = [Jet2.variable(pose.rot[i], i, d) for i in range(3)]
    q = w[0] * w[0] + w[1] * w[1] + w[2] * w[2]
    a = q.apply(*sin_ratio(q.val))
    b = q.apply(*versine_ratio(q.val))

    zero = Jet2.constant(0.0, d)
    W = [
        [zero, -w[2], w[1]],
        [w[2], zero, -w[0]],
        [-w[1], w[0], zero],
    ]
    W2 = [
        [sum((W[i][k] * W[k][j] for k in range(3)), start=zero) for j in range(3)]
        for i in range(3)
    ]
    R = [
        [a * W[i][j] + b * W2[i][j] + (1.0 if i == j else 0.0) for j in range(3)]
        for i in range(3)
    ]

    t = [Jet2.variable(pose.trans[i], 3 + i, d) for i in range(3)]
    z = [Jet2.variable(pts[:, k], 6 + k, d) for k in range(3)]
    s = [R[i][0] * z[0] + R[i][1] * z[1] + R[i][2] * z[2] + t[i] for i in range(3)]

    fx = Jet2.variable(intrinsics.fx, 9, d)
    fy = Jet2.variable(intrinsics.fy, 10, d)
    cx = Jet2.variable(intrinsics.cx, 11, d)
    cy = Jet2.variable(intrinsics.cy, 12, d)
    u = fx * (s[0] / s[2]) + cx
    v = fy * (s[1] / s[2]) + cy

    hess = np.empty((n, 2, d, d))
    hess[:, 0] = np.broadcast_to(u.h, (n, d, d))
    hess[:, 1] = np.broadcast_to(v.h, (n, d, d))
    return hess


def project_with_jets(
    pts3d, pose: Pose, intrinsics: Intrinsics, second_order: bool = False
) -> ProjectionJet:
    """Project points and return exact derivatives of the projection.

    First-order Jacobians come from closed forms; with ``second_order=True``
    the full per-point Hessians are computed by forward-mode jets. Both
    paths agree with central finite differences (see the test suite).

    Raises:
        PointBehindCamera: as `project`.
    """
    pts = as_points_3d(pts3d)
    pi, d_pose, point_blocks, d_intr = _first_order_fields(pts, pose, intrinsics)
    hess = _second_order_hessians(pts, pose, intrinsics) if second_order else None
    return ProjectionJet(pi, d_pose, point_blocks, d_intr, hess)
