"""Synthetic scene generation for the end-to-end tasks.

Scenes are deterministic functions of a seed: a unit-diameter 3D point
cloud, camera poses that keep every point at a comfortable depth, optional
per-frame visibility masking, and optional Gaussian pixel noise on the
observations. Independent random streams are used for points, poses,
visibility and noise so that changing one knob does not reshuffle the rest.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from ..errors import GenerationFailed
from ..geometry import Correspondences, Intrinsics, Pose, project

_STREAMS = {"points": 0, "poses": 1, "visibility": 2, "noise": 3, "init": 4}


def rng_stream(seed: int, label: str) -> np.random.Generator:
    """Named deterministic substream of the run seed."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(_STREAMS[label],))
    )


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for `generate_synthetic`."""

    n: int = 8
    frames: int = 1
    noise_sigma: float = 0.0
    visibility: float = 1.0
    rot_range: tuple = (0.1, 2.2)
    depth_range: tuple = (2.0, 10.0)
    lateral_frac: float = 0.05  # camera x/y offset as a fraction of depth
    seed: int = 0

    def __post_init__(self):
        if self.n < 4 or self.frames < 1:
            raise ValueError("need n >= 4 and frames >= 1")
        if not (0.0 < self.visibility <= 1.0):
            raise ValueError("visibility must be in (0, 1]")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")
        if not (0.0 <= self.rot_range[0] <= self.rot_range[1] < np.pi):
            raise ValueError("rot_range must satisfy 0 <= lo <= hi < pi")
        if self.depth_range[0] <= 0.5:
            raise ValueError("depth_range must start beyond the cloud radius")


@dataclass(frozen=True)
class FrameObservation:
    """2D observations of a subset of the global points in one frame."""

    indices: np.ndarray  # (k,) int, strictly increasing, unique
    x2d: np.ndarray  # (2k,) flat pixel coordinates

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int).reshape(-1)
        x = np.asarray(self.x2d, dtype=np.float64).reshape(-1)
        if np.unique(idx).size != idx.size:
            raise ValueError("frame index map must be injective")
        if x.size != 2 * idx.size:
            raise ValueError("x2d length must be twice the index count")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "x2d", x)

    @property
    def count(self) -> int:
        return self.indices.size


@dataclass(frozen=True)
class SyntheticScene:
    """Ground truth plus observations produced by `generate_synthetic`."""

    spec: SceneSpec
    pts3d: np.ndarray  # (n, 3), unit diameter
    poses: tuple  # ground-truth Pose per frame
    intrinsics: Intrinsics
    frames: tuple  # FrameObservation per frame
    diameter: float = field(default=1.0)

    def correspondences(self, frame: int) -> Correspondences:
        obs = self.frames[frame]
        return Correspondences(obs.x2d, self.pts3d[obs.indices])

    def clean_projection(self, frame: int) -> np.ndarray:
        """Noise-free projection of the visible points, flat (2k,)."""
        obs = self.frames[frame]
        return project(self.pts3d[obs.indices], self.poses[frame], self.intrinsics)


def _unit_diameter_cloud(n: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    radii = 0.5 * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / 3.0)
    pts = d * radii
    return pts / pdist(pts).max()


def _sample_pose(spec: SceneSpec, rng: np.random.Generator, diameter: float) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(*spec.rot_range)
    depth = rng.uniform(*spec.depth_range) * diameter
    lateral = rng.uniform(-1.0, 1.0, size=2) * spec.lateral_frac * depth
    return Pose(axis * angle, np.array([lateral[0], lateral[1], depth]))


def _visibility_masks(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-frame boolean masks satisfying the counting constraints."""
    n, N, v = spec.n, spec.frames, spec.visibility
    if v >= 1.0:
        return np.ones((N, n), dtype=bool)
    lo_frame = 6  # PnP minimum with margin
    mean = n * v
    slack = max(3.0, 2.0 * np.sqrt(n * v * (1.0 - v)))
    for _ in range(200):
        masks = rng.uniform(size=(N, n)) < v
        counts = masks.sum(axis=1)
        if counts.min() < max(lo_frame, mean - slack) or counts.max() > mean + slack:
            continue
        if N >= 2 and (masks.sum(axis=0) < 2).any():
            continue
        return masks
    raise GenerationFailed("could not satisfy visibility constraints in 200 tries")


def generate_synthetic(spec: SceneSpec, points=None) -> SyntheticScene:
    """Deterministic synthetic scene for a given spec.

    With `points` given (e.g. mesh vertices from a scene file), those are
    used instead of a sampled cloud: they are centered at their centroid
    and the depth range is interpreted in units of their diameter, so
    arbitrarily scaled models work unchanged.

    Raises:
        GenerationFailed: pose or visibility sampling exhausted its retries.
    """
    if points is None:
        pts = _unit_diameter_cloud(spec.n, rng_stream(spec.seed, "points"))
        diam = 1.0
    else:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3).copy()
        if pts.shape[0] != spec.n:
            raise ValueError(f"spec.n={spec.n} but {pts.shape[0]} points were supplied")
        pts -= pts.mean(axis=0)
        diam = float(pdist(pts).max())
        if diam <= 0.0:
            raise ValueError("supplied points are all identical")

    pose_rng = rng_stream(spec.seed, "poses")
    poses = []
    for _ in range(spec.frames):
        for _attempt in range(100):
            pose = _sample_pose(spec, pose_rng, diam)
            cam_depth = (pts @ pose.rotation_matrix.T + pose.trans)[:, 2]
            if cam_depth.min() > 0.25 * diam:
                poses.append(pose)
                break
        else:
            raise GenerationFailed("pose sampling kept placing points too close")

    masks = _visibility_masks(spec, rng_stream(spec.seed, "visibility"))
    noise_rng = rng_stream(spec.seed, "noise")
    intrinsics = Intrinsics(800.0, 700.0, 400.0, 300.0)

    frames = []
    for j in range(spec.frames):
        idx = np.flatnonzero(masks[j])
        clean = project(pts[idx], poses[j], intrinsics)
        noisy = clean + spec.noise_sigma * noise_rng.normal(size=clean.size)
        frames.append(FrameObservation(indices=idx, x2d=noisy))

    return SyntheticScene(
        spec=spec,
        pts3d=pts,
        poses=tuple(poses),
        intrinsics=intrinsics,
        frames=tuple(frames),
        diameter=diam,
    )


@dataclass
class SfmProblem:
    """Multi-frame observations sharing one global point set.

    `poses` holds the current per-frame estimates and is updated in place
    by the reconstruction driver. Points seen in fewer than two frames have
    unconstrained depth; they trigger a warning here and are excluded from
    alignment metrics.
    """

    observations: list
    n_points: int
    intrinsics: Intrinsics
    poses: list | None = None

    def __post_init__(self):
        for j, obs in enumerate(self.observations):
            if obs.indices.size and obs.indices.max() >= self.n_points:
                raise ValueError(f"frame {j} references a point beyond n_points")
        if self.poses is None:
            self.poses = [Pose.identity() for _ in self.observations]
        if len(self.poses) != len(self.observations):
            raise ValueError("one pose per frame required")
        under = np.flatnonzero(self.visibility_counts < 2)
        if under.size:
            warnings.warn(
                f"{under.size} point(s) visible in < 2 frames have unconstrained "
                f"depth (indices {under[:8].tolist()}...)",
                stacklevel=2,
            )

    @property
    def num_frames(self) -> int:
        return len(self.observations)

    @property
    def visibility_counts(self) -> np.ndarray:
        counts = np.zeros(self.n_points, dtype=int)
        for obs in self.observations:
            counts[obs.indices] += 1
        return counts


def sfm_problem_from_scene(scene: SyntheticScene) -> SfmProblem:
    return SfmProblem(
        observations=list(scene.frames),
        n_points=scene.pts3d.shape[0],
        intrinsics=scene.intrinsics,
    )
