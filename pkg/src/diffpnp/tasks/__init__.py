"""End-to-end learning tasks built on the differentiable PnP solve."""

from .drivers import (
    calib_epoch,
    pose_epoch,
    sfm_epoch,
    CalibTrace,
    PoseTrace,
    SfmTrace,
    TrainConfig,
    calibration_provider,
    keypoint_provider,
    mlp_keypoint_provider,
    mlp_structure_provider,
    run_calibration,
    run_pose_estimation,
    run_sfm,
    structure_provider,
)
from .evaluate import (
    aligned_structure_rmse,
    rotation_error_deg,
    translation_error,
    umeyama_alignment,
)
from .losses import FrameError, calib_loss, pose_loss, sfm_loss
from .providers import DirectProvider, MlpProvider, SigmoidBoxProvider
from .synthetic import (
    FrameObservation,
    SceneSpec,
    SfmProblem,
    SyntheticScene,
    generate_synthetic,
    rng_stream,
    sfm_problem_from_scene,
)

__all__ = [
    "CalibTrace",
    "DirectProvider",
    "FrameError",
    "FrameObservation",
    "MlpProvider",
    "PoseTrace",
    "SceneSpec",
    "SfmProblem",
    "SfmTrace",
    "SigmoidBoxProvider",
    "SyntheticScene",
    "TrainConfig",
    "aligned_structure_rmse",
    "calib_epoch",
    "calib_loss",
    "calibration_provider",
    "generate_synthetic",
    "keypoint_provider",
    "mlp_keypoint_provider",
    "mlp_structure_provider",
    "pose_epoch",
    "pose_loss",
    "rng_stream",
    "rotation_error_deg",
    "run_calibration",
    "run_pose_estimation",
    "run_sfm",
    "sfm_epoch",
    "sfm_loss",
    "sfm_problem_from_scene",
    "structure_provider",
    "translation_error",
    "umeyama_alignment",
]
