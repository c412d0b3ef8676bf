"""Evaluation helpers: similarity alignment and pose error metrics."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import pdist

from ..geometry import Pose, log_rotation


def umeyama_alignment(source: np.ndarray, target: np.ndarray):
    """Similarity transform (s, R, t) minimizing ||target - (s R source + t)||.

    Returns (scale, rotation, translation). Used to compare a reconstructed
    structure against ground truth modulo the global gauge freedom.
    """
    X = np.asarray(source, dtype=np.float64)
    Y = np.asarray(target, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError("source and target must both be (n, 3)")
    n = X.shape[0]
    mu_x = X.mean(axis=0)
    mu_y = Y.mean(axis=0)
    Xc = X - mu_x
    Yc = Y - mu_y
    cov = Yc.T @ Xc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0.0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_x = float((Xc**2).sum()) / n
    s = float(np.trace(np.diag(D) @ S)) / var_x
    t = mu_y - s * (R @ mu_x)
    return s, R, t


def aligned_structure_rmse(
    estimate: np.ndarray, truth: np.ndarray, exclude=None
) -> float:
    """RMSE between similarity-aligned estimate and truth, as a fraction of
    the truth's diameter. Indices in `exclude` (e.g. depth-unconstrained
    points) are dropped before alignment."""
    est = np.asarray(estimate, dtype=np.float64)
    gt = np.asarray(truth, dtype=np.float64)
    keep = np.ones(gt.shape[0], dtype=bool)
    if exclude is not None:
        keep[np.asarray(exclude, dtype=int)] = False
    est, gt = est[keep], gt[keep]
    s, R, t = umeyama_alignment(est, gt)
    aligned = est @ (s * R).T + t
    rmse = float(np.sqrt(((aligned - gt) ** 2).sum(axis=1).mean()))
    return rmse / float(pdist(gt).max())


def rotation_error_deg(a: Pose, b: Pose) -> float:
    """Geodesic angle between two rotations, in degrees."""
    rel = a.rotation_matrix.T @ b.rotation_matrix
    return float(np.degrees(np.linalg.norm(log_rotation(rel))))


def translation_error(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(a.trans - b.trans))
