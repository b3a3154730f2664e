"""Trajectory evaluation: absolute trajectory error with closed-form
rigid (se3) or similarity (sim3) alignment.

se3 is the default: the system claims metric scale, so aligning scale
away would hide exactly the error the depth residuals are meant to
remove. sim3 is available for diagnostic scale-error reporting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch


@dataclass
class AteResult:
    rmse: float
    median: float
    errors: np.ndarray  # per-frame translational error after alignment
    scale: float  # alignment scale (1.0 for se3)
    rotation: np.ndarray
    translation: np.ndarray


def _positions(traj):
    if isinstance(traj, np.ndarray):
        return np.asarray(traj, dtype=float)
    if hasattr(traj, "positions"):
        return np.asarray(traj.positions(), dtype=float)
    # iterable of (stamp, Pose)
    return np.array([pose.t for _, pose in traj], dtype=float)


def align_umeyama(src, dst, with_scale=False):
    """Closed-form least-squares s, R, t with s R src + t ~= dst."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    X = src - mu_s
    Y = dst - mu_d
    cov = Y.T @ X / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_src = (X * X).sum() / len(src)
        s = float(np.trace(np.diag(D) @ S) / var_src)
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def ate_rmse(estimated, ground_truth, alignment="se3") -> AteResult:
    """RMSE of translational residuals after aligning the estimate onto
    the ground truth; trajectories are associated by index."""
    est = _positions(estimated)
    gt = _positions(ground_truth)
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimated vs {len(gt)} ground-truth poses")
    if len(est) == 0:
        raise LengthMismatch("empty trajectories")
    if alignment not in ("se3", "sim3"):
        raise ValueError(f"unknown alignment {alignment!r}")
    s, R, t = align_umeyama(est, gt, with_scale=(alignment == "sim3"))
    aligned = s * est @ R.T + t
    errors = np.linalg.norm(aligned - gt, axis=1)
    return AteResult(
        rmse=float(np.sqrt(np.mean(errors ** 2))),
        median=float(np.median(errors)),
        errors=errors,
        scale=s,
        rotation=R,
        translation=t,
    )


def trajectory_scale_error(estimated, ground_truth):
    """|s - 1| of the sim3 alignment: relative metric-scale error."""
    res = ate_rmse(estimated, ground_truth, alignment="sim3")
    return abs(res.scale - 1.0)
