"""Odometry configuration: every tunable threshold in one place.

Defaults follow the system the thresholds were designed for: active/opt
window sizes 5/7, depth-term balance k = 5e3, TLS threshold 0.01 1/m,
Huber threshold 9 intensity, 16x32 extraction grid with the decreasing
f schedule, 2000-point target, 70% keyframe inlier heuristic, 80%/3-obs
redundancy rule, 5 pyramid levels with factor 2 and 20 iterations per
tracking level.

Config files are plain ``key = value`` text; unknown keys are rejected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields


@dataclass
class OdometryConfig:
    # windows and residual balance
    n_active: int = 5
    n_opt: int = 7
    balance_k: float = 5e3
    tls_tau: float = 0.01
    huber_delta: float = 9.0
    huber_mode: str = "per_pixel"  # or "patch_sum": kernel on the patch-summed norm

    # point extraction
    grid_rows: int = 16
    grid_cols: int = 32
    f_schedule: tuple = (10.0, 7.0, 5.0, 3.0, 2.0, 1.0, 0.5, 0.0)
    min_points: int = 2000
    mask_radius: int = 2  # 5x5 masking window
    extract_margin: int = 4

    # keyframe management
    kf_inlier_threshold: float = 0.70
    redundancy_frac: float = 0.80
    redundancy_min_obs: int = 3

    # tracking
    pyramid_levels: int = 5
    track_max_iters: int = 20
    track_huber_delta: float = 9.0
    track_residual_ceiling: float = 25.0
    track_min_valid: int = 10
    retry_rot_deg: float = 10.0
    info_weight_min: float = 1e-2
    info_weight_max: float = 1e4

    # bundle adjustment
    ba_start_level: int = 2
    ba_level_iters: tuple = (8, 8, 15)
    affine_prior_weight: float = 1e4
    outlier_mean_residual: float = 9.0
    outlier_pixel_residual: float = 15.0
    outlier_frac: float = 0.40

    # culling
    idepth_info_min: float = 1e-2

    # Levenberg-Marquardt
    lm_lambda_init: float = 1e-4
    lm_lambda_ceiling: float = 1e8
    rel_cost_tol: float = 1e-5
    step_norm_tol: float = 1e-6

    rho_min: float = 1e-5
    threads: int = field(default_factory=lambda: int(os.environ.get("DEPTHVO_THREADS", "0")))

    def __post_init__(self):
        if self.n_opt < self.n_active:
            raise ValueError("optimization window must contain the active window")
        for name in ("tls_tau", "huber_delta", "kf_inlier_threshold",
                     "affine_prior_weight", "outlier_mean_residual"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.balance_k < 0:
            raise ValueError("balance_k must be non-negative")
        if self.huber_mode not in ("per_pixel", "patch_sum"):
            raise ValueError("huber_mode must be per_pixel or patch_sum")
        if len(self.ba_level_iters) != self.ba_start_level + 1:
            raise ValueError("ba_level_iters must give one budget per BA level")

    @classmethod
    def from_file(cls, path) -> "OdometryConfig":
        overrides = {}
        valid = {f.name: f.type for f in fields(cls)}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                key, raw = (part.strip() for part in line.split("=", 1))
                if key not in valid:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                overrides[key] = _parse_value(key, raw)
        return cls(**overrides)

    def to_file(self, path):
        with open(path, "w") as fh:
            for f in fields(self):
                value = getattr(self, f.name)
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                fh.write(f"{f.name} = {value}\n")


_INT_KEYS = {"n_active", "n_opt", "grid_rows", "grid_cols", "min_points", "mask_radius",
             "extract_margin", "redundancy_min_obs", "pyramid_levels", "track_max_iters",
             "track_min_valid", "ba_start_level", "threads"}
_STR_KEYS = {"huber_mode"}
_TUPLE_KEYS = {"f_schedule", "ba_level_iters"}


def _parse_value(key, raw):
    if key in _STR_KEYS:
        return raw
    if key in _TUPLE_KEYS:
        items = [part.strip() for part in raw.split(",") if part.strip()]
        conv = int if key == "ba_level_iters" else float
        return tuple(conv(part) for part in items)
    if key in _INT_KEYS:
        return int(raw)
    return float(raw)
