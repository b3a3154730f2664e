"""Map point extraction, initialization from predicted depth, culling,
and keyframe lifecycle.

A map point lives in its host keyframe: the bearing (unit ray through
the host pixel) never changes after creation, inverse depth rho is the
only geometric parameter. Its inverse depth is initialized directly
from the host's predicted-depth raster.

Culling applies three rules: (1) points hosted outside the active
window with fewer than 2 observations, (2) points whose mean
photometric residual across observations exceeds the outlier threshold,
(3) observed points whose inverse-depth information (Hessian block from
the last bundle adjustment) fell below the floor. A keyframe leaving
the active window is dropped entirely when more than 80% of its points
have at least 3 observations; its hosted points are re-anchored to
their earliest surviving observer when they keep at least 2
observations, otherwise culled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientTexture
from .geometry import CameraModel, Pose
from .image import build_pyramid, central_gradients, sample


@dataclass
class ObsStats:
    """Residual statistics of one observation from the last BA."""
    mean_abs: float = None
    frac_high: float = None
    n_valid: int = 0


@dataclass
class MapPoint:
    id: int
    host_id: int
    host_pixel: np.ndarray  # (2,) float, fixed
    bearing: np.ndarray  # (3,) unit, fixed
    rho: float  # 1/m, optimizable
    host_raster_value: float  # D_NN at the host pixel, cached at creation
    idepth_info: float = 1.0
    status: str = "active"
    ba_count: int = 0
    observations: dict = field(default_factory=dict)  # kf_id -> ObsStats

    @property
    def n_obs(self):
        return len(self.observations)


class Keyframe:
    """Pose + affine brightness + pyramids + predicted inverse depth."""

    def __init__(self, kf_id, image, pose: Pose, camera: CameraModel, raster,
                 a=0.0, b=0.0, levels=5):
        self.id = kf_id
        self.pose = pose  # world -> camera
        self.a = float(a)
        self.b = float(b)
        self.camera = camera
        self.pyramid = build_pyramid(image, levels)
        self.gradients = [central_gradients(lvl) for lvl in self.pyramid]
        self.raster = raster  # (H, W) inverse depth, NaN = invalid
        self.hosted = []  # point ids anchored here
        self.observed = []  # point ids with an observation from here

    @property
    def grad_mag(self):
        gx, gy = self.gradients[0]
        return np.hypot(gx, gy)


def bearing_for_pixel(camera, pixel):
    d = np.array([(pixel[0] - camera.cx) / camera.fx,
                  (pixel[1] - camera.cy) / camera.fy, 1.0])
    return d / np.linalg.norm(d)


def extract_candidates(kf: Keyframe, existing_coverage, cfg, existing_count=0):
    """Grid-adaptive gradient extraction.

    Per cell of the grid, pixels with gradient magnitude above
    mu + f*sigma (statistics of the cell's gradient magnitudes) are
    accepted greedily, each masking its 5x5 neighborhood; rounds with
    decreasing f run until hosted+observed+new reaches the configured
    minimum. Returns [(u, v, rho_init)] with rho_init read from the
    raster at the pixel.
    """
    grad = kf.grad_mag
    h, w = grad.shape
    margin = cfg.extract_margin
    rad = cfg.mask_radius
    blocked = np.zeros((h, w), dtype=bool)
    blocked[:margin, :] = True
    blocked[-margin:, :] = True
    blocked[:, :margin] = True
    blocked[:, -margin:] = True
    for u, v in np.atleast_2d(np.asarray(existing_coverage, dtype=int)).reshape(-1, 2):
        blocked[max(0, v - rad):v + rad + 1, max(0, u - rad):u + rad + 1] = True

    raster_vals = np.asarray(kf.raster, dtype=float)
    row_edges = np.linspace(0, h, cfg.grid_rows + 1).astype(int)
    col_edges = np.linspace(0, w, cfg.grid_cols + 1).astype(int)
    cells = []
    for r in range(cfg.grid_rows):
        for c in range(cfg.grid_cols):
            sl = (slice(row_edges[r], row_edges[r + 1]),
                  slice(col_edges[c], col_edges[c + 1]))
            sub = grad[sl]
            cells.append((sl, float(sub.mean()), float(sub.std())))

    accepted = []
    total = existing_count
    for f in cfg.f_schedule:
        for sl, mu, sigma in cells:
            thr = mu + f * sigma
            sub = grad[sl]
            ok = (sub > thr) & ~blocked[sl]
            if not ok.any():
                continue
            vs, us = np.nonzero(ok)
            mag = sub[vs, us]
            order = np.lexsort((us, vs, -mag))
            v0, u0 = sl[0].start, sl[1].start
            for k in order:
                v, u = v0 + int(vs[k]), u0 + int(us[k])
                if blocked[v, u]:
                    continue
                rho = raster_vals[v, u]
                if not np.isfinite(rho) or rho <= 0:
                    continue
                accepted.append((u, v, float(rho)))
                blocked[max(0, v - rad):v + rad + 1,
                        max(0, u - rad):u + rad + 1] = True
        total = existing_count + len(accepted)
        if total >= cfg.min_points:
            break
    if not accepted and existing_count < cfg.min_points:
        raise InsufficientTexture(
            f"keyframe {kf.id}: no candidate above the gradient thresholds")
    return accepted


def make_point(point_id, kf: Keyframe, pixel, rho_init):
    """Create a point anchored at an integer host pixel with rho from
    the raster value there (exactly)."""
    px = np.asarray(pixel, dtype=float)
    return MapPoint(
        id=point_id,
        host_id=kf.id,
        host_pixel=px,
        bearing=bearing_for_pixel(kf.camera, px),
        rho=float(rho_init),
        host_raster_value=float(rho_init),
    )


def cull_points(points, keyframes, active_ids, cfg):
    """Apply the three removal rules; returns the culled point ids."""
    active = set(active_ids)
    culled = []
    for pid in sorted(points):
        pt = points[pid]
        if pt.status != "active":
            continue
        reason = None
        if pt.host_id not in active and pt.n_obs < 2:
            reason = "few-obs"
        if reason is None and pt.n_obs:
            stats = [s.mean_abs for s in pt.observations.values()
                     if s.mean_abs is not None]
            if stats and float(np.mean(stats)) > cfg.outlier_mean_residual:
                reason = "high-residual"
        if reason is None and pt.n_obs >= 1 and pt.ba_count > 0 \
                and pt.idepth_info < cfg.idepth_info_min:
            reason = "low-information"
        if reason is not None:
            _remove_point(pt, points, keyframes)
            culled.append(pid)
    return culled


def _remove_point(pt, points, keyframes):
    pt.status = "culled"
    host = keyframes.get(pt.host_id)
    if host is not None and pt.id in host.hosted:
        host.hosted.remove(pt.id)
    for kf_id in list(pt.observations):
        kf = keyframes.get(kf_id)
        if kf is not None and pt.id in kf.observed:
            kf.observed.remove(pt.id)
    pt.observations.clear()
    del points[pt.id]


def should_create_keyframe(frame_state, cfg) -> bool:
    """New keyframe when the tracking inlier ratio drops below 70%."""
    return frame_state.inlier_ratio < cfg.kf_inlier_threshold


def is_redundant(kf: Keyframe, points, cfg) -> bool:
    """More than 80% of hosted+observed points have >= 3 observations."""
    ids = set(kf.hosted) | set(kf.observed)
    relevant = [points[pid] for pid in ids if pid in points]
    if not relevant:
        return False
    well_observed = sum(1 for pt in relevant if pt.n_obs >= cfg.redundancy_min_obs)
    return well_observed > cfg.redundancy_frac * len(relevant)


def cull_redundant_keyframes(left_window_ids, keyframes, points, cfg):
    """Discard keyframes that just left the active window when their
    information is redundant; re-anchor or cull their hosted points."""
    removed = []
    for kf_id in left_window_ids:
        kf = keyframes.get(kf_id)
        if kf is None or not is_redundant(kf, points, cfg):
            continue
        _remove_keyframe(kf, keyframes, points, cfg)
        removed.append(kf_id)
    return removed


def _remove_keyframe(kf, keyframes, points, cfg):
    for pid in list(kf.observed):
        pt = points.get(pid)
        if pt is None:
            continue
        pt.observations.pop(kf.id, None)
    for pid in list(kf.hosted):
        pt = points.get(pid)
        if pt is None:
            continue
        if pt.n_obs < 2:
            _remove_point(pt, points, keyframes)
            continue
        if not _reanchor_point(pt, kf, keyframes, cfg):
            _remove_point(pt, points, keyframes)
    del keyframes[kf.id]


def _reanchor_point(pt, old_host, keyframes, cfg) -> bool:
    """Move a point to its earliest surviving observer; bearing and rho
    are re-derived from the new host view."""
    candidates = sorted(k for k in pt.observations if k in keyframes)
    if not candidates:
        return False
    new_host = keyframes[candidates[0]]
    p_world = old_host.pose.inverse().act(pt.bearing / pt.rho)
    x_new = new_host.pose.act(p_world)
    norm = np.linalg.norm(x_new)
    if x_new[2] <= 1e-8 or norm <= 1e-12:
        return False
    cam = new_host.camera
    u = cam.fx * x_new[0] / x_new[2] + cam.cx
    v = cam.fy * x_new[1] / x_new[2] + cam.cy
    if not (cfg.extract_margin <= u <= cam.width - 1 - cfg.extract_margin
            and cfg.extract_margin <= v <= cam.height - 1 - cfg.extract_margin):
        return False
    pt.host_id = new_host.id
    pt.host_pixel = np.array([u, v])
    pt.bearing = x_new / norm
    pt.rho = 1.0 / norm
    D, ok = sample(new_host.raster, u, v)
    pt.host_raster_value = float(D) if ok else np.nan
    pt.observations.pop(new_host.id, None)
    if pt.id in new_host.observed:
        new_host.observed.remove(pt.id)
    new_host.hosted.append(pt.id)
    return True
