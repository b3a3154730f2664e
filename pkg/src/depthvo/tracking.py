"""Front-end photometric tracking of frames against the reference keyframe.

Minimizes the weighted Huber photometric cost over the relative pose and
brightness transfer (T, a, b), coarse-to-fine over the full pyramid,
Levenberg-Marquardt per level. The default solver is inverse-
compositional: pose Jacobians are taken on the reference (template) side
at the identity, precomputed once per level, and the solved increment is
composed inversely onto the current estimate. A forward-compositional
solver with image-side Jacobians is available as an oracle; both
minimize the same objective and agree at converged optima.

Residual model (per sparse-depth-map entry u):
    r(u) = I_ref(u) - e^(-a) * (I_cur(pi(T pi^-1(u, D(u)))) - b)

Depth-prediction residuals deliberately never appear here: the depth
network is only consulted at keyframes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptyMap, TrackingLost
from .geometry import Pose, se3_exp, so3_exp
from .image import build_pyramid, sample, sample_with_grad
from .robust import huber

_Z_EPS = 1e-8


@dataclass
class SparseDepthMap:
    pixels: np.ndarray  # (N, 2) int, level-0 reference pixels
    idepth: np.ndarray  # (N,) inverse z-depth in the reference frame
    weight: np.ndarray  # (N,) information weights (clamped)

    def __len__(self):
        return len(self.pixels)


@dataclass
class FrameState:
    T: Pose  # reference keyframe -> frame
    a: float = 0.0
    b: float = 0.0
    inlier_ratio: float = 1.0
    converged: bool = True
    mean_residual: float = 0.0
    n_valid: int = 0
    cost: float = 0.0
    cost_trace: tuple = ()  # accepted-step costs per level, for diagnostics


def build_sparse_depth_map(ref_kf, points_with_hosts, cfg) -> SparseDepthMap:
    """Project active points into the reference keyframe and dilate 3x3.

    points_with_hosts: iterable of (point, host_keyframe). Each dilated
    pixel inherits the source point's reference-frame inverse depth and
    its information weight; colliding pixels keep the higher weight.

    Information weights are median-normalized before clamping: the raw
    inverse-depth Hessian entries all carry the k^2-scale depth-residual
    floor, and a literal clamp would saturate every point to the same
    value, defeating the purpose of limiting the influence of recently
    created single-view points.
    """
    cam = ref_kf.camera
    infos = []
    projected = []  # (point, info, pixel, idepth_ref)
    for point, host in points_with_hosts:
        p_w = host.pose.inverse().act(point.bearing / point.rho)
        x_ref = ref_kf.pose.act(p_w)
        if x_ref[2] <= _Z_EPS:
            continue
        u = cam.fx * x_ref[0] / x_ref[2] + cam.cx
        v = cam.fy * x_ref[1] / x_ref[2] + cam.cy
        ui, vi = int(round(u)), int(round(v))
        if not (0 <= ui < cam.width and 0 <= vi < cam.height):
            continue
        projected.append((point, float(point.idepth_info), (ui, vi), 1.0 / x_ref[2]))
        infos.append(float(point.idepth_info))
    if not projected:
        raise EmptyMap("no active point projects into the reference keyframe")
    median_info = float(np.median([w for w in infos if w > 0])) or 1.0

    candidates = []  # (weight, -order, pixel_flat, idepth)
    for order, (point, info, (ui, vi), idepth_ref) in enumerate(projected):
        w = float(np.clip(info / median_info, cfg.info_weight_min,
                          cfg.info_weight_max))
        for dv in (-1, 0, 1):
            for du in (-1, 0, 1):
                px, py = ui + du, vi + dv
                if 0 <= px < cam.width and 0 <= py < cam.height:
                    candidates.append((w, -order, py * cam.width + px, idepth_ref))
    # ascending (weight, -order): the final write per pixel is the highest
    # weight, ties resolved toward the earliest point
    candidates.sort(key=lambda c: (c[0], c[1]))
    by_pixel = {}
    for w, _, flat, idepth in candidates:
        by_pixel[flat] = (w, idepth)
    flats = np.array(sorted(by_pixel), dtype=int)
    weights = np.array([by_pixel[f][0] for f in flats])
    idepths = np.array([by_pixel[f][1] for f in flats])
    pixels = np.stack([flats % cam.width, flats // cam.width], axis=1)
    return SparseDepthMap(pixels=pixels, idepth=idepths, weight=weights)


def _level_entries(ref_kf, depth_map, level):
    """Template samples, template-side pose Jacobians and ray points."""
    cam = ref_kf.camera.scaled(level)
    scale = 2.0 ** level
    u = (depth_map.pixels + 0.5) / scale - 0.5
    x_u = np.stack([(u[:, 0] - cam.cx) / cam.fx,
                    (u[:, 1] - cam.cy) / cam.fy,
                    np.ones(len(u))], axis=1) / depth_map.idepth[:, None]
    I_ref, gx, gy, valid = sample_with_grad(ref_kf.pyramid[level], u[:, 0], u[:, 1])
    inv_z = 1.0 / x_u[:, 2]
    gP = np.stack([
        gx * cam.fx * inv_z,
        gy * cam.fy * inv_z,
        -(gx * cam.fx * x_u[:, 0] + gy * cam.fy * x_u[:, 1]) * inv_z * inv_z,
    ], axis=1)
    J_ic = np.concatenate([gP, np.cross(x_u, gP)], axis=1)
    return cam, x_u, I_ref, valid, J_ic


def _evaluate(cam, img_cur, x_u, I_ref, template_valid, weights, T, a, b, delta):
    y = x_u @ T.R.T + T.t
    front = y[:, 2] > _Z_EPS
    y_safe = np.where(front[:, None], y, np.array([0.0, 0.0, 1.0]))
    ux = cam.fx * y_safe[:, 0] / y_safe[:, 2] + cam.cx
    uy = cam.fy * y_safe[:, 1] / y_safe[:, 2] + cam.cy
    I_cur, ok = sample(img_cur, ux, uy)
    r = I_ref - np.exp(-a) * (I_cur - b)
    valid = template_valid & front & ok
    n = int(valid.sum())
    if n == 0:
        return r, valid, np.inf, I_cur
    k = huber(np.where(valid, r, 0.0) ** 2, delta)
    cost = float(np.sum(weights * k.cost * valid) / n)
    return r, valid, cost, I_cur


def track_frame(frame_image, ref_kf, depth_map, init: FrameState, cfg,
                method="ic") -> FrameState:
    """Multiscale LM alignment of a frame against the reference keyframe."""
    if len(depth_map) == 0:
        raise EmptyMap("tracking needs a nonempty sparse depth map")
    if isinstance(frame_image, (list, tuple)):
        pyr_cur = list(frame_image)
    elif isinstance(frame_image, np.ndarray):
        pyr_cur = build_pyramid(frame_image, cfg.pyramid_levels)
    else:  # analytic view object
        pyr_cur = [frame_image.level_view(l) for l in range(cfg.pyramid_levels)]
    T, a, b = init.T, init.a, init.b
    weights = depth_map.weight
    delta = cfg.track_huber_delta
    coarse_converged = True
    traces = []
    for level in reversed(range(cfg.pyramid_levels)):
        cam, x_u, I_ref, template_valid, J_ic = _level_entries(ref_kf, depth_map, level)
        img_cur = pyr_cur[level]
        lam = cfg.lm_lambda_init
        r, valid, cost, I_cur = _evaluate(cam, img_cur, x_u, I_ref,
                                          template_valid, weights, T, a, b, delta)
        trace = [cost]
        for _ in range(cfg.track_max_iters):
            if not np.isfinite(cost):
                break
            n = max(int(valid.sum()), 1)
            w_rob = huber(np.where(valid, r, 0.0) ** 2, delta).weight
            w = weights * w_rob * valid
            if method == "ic":
                J_pose = J_ic
            else:
                y = x_u @ T.R.T + T.t
                y_safe = np.where(y[:, 2:] > _Z_EPS, y, np.array([0.0, 0.0, 1.0]))
                ux = cam.fx * y_safe[:, 0] / y_safe[:, 2] + cam.cx
                uy = cam.fy * y_safe[:, 1] / y_safe[:, 2] + cam.cy
                _, gx, gy, _ = sample_with_grad(img_cur, ux, uy)
                inv_z = 1.0 / y_safe[:, 2]
                gP = np.stack([
                    gx * cam.fx * inv_z,
                    gy * cam.fy * inv_z,
                    -(gx * cam.fx * y_safe[:, 0] + gy * cam.fy * y_safe[:, 1])
                    * inv_z * inv_z,
                ], axis=1)
                gC = -np.exp(-a) * gP
                J_pose = np.concatenate(
                    [gC @ T.R, np.cross(x_u, gC @ T.R)], axis=1)
            d_a = np.exp(-a) * (I_cur - b)
            d_b = np.full(len(r), np.exp(-a))
            J = np.concatenate([J_pose, d_a[:, None], d_b[:, None]], axis=1)
            H = (J.T * w) @ J / n
            g = J.T @ (w * r) / n
            accepted = False
            while lam <= cfg.lm_lambda_ceiling:
                Hd = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
                try:
                    step = -np.linalg.solve(Hd, g)
                except np.linalg.LinAlgError:
                    lam *= 2.0
                    continue
                if method == "ic":
                    T_new = T @ se3_exp(step[:6]).inverse()
                else:
                    T_new = T @ se3_exp(step[:6])
                a_new, b_new = a + step[6], b + step[7]
                r_new, valid_new, cost_new, I_cur_new = _evaluate(
                    cam, img_cur, x_u, I_ref, template_valid, weights,
                    T_new, a_new, b_new, delta)
                if cost_new < cost:
                    T, a, b = T_new, a_new, b_new
                    r, valid, I_cur = r_new, valid_new, I_cur_new
                    rel_drop = (cost - cost_new) / max(cost, 1e-12)
                    cost = cost_new
                    trace.append(cost)
                    lam = max(lam * 0.5, 1e-12)
                    accepted = True
                    if rel_drop < cfg.rel_cost_tol or np.linalg.norm(step) < cfg.step_norm_tol:
                        accepted = "converged"
                    break
                lam *= 2.0
            if accepted == "converged" or not accepted:
                break
        traces.append(tuple(trace))
        if level == cfg.pyramid_levels - 1:
            coarse_converged = _coarse_level_converged(trace, r, valid, cfg)
    n_valid = int(valid.sum())
    mean_res = float(np.mean(np.abs(r[valid]))) if n_valid else np.inf
    if n_valid < cfg.track_min_valid:
        raise TrackingLost(f"{n_valid} valid projections at the finest level")
    if mean_res > cfg.track_residual_ceiling:
        raise TrackingLost(f"mean residual {mean_res:.1f} above ceiling")
    inliers = int(np.sum(valid & (np.abs(r) <= delta)))
    return FrameState(
        T=T, a=float(a), b=float(b),
        inlier_ratio=inliers / len(depth_map),
        converged=coarse_converged,
        mean_residual=mean_res,
        n_valid=n_valid,
        cost=float(cost),
        cost_trace=tuple(traces),
    )


def _coarse_level_converged(trace, r, valid, cfg):
    """Retry trigger: stalled cost at a residual above the ceiling."""
    mean_res = float(np.mean(np.abs(r[valid]))) if valid.any() else np.inf
    if mean_res <= cfg.track_residual_ceiling:
        return True
    window = trace[-4:]
    if len(window) < 2:
        return False
    drop = (window[0] - window[-1]) / max(window[0], 1e-12)
    return drop >= 0.01


def retry_with_rotations(frame_image, ref_kf, depth_map, init: FrameState, cfg,
                         method="ic") -> FrameState:
    """Track, and on coarsest-level non-convergence re-run from six
    attitude perturbations, keeping the lowest mean photometric residual."""
    base = None
    try:
        base = track_frame(frame_image, ref_kf, depth_map, init, cfg, method)
        if base.converged:
            return base
    except TrackingLost:
        pass
    candidates = [] if base is None else [base]
    angle = np.deg2rad(cfg.retry_rot_deg)
    for axis in range(3):
        for sign in (1.0, -1.0):
            w = np.zeros(3)
            w[axis] = sign * angle
            perturbed = replace(init, T=Pose(so3_exp(w)) @ init.T)
            try:
                candidates.append(track_frame(frame_image, ref_kf, depth_map,
                                              perturbed, cfg, method))
            except TrackingLost:
                continue
    if not candidates:
        raise TrackingLost("all rotation-retry candidates failed")
    return min(candidates, key=lambda st: st.mean_residual)
