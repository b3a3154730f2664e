"""Photometric and depth-prediction residuals with analytic Jacobians.

Geometry conventions
--------------------
A point is anchored in its host keyframe by a fixed unit bearing and an
optimizable inverse depth rho; its observer-frame position is
x_i = R_ih (bearing / rho) + t_ih with T_ih = T_i T_h^-1 (both poses
world-to-camera). All derivatives use the scaled point y = rho * x_i =
R_ih bearing + rho t_ih, through which the projection is evaluated
(projection is scale-invariant), so

    d(photo)/d(rho)  = -e^(a_h - a_i) * gI . dpi/dx|_y . t_ih
    d(photo)/d(xi_h) = rho e^(a_h - a_i) * gI . dpi/dx|_y
                         . (I | -[x_i]_x) Ad_{T_i}
    d(depth)/d(rho)  = gD . dpi/dx|_y . t_ih - (rho_i/rho)^2 [R_ih bearing]_z
    d(depth)/d(xi_h) = -(rho gD . dpi/dx|_y + (0,0,rho_i^2))
                         . (I | -[x_i]_x) Ad_{T_i}

where gI / gD are the image and raster gradients at the projected pixel
and rho_i = 1/[x_i]_z. Observer-pose derivatives are the exact negation
of the host ones (global-frame updates T <- T Exp(xi)); both families
are validated against central finite differences.

Pose updates in these formulas are right-multiplicative on
world-to-camera poses and the adjoint is that of the *observer* pose,
which is what makes the host/observer symmetry hold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, OutOfBounds
from .geometry import CameraModel, Pose, adjoint
from .image import sample, sample_with_grad

# Residual pattern: center plus 7 neighbors, all within radius 2.
PATTERN = np.array([
    [0, 0], [-2, 0], [2, 0], [0, -2], [0, 2], [-1, -1], [1, -1], [-1, 1],
], dtype=float)

_Z_EPS = 1e-8


@dataclass
class PhotoResidual:
    values: np.ndarray  # (8,) intensity units; entries with mask False are undefined
    mask: np.ndarray  # (8,) bool, False for out-of-bounds / behind-camera pixels


@dataclass
class DepthResidual:
    value: float  # 1/m
    obs_idepth: float  # rho_i = 1/[x_i]_z
    pixel: np.ndarray  # projected pixel in the observer (full resolution)


@dataclass
class ResidualJacobians:
    d_rho: np.ndarray
    d_xi_host: np.ndarray
    d_xi_obs: np.ndarray
    d_a_host: np.ndarray = None
    d_b_host: np.ndarray = None
    d_a_obs: np.ndarray = None
    d_b_obs: np.ndarray = None


def pattern_pixels(host_px, level=0):
    """Pattern pixel coordinates at a pyramid level, (N, 8, 2)."""
    host_px = np.atleast_2d(np.asarray(host_px, dtype=float))
    scale = 2.0 ** level
    center = (host_px + 0.5) / scale - 0.5
    return center[:, None, :] + PATTERN[None, :, :]


def host_patch(host, host_px, level=0):
    """Host-side quantities that do not change during optimization.

    Returns (bearings (N,8,3) unit, I_h (N,8), valid (N,8)).
    """
    cam = host.camera.scaled(level)
    u = pattern_pixels(host_px, level)
    d = np.stack([(u[..., 0] - cam.cx) / cam.fx,
                  (u[..., 1] - cam.cy) / cam.fy,
                  np.ones_like(u[..., 0])], axis=-1)
    bearings = d / np.linalg.norm(d, axis=-1, keepdims=True)
    img = host.pyramid[level]
    I_h, valid = sample(img, u[..., 0], u[..., 1])
    return bearings, I_h, valid


def projection_rows(y, cam):
    """dpi/dx rows evaluated at points y, contracted on demand.

    Returns (inv_z, helper) where helper(gu, gv) gives the 3-vector
    gu * dpi_u/dx + gv * dpi_v/dx for pixel-gradient components gu, gv.
    """
    inv_z = 1.0 / y[..., 2]

    def contract(gu, gv):
        gx = gu * cam.fx * inv_z
        gy = gv * cam.fy * inv_z
        gz = -(gu * cam.fx * y[..., 0] + gv * cam.fy * y[..., 1]) * inv_z * inv_z
        return np.stack([gx, gy, gz], axis=-1)

    return inv_z, contract


def _pose_rows(a3, x_i, Ad_obs):
    """(a3 | x_i cross a3) @ Ad: contraction of a row 3-vector with
    (I | -[x]_x) Ad_T for the global-frame twist parametrization."""
    rows = np.concatenate([a3, np.cross(x_i, a3)], axis=-1)
    return rows @ Ad_obs


def photo_pair_terms(pair, bearings, I_h, host_valid, rho, want_jacobians):
    """Residuals (and optionally Jacobians) for N pattern patches seen
    from one (host, observer) keyframe pair.

    `pair` is a PairGeometry; outputs are dicts of (N, 8[, k]) arrays.
    """
    T_ih = pair.T_ih
    y = bearings @ T_ih.R.T + rho[:, None, None] * T_ih.t
    front = y[..., 2] > _Z_EPS * (1.0 / rho[:, None])
    y_safe = np.where(front[..., None], y, np.array([0.0, 0.0, 1.0]))
    cam = pair.cam_level
    u = np.stack([cam.fx * y_safe[..., 0] / y_safe[..., 2] + cam.cx,
                  cam.fy * y_safe[..., 1] / y_safe[..., 2] + cam.cy], axis=-1)
    exp_da = np.exp(pair.a_h - pair.a_i)
    if want_jacobians:
        I_i, gu, gv, ok = sample_with_grad(pair.obs_image, u[..., 0], u[..., 1])
    else:
        I_i, ok = sample(pair.obs_image, u[..., 0], u[..., 1])
    r = I_h - pair.b_h - exp_da * (I_i - pair.b_i)
    mask = host_valid & front & ok
    out = {"r": r, "mask": mask, "u": u, "y": y}
    if not want_jacobians:
        return out
    _, contract = projection_rows(y_safe, cam)
    gP = contract(gu, gv)
    out["d_rho"] = -exp_da * (gP @ T_ih.t)
    x_i = y_safe / rho[:, None, None]
    a3 = rho[:, None, None] * exp_da * gP
    out["d_xi_host"] = _pose_rows(a3, x_i, pair.Ad_obs)
    out["d_a_host"] = -exp_da * (I_i - pair.b_i)
    out["d_b_host"] = np.full(r.shape, -1.0)
    out["d_b_obs"] = np.full(r.shape, exp_da)
    return out


def depth_pair_terms(pair, bearing, rho, want_jacobians):
    """Observer depth-prediction residuals for N points of one pair.

    The raster is sampled at full resolution regardless of the
    photometric pyramid level; bearing is the (N, 3) center bearing.
    """
    T_ih = pair.T_ih
    Rb = bearing @ T_ih.R.T
    y = Rb + rho[:, None] * T_ih.t
    front = y[..., 2] > _Z_EPS * (1.0 / rho)
    y_safe = np.where(front[..., None], y, np.array([0.0, 0.0, 1.0]))
    cam = pair.cam_full
    u = np.stack([cam.fx * y_safe[..., 0] / y_safe[..., 2] + cam.cx,
                  cam.fy * y_safe[..., 1] / y_safe[..., 2] + cam.cy], axis=-1)
    rho_i = rho / y_safe[..., 2]
    if want_jacobians:
        D, gu, gv, ok = sample_with_grad(pair.obs_raster, u[..., 0], u[..., 1])
    else:
        D, ok = sample(pair.obs_raster, u[..., 0], u[..., 1])
    r = D - rho_i
    mask = front & ok
    out = {"r": r, "mask": mask, "u": u, "rho_i": rho_i}
    if not want_jacobians:
        return out
    _, contract = projection_rows(y_safe, cam)
    gP = contract(gu, gv)
    out["d_rho"] = gP @ T_ih.t - (rho_i / rho) ** 2 * Rb[..., 2]
    x_i = y_safe / rho[:, None]
    a3 = -(rho[:, None] * gP + rho_i[..., None] ** 2 * np.array([0.0, 0.0, 1.0]))
    out["d_xi_host"] = _pose_rows(a3, x_i, pair.Ad_obs)
    return out


class PairGeometry:
    """Shared terms of one (host, observer) pair at one pyramid level.

    Built once and reused by photometric and depth evaluations so that
    combined and standalone computations are bitwise identical.
    """

    __slots__ = ("T_ih", "Ad_obs", "a_h", "b_h", "a_i", "b_i",
                 "obs_image", "obs_raster", "cam_level", "cam_full")

    def __init__(self, host, obs, level=0):
        self.T_ih = obs.pose @ host.pose.inverse()
        self.Ad_obs = adjoint(obs.pose)
        self.a_h, self.b_h = host.a, host.b
        self.a_i, self.b_i = obs.a, obs.b
        self.obs_image = obs.pyramid[level]
        self.obs_raster = getattr(obs, "raster", None)
        self.cam_level = host.camera.scaled(level)
        self.cam_full = host.camera


# -- scalar operations ------------------------------------------------------


def photo_residual(point, host_kf, obs_kf, level=0) -> PhotoResidual:
    """Pattern residual of Eq. photometric form:
    r_p = I_h(u_p) - b_h - e^(a_h - a_i) (I_i(u_p') - b_i)."""
    pair = PairGeometry(host_kf, obs_kf, level)
    bearings, I_h, hv = host_patch(host_kf, point.host_pixel, level)
    rho = np.atleast_1d(float(point.rho))
    terms = photo_pair_terms(pair, bearings, I_h, hv, rho, want_jacobians=False)
    _raise_if_degenerate(terms)
    return PhotoResidual(values=terms["r"][0], mask=terms["mask"][0])


def depth_residual_observer(point, host_kf, obs_kf) -> DepthResidual:
    """r = D_NN(u_i) - rho_i with rho_i the observer-frame inverse z-depth."""
    pair = PairGeometry(host_kf, obs_kf, 0)
    bearing = np.atleast_2d(np.asarray(point.bearing, dtype=float))
    rho = np.atleast_1d(float(point.rho))
    terms = depth_pair_terms(pair, bearing, rho, want_jacobians=False)
    if not terms["mask"][0]:
        _raise_depth_error(terms)
    return DepthResidual(value=float(terms["r"][0]),
                         obs_idepth=float(terms["rho_i"][0]),
                         pixel=terms["u"][0])


def depth_residual_host(point, host_kf) -> DepthResidual:
    """Host form: r = D_NN(u_h) - rho at the fixed host pixel."""
    px = np.asarray(point.host_pixel, dtype=float)
    D, _ = sample(host_kf.raster, px[0], px[1])
    return DepthResidual(value=float(D - point.rho),
                         obs_idepth=float(point.rho),
                         pixel=px)


def photo_jacobian(point, host_kf, obs_kf, level=0):
    """Analytic derivatives of the pattern residual; observer-pose rows
    are the exact negation of host-pose rows."""
    pair = PairGeometry(host_kf, obs_kf, level)
    bearings, I_h, hv = host_patch(host_kf, point.host_pixel, level)
    rho = np.atleast_1d(float(point.rho))
    terms = photo_pair_terms(pair, bearings, I_h, hv, rho, want_jacobians=True)
    _raise_if_degenerate(terms)
    d_a_h = terms["d_a_host"][0]
    return PhotoResidual(terms["r"][0], terms["mask"][0]), ResidualJacobians(
        d_rho=terms["d_rho"][0],
        d_xi_host=terms["d_xi_host"][0],
        d_xi_obs=-terms["d_xi_host"][0],
        d_a_host=d_a_h,
        d_b_host=terms["d_b_host"][0],
        d_a_obs=-d_a_h,
        d_b_obs=terms["d_b_obs"][0],
    )


def depth_jacobian(point, host_kf, obs_kf=None):
    """Derivatives of the depth residual. With obs_kf None (host form)
    the residual is affine in rho alone: d/drho = -1, pose rows zero."""
    if obs_kf is None or obs_kf is host_kf:
        zeros = np.zeros(6)
        res = depth_residual_host(point, host_kf)
        return res, ResidualJacobians(d_rho=np.float64(-1.0),
                                      d_xi_host=zeros, d_xi_obs=-zeros)
    pair = PairGeometry(host_kf, obs_kf, 0)
    bearing = np.atleast_2d(np.asarray(point.bearing, dtype=float))
    rho = np.atleast_1d(float(point.rho))
    terms = depth_pair_terms(pair, bearing, rho, want_jacobians=True)
    if not terms["mask"][0]:
        _raise_depth_error(terms)
    res = DepthResidual(float(terms["r"][0]), float(terms["rho_i"][0]), terms["u"][0])
    return res, ResidualJacobians(
        d_rho=terms["d_rho"][0],
        d_xi_host=terms["d_xi_host"][0],
        d_xi_obs=-terms["d_xi_host"][0],
    )


def _raise_if_degenerate(terms):
    if terms["y"][0, 0, 2] <= 0.0:
        raise BehindCamera("pattern center projects behind the observer")
    if not terms["mask"].any():
        raise OutOfBounds("no pattern pixel lands inside the observer image")


def _raise_depth_error(terms):
    if terms["rho_i"][0] <= 0.0 or not np.isfinite(terms["rho_i"][0]):
        raise BehindCamera("point behind the observer camera")
    raise OutOfBounds("projection outside the valid raster domain")


# -- finite-difference oracle ------------------------------------------------


def fd_check(residual_fn, state, eps=1e-6, rel_floor=1.0):
    """Worst relative error between analytic and central-difference
    derivatives over every component of every parameter in `state`.

    residual_fn(state) must return (residuals flat (R,), jacobians dict
    mapping parameter name -> (R, dim) array). The relative error of a
    component uses max(|analytic|, |fd|, rel_floor) as denominator.
    """
    _, jac = residual_fn(state)
    worst = 0.0
    for name, base in state.items():
        base = np.atleast_1d(np.asarray(base, dtype=float))
        J = np.asarray(jac[name], dtype=float).reshape(-1, base.size)
        for k in range(base.size):
            hi = dict(state)
            lo = dict(state)
            dv = np.zeros_like(base)
            dv[k] = eps
            hi[name] = (base + dv) if base.size > 1 else float(base[0] + eps)
            lo[name] = (base - dv) if base.size > 1 else float(base[0] - eps)
            r_hi, _ = residual_fn(hi)
            r_lo, _ = residual_fn(lo)
            fd = (np.asarray(r_hi) - np.asarray(r_lo)) / (2.0 * eps)
            an = J[:, k]
            denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), rel_floor)
            worst = max(worst, float(np.max(np.abs(fd - an) / denom)))
    return worst


@dataclass
class FrameView:
    """Minimal keyframe stand-in: everything residual evaluation needs."""
    pose: Pose  # world-to-camera
    a: float
    b: float
    camera: CameraModel
    pyramid: list
    raster: object = None
