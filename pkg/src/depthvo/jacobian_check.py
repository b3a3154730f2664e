"""Finite-difference verification of every analytic Jacobian family.

Each trial draws a random smooth configuration: a tilted textured plane,
two nearby camera poses, random affine states and random points on the
plane. Views are sampled in closed form (infinitely smooth, no
interpolation cells), so central differences are trustworthy at eps =
1e-6. Residuals are batched over the points of a trial; inverse-depth
derivatives are block-diagonal across points, which lets one
perturbation pair cover all of them.
"""

from __future__ import annotations

import numpy as np

from .geometry import CameraModel, se3_exp
from .image import sample
from .residuals import (
    FrameView,
    PairGeometry,
    depth_pair_terms,
    host_patch,
    photo_pair_terms,
)
from .synthetic import SceneConfig, SyntheticScene, _make_texture


def random_plane_config(rng, n_points=20):
    """One smooth test configuration: scene, two frame views, points."""
    cfg = SceneConfig(width=256, height=192, fx=600.0, fy=600.0)
    normal = np.array([rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25), 1.0])
    normal /= np.linalg.norm(normal)
    z0 = rng.uniform(5.0, 20.0)
    planes = [(normal, normal @ np.array([0.0, 0.0, z0]))]
    texture = _make_texture(rng, freqs=(0.3, 1.0, 2.5), amps=(40.0, 30.0, 18.0))

    T_h_wc = se3_exp(np.concatenate([rng.uniform(-0.3, 0.3, 3),
                                     rng.uniform(-0.03, 0.03, 3)]))
    baseline = np.concatenate([rng.uniform(-0.8, 0.8, 3),
                               rng.uniform(-0.05, 0.05, 3)])
    T_i_wc = T_h_wc @ se3_exp(baseline)
    camera = CameraModel(cfg.fx, cfg.fy, (cfg.width - 1) / 2, (cfg.height - 1) / 2,
                         cfg.width, cfg.height)
    scene = SyntheticScene(
        camera=camera, poses_wc=[T_h_wc, T_i_wc], planes=planes,
        texture=texture, config=cfg, seed=0)

    def view(T_wc):
        return FrameView(
            pose=T_wc.inverse(), a=rng.uniform(-0.2, 0.2), b=rng.uniform(-8.0, 8.0),
            camera=scene.camera,
            pyramid=[scene.analytic_image(T_wc)],
            raster=scene.analytic_idepth(T_wc),
        )

    host = view(T_h_wc)
    obs = view(T_i_wc)

    # points on the plane, central image region, near-true inverse depth
    px = np.stack([rng.uniform(40, cfg.width - 40, n_points),
                   rng.uniform(40, cfg.height - 40, n_points)], axis=1)
    s, _, _ = scene.trace(T_h_wc, px[:, 0], px[:, 1])
    bearings, _, _ = host_patch(host, px, level=0)
    norm_ratio = np.linalg.norm(
        np.stack([(px[:, 0] - scene.camera.cx) / scene.camera.fx,
                  (px[:, 1] - scene.camera.cy) / scene.camera.fy,
                  np.ones(n_points)], axis=1), axis=1)
    rho = 1.0 / (s * norm_ratio) * rng.uniform(0.9, 1.1, n_points)
    return host, obs, px, bearings[:, 0, :], rho


def _batched_eval(host, obs, px, center_bearing, rho, state, kind):
    """Residuals + analytic jacobians for one trial under a state dict.

    state: xi_h, xi_i (twist increments from the base poses), a_h, b_h,
    a_i, b_i (absolute), rho (per point). Residuals are flattened; rho
    derivatives are returned per point (block-diagonal structure).
    """
    h = FrameView(pose=host.pose.retract(state["xi_h"]), a=state["a_h"], b=state["b_h"],
                  camera=host.camera, pyramid=host.pyramid, raster=host.raster)
    o = FrameView(pose=obs.pose.retract(state["xi_i"]), a=state["a_i"], b=state["b_i"],
                  camera=obs.camera, pyramid=obs.pyramid, raster=obs.raster)
    pair = PairGeometry(h, o, level=0)
    rho_v = np.asarray(state["rho"], dtype=float)
    if kind == "photo":
        bearings, I_h, hv, = host_patch(h, px, level=0)
        t = photo_pair_terms(pair, bearings, I_h, hv, rho_v, want_jacobians=True)
        n = rho_v.size
        jac = {
            "rho": t["d_rho"],
            "xi_h": t["d_xi_host"].reshape(n * 8, 6),
            "xi_i": -t["d_xi_host"].reshape(n * 8, 6),
            "a_h": t["d_a_host"].reshape(-1, 1),
            "a_i": -t["d_a_host"].reshape(-1, 1),
            "b_h": t["d_b_host"].reshape(-1, 1),
            "b_i": t["d_b_obs"].reshape(-1, 1),
        }
        return t["r"].reshape(-1), t["mask"].reshape(-1), jac
    t = depth_pair_terms(pair, center_bearing, rho_v, want_jacobians=True)
    jac = {
        "rho": t["d_rho"][:, None],
        "xi_h": t["d_xi_host"],
        "xi_i": -t["d_xi_host"],
    }
    return t["r"], t["mask"], jac


_FAMILIES = ("photo_rho", "photo_xi_host", "photo_xi_obs", "photo_affine",
             "depth_rho", "depth_xi_host", "depth_xi_obs", "depth_host_form")


def run_jacobian_check(trials=1000, seed=0, eps=1e-6, points_per_trial=20,
                       sign_flip=None):
    """Max relative FD error per Jacobian family over `trials` random
    configurations. `sign_flip` (family name) negates one analytic
    family to prove the check catches wrong derivatives.
    """
    rng = np.random.default_rng(seed)
    n_trials = max(0, int(np.ceil(trials / points_per_trial)))
    worst = {name: 0.0 for name in _FAMILIES}
    total = 0
    while total < trials and n_trials > 0:
        host, obs, px, cb, rho = random_plane_config(rng, points_per_trial)
        state0 = {"xi_h": np.zeros(6), "xi_i": np.zeros(6),
                  "a_h": host.a, "b_h": host.b, "a_i": obs.a, "b_i": obs.b,
                  "rho": rho}
        for kind in ("photo", "depth"):
            r0, m0, jac0 = _batched_eval(host, obs, px, cb, rho, state0, kind)
            if sign_flip is not None:
                _apply_sign_flip(jac0, kind, sign_flip)
            n_res = 8 if kind == "photo" else 1

            def fd_param(name, dim, column_of_point=None):
                errs = np.zeros(0)
                for k in range(dim):
                    hi = {key: np.array(v, dtype=float, copy=True) if np.ndim(v) else v
                          for key, v in state0.items()}
                    lo = {key: np.array(v, dtype=float, copy=True) if np.ndim(v) else v
                          for key, v in state0.items()}
                    if name == "rho":
                        # independent per point: one perturbation pair covers all
                        hi["rho"] = rho + eps
                        lo["rho"] = rho - eps
                    elif dim == 1:
                        hi[name] = state0[name] + eps
                        lo[name] = state0[name] - eps
                    else:
                        hi[name][k] += eps
                        lo[name][k] -= eps
                    r_hi, m_hi, _ = _batched_eval(host, obs, px, cb, rho, hi, kind)
                    r_lo, m_lo, _ = _batched_eval(host, obs, px, cb, rho, lo, kind)
                    ok = m0 & m_hi & m_lo
                    fd = (r_hi - r_lo) / (2 * eps)
                    if name == "rho":
                        an = jac0["rho"].reshape(-1)
                    else:
                        an = np.asarray(jac0[name]).reshape(len(r0), dim)[:, k]
                    denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1.0)
                    errs = np.append(errs, (np.abs(fd - an) / denom)[ok])
                    if name == "rho":
                        break
                return errs

            rho_err = fd_param("rho", 1)
            xi_h_err = fd_param("xi_h", 6)
            xi_i_err = fd_param("xi_i", 6)
            if kind == "photo":
                worst["photo_rho"] = max(worst["photo_rho"], _amax(rho_err))
                worst["photo_xi_host"] = max(worst["photo_xi_host"], _amax(xi_h_err))
                worst["photo_xi_obs"] = max(worst["photo_xi_obs"], _amax(xi_i_err))
                aff = np.concatenate([fd_param(nm, 1) for nm in ("a_h", "b_h", "a_i", "b_i")])
                worst["photo_affine"] = max(worst["photo_affine"], _amax(aff))
            else:
                worst["depth_rho"] = max(worst["depth_rho"], _amax(rho_err))
                worst["depth_xi_host"] = max(worst["depth_xi_host"], _amax(xi_h_err))
                worst["depth_xi_obs"] = max(worst["depth_xi_obs"], _amax(xi_i_err))

        # host-form depth residual: r = D_h(u_h) - rho, affine in rho
        D_h, _ = sample(host.raster, px[:, 0], px[:, 1])
        fd_host = ((D_h - (rho + eps)) - (D_h - (rho - eps))) / (2 * eps)
        analytic = np.full(px.shape[0], -1.0)
        if sign_flip == "depth_host_form":
            analytic = -analytic
        worst["depth_host_form"] = max(worst["depth_host_form"],
                                       _amax(np.abs(fd_host - analytic)))
        total += points_per_trial
    return worst


def _amax(arr):
    return float(np.max(arr)) if arr.size else 0.0


def _apply_sign_flip(jac, kind, family):
    if kind == "photo" and family == "photo_rho":
        jac["rho"] = -jac["rho"]
    elif kind == "photo" and family == "photo_xi_host":
        jac["xi_h"] = -jac["xi_h"]
    elif kind == "photo" and family == "photo_xi_obs":
        jac["xi_i"] = -jac["xi_i"]
    elif kind == "photo" and family == "photo_affine":
        jac["a_h"] = -jac["a_h"]
    elif kind == "depth" and family == "depth_rho":
        jac["rho"] = -jac["rho"]
    elif kind == "depth" and family == "depth_xi_host":
        jac["xi_h"] = -jac["xi_h"]
    elif kind == "depth" and family == "depth_xi_obs":
        jac["xi_i"] = -jac["xi_i"]
