"""Windowed photometric-depth bundle adjustment.

The problem couples, over the optimization window, per-pixel Huber
photometric patch residuals with truncated-least-squares depth
prediction residuals weighted by k^2, plus a strong quadratic prior on
every optimizable (a, b):

    sum_obs sum_p rho_Hub(r_photo^2) + k^2 sum rho_TLS(r_depth^2)
        + w_aff sum (a^2 + b^2)

Keyframes outside the window contribute residuals but no columns. When
no fixed keyframe participates (bootstrap windows) the oldest window
keyframe's pose is pinned to anchor the gauge. Before solving, a
translation offset brings the newest keyframe to the origin (pose
derivatives depend on the distance to the origin through the observer
adjoints); the offset is undone afterwards.

The normal equations are solved by per-point elimination: inverse
depths are marginalized out of the damped system (their block is
diagonal), the reduced camera system is solved densely, and the point
updates are back-substituted. Truncated depth residuals contribute
exactly nothing to either side of the system.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import RankDeficient, SolverDiverged
from .geometry import Pose, se3_exp
from .robust import huber, tls
from .residuals import depth_pair_terms, host_patch, photo_pair_terms


@dataclass
class DepthResidualStat:
    point_id: int
    kf_id: int  # None for the host-form residual
    pixel: np.ndarray  # sampled raster pixel (full resolution)
    residual: float
    weight: float  # TLS weight in the final iteration: 0 or 1
    active: bool  # False when the projection left the raster (skipped)


@dataclass
class BAStats:
    initial_cost: float = 0.0
    final_cost: float = 0.0
    iterations: int = 0
    accepted: int = 0
    rejected: int = 0
    level_cost_traces: list = field(default_factory=list)
    obs_stats: dict = field(default_factory=dict)  # (pid, kf_id) -> (mean, frac, n)
    depth_stats: list = field(default_factory=list)
    idepth_info: dict = field(default_factory=dict)


class BAProblem:
    """Optimization window, fixed keyframes and the coupled points."""

    def __init__(self, window, fixed, points, observations):
        self.window = list(window)  # Keyframe-like, temporal order, newest last
        self.fixed = list(fixed)
        self.points = list(points)
        # (point_index, kf_id) photometric+depth observation pairs
        self.observations = list(observations)

    @classmethod
    def from_map(cls, window_kfs, keyframes, points):
        """Collect the points hosted or observed by the window and every
        keyframe contributing residuals to them."""
        window_ids = {kf.id for kf in window_kfs}
        involved = []
        for pid in sorted(points):
            pt = points[pid]
            if pt.host_id in window_ids or any(k in window_ids for k in pt.observations):
                involved.append(pt)
        fixed_ids = set()
        for pt in involved:
            if pt.host_id not in window_ids:
                fixed_ids.add(pt.host_id)
            for k in pt.observations:
                if k not in window_ids and k in keyframes:
                    fixed_ids.add(k)
        fixed = [keyframes[k] for k in sorted(fixed_ids)]
        observations = []
        for idx, pt in enumerate(involved):
            for k in sorted(pt.observations):
                if k in window_ids or k in fixed_ids:
                    observations.append((idx, k))
        return cls(window_kfs, fixed, involved, observations)


def recenter(keyframes, reference_kf):
    """Shift the world origin to the reference keyframe's camera center.

    Mutates the poses of all given keyframes; returns the offset so the
    caller can undo it with apply_translation_offset(kfs, -offset).
    """
    offset = camera_center(reference_kf.pose)
    apply_translation_offset(keyframes, offset)
    return offset


def camera_center(pose_w2c: Pose):
    return -(pose_w2c.R.T @ pose_w2c.t)


def apply_translation_offset(keyframes, offset):
    """World-frame translation: new world coordinates x' = x - offset."""
    for kf in keyframes:
        kf.pose = Pose(kf.pose.R, kf.pose.t + kf.pose.R @ offset)


@dataclass
class _View:
    """Keyframe snapshot with solver-owned pose/affine state."""
    pose: Pose
    a: float
    b: float
    camera: object
    pyramid: list
    raster: object


class BASolver:
    """One windowed solve; state lives in arrays, written back on finish."""

    def __init__(self, problem: BAProblem, cfg):
        self.problem = problem
        self.cfg = cfg
        self.kfs = list(problem.window) + list(problem.fixed)
        self.n_window = len(problem.window)
        self.slot_of = {kf.id: s for s, kf in enumerate(self.kfs)}

        # The window carries no marginalization prior, so its gauge must
        # be anchored structurally: the oldest window keyframe's pose is
        # always held fixed. Out-of-window keyframes additionally
        # contribute their observations as fixed residuals.
        self.pinned = set()
        if self.n_window > 0:
            self.pinned.add(0)

        # column layout: 6 pose + 2 affine per free window keyframe
        self.col_pose = {}
        self.col_aff = {}
        nc = 0
        for s in range(self.n_window):
            if s not in self.pinned:
                self.col_pose[s] = nc
                nc += 6
            self.col_aff[s] = nc
            nc += 2
        self.n_cols = nc

        self.poses = [kf.pose for kf in self.kfs]
        self.a = np.array([kf.a for kf in self.kfs], dtype=float)
        self.b = np.array([kf.b for kf in self.kfs], dtype=float)
        self.rho = np.array([pt.rho for pt in problem.points], dtype=float)

        pts = problem.points
        self.P = len(pts)
        self.bearing = np.array([pt.bearing for pt in pts], dtype=float).reshape(self.P, 3)
        self.host_slot = np.array([self.slot_of[pt.host_id] for pt in pts], dtype=int)
        self.host_pixel = np.array([pt.host_pixel for pt in pts], dtype=float).reshape(self.P, 2)
        self.host_raster_value = np.array(
            [pt.host_raster_value for pt in pts], dtype=float)

        # observation rows grouped by (host_slot, obs_slot)
        self.groups = {}
        for row, (pidx, kf_id) in enumerate(problem.observations):
            key = (int(self.host_slot[pidx]), self.slot_of[kf_id])
            self.groups.setdefault(key, []).append(pidx)
        self.groups = {key: np.array(rows, dtype=int)
                       for key, rows in sorted(self.groups.items())}
        self._host_cache = {}

    # -- residual evaluation -------------------------------------------------

    def _host_side(self, level):
        if level not in self._host_cache:
            bearings = np.zeros((self.P, 8, 3))
            I_h = np.zeros((self.P, 8))
            valid = np.zeros((self.P, 8), dtype=bool)
            for s in np.unique(self.host_slot):
                rows = np.nonzero(self.host_slot == s)[0]
                kf = self.kfs[s]
                bb, ih, vv = host_patch(kf, self.host_pixel[rows], level)
                bearings[rows] = bb
                I_h[rows] = ih
                valid[rows] = vv
            self._host_cache[level] = (bearings, I_h, valid)
        return self._host_cache[level]

    def _view(self, slot, poses, a, b):
        kf = self.kfs[slot]
        return _View(pose=poses[slot], a=a[slot], b=b[slot],
                     camera=kf.camera, pyramid=kf.pyramid,
                     raster=getattr(kf, "raster", None))

    def _pair(self, hs, os, poses, a, b, level):
        from .residuals import PairGeometry
        return PairGeometry(self._view(hs, poses, a, b),
                            self._view(os, poses, a, b), level)

    def evaluate(self, poses, a, b, rho, level, want_jac=False, collect=None):
        """Robust total cost; optionally the normal-equation blocks.

        collect, when given, is filled with per-observation and
        per-depth-residual statistics of this linearization point.
        """
        cfg = self.cfg
        k2 = cfg.balance_k ** 2
        bearings, I_h, hvalid = self._host_side(level)
        cost = 0.0
        if want_jac:
            Hcc = np.zeros((self.n_cols, self.n_cols))
            Hcp = np.zeros((self.P, self.n_cols))
            Hpp = np.zeros(self.P)
            gc = np.zeros(self.n_cols)
            gp = np.zeros(self.P)

        for (hs, os_), rows in self.groups.items():
            pair = self._pair(hs, os_, poses, a, b, level)
            terms = photo_pair_terms(pair, bearings[rows], I_h[rows], hvalid[rows],
                                     rho[rows], want_jacobians=want_jac)
            r = terms["r"]
            m = terms["mask"]
            if cfg.huber_mode == "patch_sum":
                r_sq = np.sum(np.where(m, r, 0.0) ** 2, axis=1)
                kev = huber(r_sq, cfg.huber_delta)
                w_pix = np.repeat(kev.weight[:, None], 8, axis=1) * m
                cost += float(np.sum(kev.cost))
            else:
                kev = huber(np.where(m, r, 0.0) ** 2, cfg.huber_delta)
                w_pix = kev.weight * m
                cost += float(np.sum(kev.cost * m))

            dterms = depth_pair_terms(pair, self.bearing[rows], rho[rows],
                                      want_jacobians=want_jac)
            rd = dterms["r"]
            md = dterms["mask"]
            kd = tls(np.where(md, rd, 0.0) ** 2, cfg.tls_tau)
            wd = kd.weight * md
            cost += float(k2 * np.sum(kd.cost * md))

            if collect is not None:
                self._collect_pair(collect, rows, os_, r, m, rd, md, wd,
                                   dterms["u"])
            if not want_jac:
                continue

            cols, Jc, Jp = self._stack_jacobians(hs, os_, terms, dterms, rows)
            Wp = w_pix
            Hpp[rows] += np.einsum("np,np,np->n", Wp, terms["d_rho"], terms["d_rho"]) \
                + k2 * wd * dterms["d_rho"] ** 2
            gp[rows] += np.einsum("np,np->n", Wp * r, terms["d_rho"]) \
                + k2 * wd * rd * dterms["d_rho"]
            if cols.size:
                Hcc[np.ix_(cols, cols)] += np.einsum("npi,np,npj->ij", Jc, Wp, Jc) \
                    + k2 * np.einsum("ni,n,nj->ij", Jp, wd, Jp)
                Hcp[np.ix_(rows, cols)] += np.einsum("npi,np,np->ni", Jc, Wp,
                                                     terms["d_rho"]) \
                    + k2 * (wd * dterms["d_rho"])[:, None] * Jp
                gc[cols] += np.einsum("npi,np->i", Jc, Wp * r) \
                    + k2 * Jp.T @ (wd * rd)

        # host-form depth residuals (depend on rho only)
        hr_ok = np.isfinite(self.host_raster_value)
        r_host = np.where(hr_ok, self.host_raster_value - rho, 0.0)
        k_host = tls(r_host ** 2, cfg.tls_tau)
        w_host = k_host.weight * hr_ok
        cost += float(k2 * np.sum(k_host.cost * hr_ok))
        if collect is not None:
            for j in range(self.P):
                if hr_ok[j]:
                    collect["depth"].append(DepthResidualStat(
                        point_id=self.problem.points[j].id, kf_id=None,
                        pixel=self.host_pixel[j], residual=float(r_host[j]),
                        weight=float(k_host.weight[j]), active=True))
        if want_jac:
            Hpp += k2 * w_host
            gp += k2 * w_host * r_host * (-1.0)

        # affine priors on the window keyframes
        w_aff = cfg.affine_prior_weight
        for s in range(self.n_window):
            ca = self.col_aff[s]
            cost += float(w_aff * (a[s] ** 2 + b[s] ** 2))
            if want_jac:
                Hcc[ca, ca] += w_aff
                Hcc[ca + 1, ca + 1] += w_aff
                gc[ca] += w_aff * a[s]
                gc[ca + 1] += w_aff * b[s]

        if want_jac:
            return cost, (Hcc, Hcp, Hpp, gc, gp)
        return cost

    def _stack_jacobians(self, hs, os_, terms, dterms, rows):
        """Camera-column blocks for one pair: photo (n, 8, C) and depth (n, C)."""
        blocks_photo = []
        blocks_depth = []
        cols = []
        n = len(rows)
        zeros2 = np.zeros((n, 8, 1))
        if hs in self.col_pose:
            cols.extend(range(self.col_pose[hs], self.col_pose[hs] + 6))
            blocks_photo.append(terms["d_xi_host"])
            blocks_depth.append(dterms["d_xi_host"])
        if hs in self.col_aff and hs < self.n_window:
            cols.extend([self.col_aff[hs], self.col_aff[hs] + 1])
            blocks_photo.append(np.stack([terms["d_a_host"], terms["d_b_host"]], axis=-1))
            blocks_depth.append(np.zeros((n, 2)))
        if os_ in self.col_pose:
            cols.extend(range(self.col_pose[os_], self.col_pose[os_] + 6))
            blocks_photo.append(-terms["d_xi_host"])
            blocks_depth.append(-dterms["d_xi_host"])
        if os_ in self.col_aff and os_ < self.n_window:
            cols.extend([self.col_aff[os_], self.col_aff[os_] + 1])
            blocks_photo.append(np.stack([-terms["d_a_host"], terms["d_b_obs"]], axis=-1))
            blocks_depth.append(np.zeros((n, 2)))
        if not cols:
            return np.array([], dtype=int), zeros2[:, :, :0], np.zeros((n, 0))
        Jc = np.concatenate(blocks_photo, axis=-1)
        Jp = np.concatenate(blocks_depth, axis=-1)
        return np.array(cols, dtype=int), Jc, Jp

    def _collect_pair(self, collect, rows, os_, r, m, rd, md, wd, u_depth):
        kf_id = self.kfs[os_].id
        pts = self.problem.points
        n_valid = m.sum(axis=1)
        with np.errstate(invalid="ignore"):
            mean_abs = np.where(n_valid > 0,
                                np.sum(np.abs(np.where(m, r, 0.0)), axis=1)
                                / np.maximum(n_valid, 1), np.inf)
            frac_high = np.where(
                n_valid > 0,
                np.sum((np.abs(np.where(m, r, 0.0)) >= self.cfg.outlier_pixel_residual)
                       & m, axis=1) / np.maximum(n_valid, 1),
                1.0)
        for i, j in enumerate(rows):
            collect["obs"][(pts[j].id, kf_id)] = (
                float(mean_abs[i]), float(frac_high[i]), int(n_valid[i]))
            collect["depth"].append(DepthResidualStat(
                point_id=pts[j].id, kf_id=kf_id, pixel=u_depth[i],
                residual=float(rd[i]), weight=float(wd[i]), active=bool(md[i])))

    # -- LM machinery ----------------------------------------------------------

    def step(self, blocks, lam):
        """One damped reduced solve: returns (delta_c, delta_p)."""
        Hcc, Hcp, Hpp, gc, gp = blocks
        Hcc_d = Hcc + lam * np.diag(np.maximum(np.diag(Hcc), 1e-12))
        Hpp_d = Hpp * (1.0 + lam) + 1e-12
        B_over_D = Hcp / Hpp_d[:, None]
        S = Hcc_d - Hcp.T @ B_over_D
        rhs = -gc + B_over_D.T @ gp
        c, low = scipy.linalg.cho_factor(S, check_finite=False)
        delta_c = scipy.linalg.cho_solve((c, low), rhs, check_finite=False)
        delta_p = (-gp - Hcp @ delta_c) / Hpp_d
        return delta_c, delta_p

    def apply(self, delta_c, delta_p):
        poses = list(self.poses)
        a = self.a.copy()
        b = self.b.copy()
        for s in range(self.n_window):
            if s in self.col_pose:
                xi = delta_c[self.col_pose[s]:self.col_pose[s] + 6]
                poses[s] = poses[s] @ se3_exp(xi)
            ca = self.col_aff[s]
            a[s] += delta_c[ca]
            b[s] += delta_c[ca + 1]
        rho = np.maximum(self.rho + delta_p, self.cfg.rho_min)
        return poses, a, b, rho

    def run(self, stats: BAStats):
        cfg = self.cfg
        levels = list(range(cfg.ba_start_level, -1, -1))
        stats.initial_cost = self.evaluate(self.poses, self.a, self.b, self.rho,
                                           level=levels[0])
        for level, max_iters in zip(levels, cfg.ba_level_iters):
            cost = self.evaluate(self.poses, self.a, self.b, self.rho, level)
            lam = cfg.lm_lambda_init
            trace = [cost]
            for _ in range(max_iters):
                stats.iterations += 1
                _, blocks = self.evaluate(self.poses, self.a, self.b, self.rho,
                                          level, want_jac=True)
                accepted = False
                factorized = False
                last_cand_cost = None
                while lam <= cfg.lm_lambda_ceiling:
                    try:
                        delta_c, delta_p = self.step(blocks, lam)
                        factorized = True
                    except np.linalg.LinAlgError:
                        lam *= 2.0
                        continue
                    cand = self.apply(delta_c, delta_p)
                    cand_cost = self.evaluate(*cand, level)
                    last_cand_cost = cand_cost
                    if cand_cost < cost:
                        self.poses, self.a, self.b, self.rho = cand
                        rel_drop = (cost - cand_cost) / max(cost, 1e-300)
                        step_norm = np.linalg.norm(delta_c) + np.linalg.norm(delta_p)
                        cost = cand_cost
                        trace.append(cost)
                        stats.accepted += 1
                        lam = max(lam * 0.5, 1e-12)
                        accepted = True
                        if rel_drop < cfg.rel_cost_tol or step_norm < cfg.step_norm_tol:
                            accepted = "converged"
                        break
                    stats.rejected += 1
                    lam *= 2.0
                if not accepted:
                    if not factorized:
                        raise RankDeficient(
                            "reduced camera system is not positive definite")
                    # a vanishing step must not increase the cost to first
                    # order; a clear increase at the damping ceiling means
                    # the linearization contradicts the cost
                    if last_cand_cost is not None \
                            and last_cand_cost > cost * (1.0 + 1e-6):
                        raise SolverDiverged(
                            f"cost {last_cand_cost:.6g} above {cost:.6g} "
                            "at the lambda ceiling")
                if accepted == "converged" or not accepted:
                    break
            stats.level_cost_traces.append(tuple(trace))
        stats.final_cost = cost
        return cost

    def finalize(self, stats: BAStats):
        """Final level-0 linearization: residual statistics and the
        undamped inverse-depth information diagonal."""
        collect = {"obs": {}, "depth": []}
        _, blocks = self.evaluate(self.poses, self.a, self.b, self.rho, level=0,
                                  want_jac=True, collect=collect)
        _, _, Hpp, _, _ = blocks
        stats.obs_stats = collect["obs"]
        stats.depth_stats = collect["depth"]
        stats.idepth_info = {pt.id: float(Hpp[j])
                             for j, pt in enumerate(self.problem.points)}

    def write_back(self):
        for s in range(self.n_window):
            kf = self.kfs[s]
            kf.pose = self.poses[s]
            kf.a = float(self.a[s])
            kf.b = float(self.b[s])
        for j, pt in enumerate(self.problem.points):
            pt.rho = float(self.rho[j])


def solve(problem: BAProblem, cfg) -> BAStats:
    """Recenter, optimize coarse-to-fine, un-recenter, write back states
    and per-residual statistics."""
    stats = BAStats()
    if not problem.window:
        return stats
    all_kfs = list(problem.window) + list(problem.fixed)
    offset = recenter(all_kfs, problem.window[-1])
    try:
        solver = BASolver(problem, cfg)
        solver.run(stats)
        solver.finalize(stats)
        solver.write_back()
        for pt in problem.points:
            pt.idepth_info = stats.idepth_info[pt.id]
            pt.ba_count += 1
    finally:
        apply_translation_offset(all_kfs, -offset)
    return stats


def compute_idepth_information(problem: BAProblem, cfg):
    """rho-rho diagonal of the robust-weighted Gauss-Newton Hessian at
    the problem's current state (no damping, no priors)."""
    solver = BASolver(problem, cfg)
    _, blocks = solver.evaluate(solver.poses, solver.a, solver.b, solver.rho,
                                level=0, want_jac=True)
    Hpp = blocks[2]
    return {pt.id: float(Hpp[j]) for j, pt in enumerate(problem.points)}


def update_observation_stats(problem: BAProblem, stats: BAStats):
    """Copy the final residual statistics into the map structures."""
    from .mapping import ObsStats
    by_id = {pt.id: pt for pt in problem.points}
    for (pid, kf_id), (mean_abs, frac_high, n_valid) in stats.obs_stats.items():
        pt = by_id.get(pid)
        if pt is not None and kf_id in pt.observations:
            pt.observations[kf_id] = ObsStats(mean_abs=mean_abs,
                                              frac_high=frac_high,
                                              n_valid=n_valid)


def discard_outlier_observations(problem: BAProblem, stats: BAStats, keyframes, cfg):
    """Drop observations with mean pattern residual above the threshold
    or too many high-residual pixels; their depth residuals die with
    them. Returns the removed (point_id, kf_id) pairs."""
    removed = []
    by_id = {pt.id: pt for pt in problem.points}
    for (pid, kf_id), (mean_abs, frac_high, n_valid) in sorted(stats.obs_stats.items()):
        bad = (mean_abs > cfg.outlier_mean_residual
               or frac_high > cfg.outlier_frac
               or n_valid == 0)
        if not bad:
            continue
        pt = by_id.get(pid)
        if pt is None or kf_id not in pt.observations:
            continue
        pt.observations.pop(kf_id)
        kf = keyframes.get(kf_id)
        if kf is not None and pid in kf.observed:
            kf.observed.remove(pid)
        removed.append((pid, kf_id))
    return removed


def cost_profile(point, problem: BAProblem, cfg, n_samples=200, span=(0.1, 3.0)):
    """Photometric / depth / total cost of one point as functions of its
    inverse depth, all other states held fixed."""
    solver = BASolver(problem, cfg)
    j = next(i for i, pt in enumerate(problem.points) if pt.id == point.id)
    rho_star = solver.rho[j]
    grid = np.linspace(span[0] * rho_star, span[1] * rho_star, n_samples)
    bearings, I_h, hvalid = solver._host_side(0)
    k2 = cfg.balance_k ** 2

    photo = np.zeros(n_samples)
    depth = np.zeros(n_samples)
    tiled_bear = np.repeat(bearings[j][None, :, :], n_samples, axis=0)
    tiled_Ih = np.repeat(I_h[j][None, :], n_samples, axis=0)
    tiled_hv = np.repeat(hvalid[j][None, :], n_samples, axis=0)
    center = np.repeat(solver.bearing[j][None, :], n_samples, axis=0)
    for (hs, os_), rows in solver.groups.items():
        if j not in rows or hs != solver.host_slot[j]:
            continue
        pair = solver._pair(hs, os_, solver.poses, solver.a, solver.b, 0)
        terms = photo_pair_terms(pair, tiled_bear, tiled_Ih, tiled_hv, grid,
                                 want_jacobians=False)
        m = terms["mask"]
        if cfg.huber_mode == "patch_sum":
            photo += huber(np.sum(np.where(m, terms["r"], 0.0) ** 2, axis=1),
                           cfg.huber_delta).cost
        else:
            photo += np.sum(huber(np.where(m, terms["r"], 0.0) ** 2,
                                  cfg.huber_delta).cost * m, axis=1)
        dterms = depth_pair_terms(pair, center, grid, want_jacobians=False)
        md = dterms["mask"]
        depth += k2 * tls(np.where(md, dterms["r"], 0.0) ** 2, cfg.tls_tau).cost * md
    if np.isfinite(solver.host_raster_value[j]):
        depth += k2 * tls((solver.host_raster_value[j] - grid) ** 2, cfg.tls_tau).cost
    return grid, photo, depth, photo + depth
