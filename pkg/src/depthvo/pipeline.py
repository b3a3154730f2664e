"""Full odometry pipeline: track every frame against the newest
keyframe, insert keyframes when the inlier ratio drops, attach the
predicted-depth raster, extract points, run windowed photometric-depth
bundle adjustment, cull, and rebuild the tracking depth map.

Depth rasters are consumed only at keyframe insertion: pass them lazily
(a zero-argument callable) and the pipeline will never materialize one
for an ordinary frame. Relative motion is initialized with a constant
velocity model; brightness transfer starts from the last frame's.

Frame poses are stored relative to their reference keyframe and
materialized against the keyframe's final (bundle-adjusted) pose, so
the emitted trajectory benefits from every refinement. The pipeline is
sequential and deterministic: identical inputs and configuration give
bitwise-identical trajectories.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .backend import (
    BAProblem,
    discard_outlier_observations,
    solve,
    update_observation_stats,
)
from .config import OdometryConfig
from .errors import MissingDepthRaster, TrackingLost
from .geometry import CameraModel, Pose
from .mapping import (
    Keyframe,
    ObsStats,
    cull_points,
    cull_redundant_keyframes,
    extract_candidates,
    is_redundant,
    make_point,
    should_create_keyframe,
)
from .tracking import FrameState, build_sparse_depth_map, retry_with_rotations


@dataclass
class Trajectory:
    """Per-frame camera-to-world poses, ordered by frame index."""
    indices: list = field(default_factory=list)
    poses: list = field(default_factory=list)

    def append(self, index, pose_wc):
        if self.indices and index <= self.indices[-1]:
            raise ValueError("frame indices must be strictly increasing")
        self.indices.append(index)
        self.poses.append(pose_wc)

    def positions(self):
        return np.array([p.t for p in self.poses]) if self.poses else np.zeros((0, 3))

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(zip(self.indices, self.poses))


@dataclass
class FrameResult:
    index: int
    pose_wc: Pose
    is_keyframe: bool
    tracking: FrameState = None
    n_points: int = 0
    n_keyframes: int = 0
    track_ms: float = 0.0
    ba_ms: float = 0.0


class Odometry:
    """Sequential scale-aware direct odometry over a frame stream."""

    def __init__(self, camera: CameraModel, cfg: OdometryConfig = None):
        self.camera = camera
        self.cfg = cfg or OdometryConfig()
        self.keyframes = {}
        self.kf_order = []
        self.points = {}
        self.next_point_id = 0
        self.next_kf_id = 0
        self.ref_id = None
        self.depth_map = None
        self.frame_count = 0
        self.last_rel = FrameState(T=Pose.identity())
        self._frame_anchors = []  # (frame_index, ref_kf_id | None, T_rel or absolute)
        self._prev_T = None  # last frame pose, world -> camera
        self._prev_prev_T = None

    # -- windows ---------------------------------------------------------

    def active_window(self):
        return self.kf_order[-self.cfg.n_active:]

    def optimization_window(self):
        return self.kf_order[-self.cfg.n_opt:]

    def active_points(self):
        """Points hosted or observed by the active-window keyframes."""
        window = set(self.active_window())
        out = []
        for pid in sorted(self.points):
            pt = self.points[pid]
            if pt.host_id in window or any(k in window for k in pt.observations):
                out.append(pt)
        return out

    # -- trajectory ------------------------------------------------------

    def trajectory(self) -> Trajectory:
        traj = Trajectory()
        for index, ref_id, rel in self._frame_anchors:
            if ref_id is None:
                T_w2c = rel
            else:
                T_w2c = rel @ self.keyframes[ref_id].pose
            traj.append(index, T_w2c.inverse())
        return traj

    def _anchor_frame(self, index, ref_id, T_rel):
        self._frame_anchors.append((index, ref_id, T_rel))

    def _bake_anchors_of(self, kf_id):
        """Materialize frames anchored to a keyframe about to disappear."""
        kf = self.keyframes[kf_id]
        self._frame_anchors = [
            (idx, None, rel @ kf.pose) if ref == kf_id else (idx, ref, rel)
            for idx, ref, rel in self._frame_anchors
        ]

    # -- main entry ------------------------------------------------------

    def process_frame(self, image, depth_raster=None, timestamp=None) -> FrameResult:
        """Track one frame; insert a keyframe when tracking demands it.

        depth_raster may be an array or a zero-argument callable; it is
        only resolved when this frame actually becomes a keyframe.
        """
        index = self.frame_count if timestamp is None else timestamp
        self.frame_count += 1
        image = np.asarray(image, dtype=float)

        if not self.kf_order:
            t0 = time.perf_counter()
            self._bootstrap(image, depth_raster)
            self._anchor_frame(index, self.ref_id, Pose.identity())
            self._prev_T = self.keyframes[self.ref_id].pose
            return FrameResult(index=index, pose_wc=self._prev_T.inverse(),
                               is_keyframe=True, n_points=len(self.points),
                               n_keyframes=1, ba_ms=1e3 * (time.perf_counter() - t0))

        ref = self.keyframes[self.ref_id]
        t0 = time.perf_counter()
        state = self._track(image, ref)
        track_ms = 1e3 * (time.perf_counter() - t0)
        T_w2c = state.T @ ref.pose

        self._prev_prev_T = self._prev_T
        self._prev_T = T_w2c
        self.last_rel = state

        ba_ms = 0.0
        made_kf = should_create_keyframe(state, self.cfg)
        if made_kf:
            t1 = time.perf_counter()
            self._insert_keyframe(image, depth_raster, T_w2c, state)
            ba_ms = 1e3 * (time.perf_counter() - t1)
            self._anchor_frame(index, self.ref_id, Pose.identity())
        else:
            self._anchor_frame(index, self.ref_id, state.T)
        return FrameResult(
            index=index,
            pose_wc=T_w2c.inverse(),
            is_keyframe=made_kf,
            tracking=state,
            n_points=len(self.points),
            n_keyframes=len(self.kf_order),
            track_ms=track_ms,
            ba_ms=ba_ms,
        )

    # -- internals -------------------------------------------------------

    def _resolve_raster(self, depth_raster):
        raster = depth_raster() if callable(depth_raster) else depth_raster
        if raster is None:
            raise MissingDepthRaster("a keyframe needs a depth prediction raster")
        return np.asarray(raster, dtype=float)

    def _predict_relative(self, ref):
        if self._prev_T is None:
            return Pose.identity()
        if self._prev_prev_T is None:
            motion = Pose.identity()
        else:
            motion = self._prev_T @ self._prev_prev_T.inverse()
        return (motion @ self._prev_T) @ ref.pose.inverse()

    def _track(self, image, ref):
        """Track from the constant-velocity prediction and from a
        zero-motion start, keeping the lower mean photometric residual.

        The velocity extrapolation couples consecutive frames: along
        weakly-constrained directions its prediction error feeds back
        into the next prediction and can grow without bound. The
        zero-motion candidate is independent of that loop and wins as
        soon as the extrapolated branch degrades.
        """
        candidates = []
        errors = []
        hold = Pose.identity() if self._prev_T is None \
            else self._prev_T @ ref.pose.inverse()
        inits = [FrameState(T=self._predict_relative(ref), a=self.last_rel.a,
                            b=self.last_rel.b),
                 FrameState(T=hold, a=self.last_rel.a, b=self.last_rel.b)]
        for init in inits:
            try:
                candidates.append(retry_with_rotations(image, ref, self.depth_map,
                                                       init, self.cfg))
            except TrackingLost as exc:
                errors.append(exc)
        if not candidates:
            raise errors[0]
        return min(candidates, key=lambda st: st.mean_residual)

    def _bootstrap(self, image, depth_raster):
        raster = self._resolve_raster(depth_raster)
        kf = Keyframe(self.next_kf_id, image, Pose.identity(), self.camera, raster,
                      levels=self.cfg.pyramid_levels)
        self.next_kf_id += 1
        self.keyframes[kf.id] = kf
        self.kf_order.append(kf.id)
        self.ref_id = kf.id
        self._extract_points(kf)
        self._rebuild_depth_map()

    def _extract_points(self, kf):
        coverage = []
        for pid in kf.observed:
            pt = self.points[pid]
            host = self.keyframes[pt.host_id]
            x = kf.pose.act(host.pose.inverse().act(pt.bearing / pt.rho))
            if x[2] > 1e-8:
                cam = self.camera
                coverage.append([cam.fx * x[0] / x[2] + cam.cx,
                                 cam.fy * x[1] / x[2] + cam.cy])
        coverage = np.asarray(coverage) if coverage else np.empty((0, 2))
        cands = extract_candidates(kf, coverage, self.cfg,
                                   existing_count=len(kf.observed))
        for u, v, rho in cands:
            pt = make_point(self.next_point_id, kf, (u, v), rho)
            self.next_point_id += 1
            self.points[pt.id] = pt
            kf.hosted.append(pt.id)

    def _insert_keyframe(self, image, depth_raster, T_w2c, state):
        raster = self._resolve_raster(depth_raster)
        ref = self.keyframes[self.ref_id]
        a_new = ref.a + state.a
        b_new = state.b + np.exp(state.a) * ref.b
        kf = Keyframe(self.next_kf_id, image, T_w2c, self.camera, raster,
                      a=a_new, b=b_new, levels=self.cfg.pyramid_levels)
        self.next_kf_id += 1
        self.keyframes[kf.id] = kf
        self.kf_order.append(kf.id)

        # every active point is assumed observed (when it projects inside)
        margin = 3.0
        cam = self.camera
        for pt in self.active_points():
            host = self.keyframes[pt.host_id]
            x = kf.pose.act(host.pose.inverse().act(pt.bearing / pt.rho))
            if x[2] <= 1e-8:
                continue
            u = cam.fx * x[0] / x[2] + cam.cx
            v = cam.fy * x[1] / x[2] + cam.cy
            if margin <= u <= cam.width - 1 - margin \
                    and margin <= v <= cam.height - 1 - margin:
                pt.observations[kf.id] = ObsStats()
                kf.observed.append(pt.id)

        self._extract_points(kf)

        window = [self.keyframes[k] for k in self.optimization_window()]
        problem = BAProblem.from_map(window, self.keyframes, self.points)
        stats = solve(problem, self.cfg)
        update_observation_stats(problem, stats)
        # culling first: the high-mean-residual rule needs the per-
        # observation statistics that outlier discard would remove
        cull_points(self.points, self.keyframes, self.active_window(), self.cfg)
        discard_outlier_observations(problem, stats, self.keyframes, self.cfg)

        if len(self.kf_order) > self.cfg.n_active:
            leaving_id = self.kf_order[-(self.cfg.n_active + 1)]
            leaving = self.keyframes.get(leaving_id)
            if leaving is not None and is_redundant(leaving, self.points, self.cfg):
                self._bake_anchors_of(leaving_id)
                cull_redundant_keyframes([leaving_id], self.keyframes,
                                         self.points, self.cfg)
                self.kf_order.remove(leaving_id)

        self.ref_id = kf.id
        self.last_rel = FrameState(T=Pose.identity())
        # rebase the motion model onto the bundle-adjusted keyframe pose;
        # predictions built against the pre-adjustment estimate would
        # inject the adjustment as spurious velocity
        self._prev_T = kf.pose
        self._prev_prev_T = None
        self._rebuild_depth_map()

    def _rebuild_depth_map(self):
        ref = self.keyframes[self.ref_id]
        pairs = [(pt, self.keyframes[pt.host_id]) for pt in self.active_points()]
        self.depth_map = build_sparse_depth_map(ref, pairs, self.cfg)
