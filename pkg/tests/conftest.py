"""Shared fixtures: keyframe views and ground-truth tracking setups
built from the synthetic renderer."""

import numpy as np
import pytest

from depthvo.config import OdometryConfig
from depthvo.image import build_pyramid
from depthvo.residuals import FrameView
from depthvo.tracking import SparseDepthMap


def make_keyframe_view(scene, frame_idx=None, T_wc=None, a=0.0, b=0.0,
                       levels=5, with_raster=True):
    """FrameView from a rendered scene frame (pose stored world-to-camera)."""
    T_wc = scene.poses_wc[frame_idx] if T_wc is None else T_wc
    image, idepth = scene.render_at(T_wc)
    return FrameView(
        pose=T_wc.inverse(),
        a=a, b=b,
        camera=scene.camera,
        pyramid=build_pyramid(image, levels),
        raster=idepth if with_raster else None,
    )


def make_analytic_keyframe_view(scene, frame_idx=None, T_wc=None, a=0.0, b=0.0,
                                levels=5):
    """FrameView whose pyramid and raster are closed-form (no interpolation)."""
    T_wc = scene.poses_wc[frame_idx] if T_wc is None else T_wc
    view = scene.analytic_image(T_wc)
    return FrameView(
        pose=T_wc.inverse(),
        a=a, b=b,
        camera=scene.camera,
        pyramid=[view.level_view(l) for l in range(levels)],
        raster=scene.analytic_idepth(T_wc),
    )


def gt_depth_map(scene, frame_idx=None, T_wc=None, stride=6, margin=8, weight=1.0):
    """Sparse depth map on a pixel grid using exact rendered inverse depth."""
    T_wc = scene.poses_wc[frame_idx] if T_wc is None else T_wc
    _, idepth = scene.render_at(T_wc)
    cam = scene.camera
    us, vs = np.meshgrid(np.arange(margin, cam.width - margin, stride),
                         np.arange(margin, cam.height - margin, stride))
    pixels = np.stack([us.ravel(), vs.ravel()], axis=1)
    vals = idepth[pixels[:, 1], pixels[:, 0]]
    ok = np.isfinite(vals)
    return SparseDepthMap(pixels=pixels[ok],
                          idepth=vals[ok],
                          weight=np.full(ok.sum(), float(weight)))


def pose_errors(T_est, T_gt):
    """(rotation degrees, translation meters) between two relative poses."""
    from depthvo.geometry import se3_log
    err = se3_log(T_est @ T_gt.inverse())
    return np.rad2deg(np.linalg.norm(err[3:])), np.linalg.norm(err[:3])


@pytest.fixture
def default_config():
    return OdometryConfig()


class AnalyticKeyframe:
    """Keyframe whose views are closed-form: zero interpolation noise."""

    def __init__(self, kf_id, scene, T_wc, levels=5):
        self.id = kf_id
        self.pose = T_wc.inverse()
        self.a = 0.0
        self.b = 0.0
        self.camera = scene.camera
        view = scene.analytic_image(T_wc)
        self.pyramid = [view.level_view(l) for l in range(levels)]
        self.raster = scene.analytic_idepth(T_wc)
        self.hosted = []
        self.observed = []


def make_ba_setup(scene, kf_indices, stride=24, obs_ahead=4, margin=12,
                  corrupt_rasters=None, rho_init="gt", analytic=False,
                  consistent_host=False):
    """Keyframes + ground-truth-anchored points + observations for BA tests.

    corrupt_rasters: optional {frame_idx: raster} overriding the exact
    rendered inverse depth. rho_init: "gt" (true inverse range) or
    "raster" (value read from the keyframe's raster, as the pipeline
    initializes points). analytic=True builds closed-form keyframes
    (noise-free photometry, for strict fixed-point tests).
    consistent_host=True makes the cached host raster value equal the
    true inverse range, so every residual family is exactly zero at
    ground truth (the idealized fixed-point construction).
    """
    from depthvo.mapping import Keyframe, MapPoint, ObsStats

    cam = scene.camera
    keyframes = {}
    for kf_id, idx in enumerate(kf_indices):
        if analytic:
            keyframes[kf_id] = AnalyticKeyframe(kf_id, scene, scene.poses_wc[idx])
            continue
        image, idepth = scene.render(idx)
        raster = idepth if corrupt_rasters is None or idx not in corrupt_rasters \
            else corrupt_rasters[idx]
        keyframes[kf_id] = Keyframe(kf_id, image, scene.poses_wc[idx].inverse(),
                                    cam, raster)

    points = {}
    pid = 0
    for kf_id, idx in enumerate(kf_indices):
        kf = keyframes[kf_id]
        _, idepth_true = scene.render(idx)
        for v in range(margin, cam.height - margin, stride):
            for u in range(margin, cam.width - margin, stride):
                z_inv = idepth_true[v, u]
                if not np.isfinite(z_inv):
                    continue
                d = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
                norm = np.linalg.norm(d)
                rho_gt = z_inv / norm
                raster_val = float(z_inv) if analytic else float(kf.raster[v, u])
                if consistent_host:
                    raster_val = float(rho_gt)
                rho0 = rho_gt if rho_init == "gt" else raster_val
                pt = MapPoint(id=pid, host_id=kf_id,
                              host_pixel=np.array([float(u), float(v)]),
                              bearing=d / norm, rho=rho0,
                              host_raster_value=raster_val)
                # observations: later keyframes seeing the point
                p_w = scene.poses_wc[idx].act(d / rho_gt / norm)
                for other_id in range(kf_id + 1, min(kf_id + 1 + obs_ahead,
                                                     len(kf_indices))):
                    x_o = keyframes[other_id].pose.act(p_w)
                    if x_o[2] <= 0.1:
                        continue
                    uo = cam.fx * x_o[0] / x_o[2] + cam.cx
                    vo = cam.fy * x_o[1] / x_o[2] + cam.cy
                    if 6 <= uo <= cam.width - 7 and 6 <= vo <= cam.height - 7:
                        pt.observations[other_id] = ObsStats()
                        keyframes[other_id].observed.append(pid)
                if pt.observations:
                    kf.hosted.append(pid)
                    points[pid] = pt
                    pid += 1
    return keyframes, points


def make_wall_scene(seed=1, fx=600.0, n_frames=8, step=0.2):
    """Single fronto-parallel textured wall: the pattern's shared-rho
    approximation is exact there, so a consistent problem has an exact
    zero-residual fixed point."""
    from depthvo.geometry import CameraModel
    from depthvo.synthetic import SceneConfig, SyntheticScene, Texture, _make_texture

    rng = np.random.default_rng(seed)
    cfg = SceneConfig(fx=fx, fy=fx, n_frames=n_frames, step=step,
                      trajectory="straight", pitch_deg=0.0,
                      texture_freqs=(0.35, 1.1, 3.0), texture_amps=(40.0, 28.0, 16.0))
    camera = CameraModel(cfg.fx, cfg.fy, (cfg.width - 1) / 2, (cfg.height - 1) / 2,
                         cfg.width, cfg.height)
    texture = _make_texture(rng, cfg.texture_freqs, cfg.texture_amps)
    planes = [(np.array([0.0, 0.0, 1.0]), 14.0)]
    from depthvo.geometry import Pose
    poses = [Pose(np.eye(3), np.array([0.02 * i, 0.01 * np.sin(i), step * i]))
             for i in range(n_frames)]
    return SyntheticScene(camera, poses, planes, texture, cfg, seed=seed)


def gentle_scene(seed, fx=600.0, **kw):
    """Moderate texture and focal length: wide convergence basins and
    low interpolation bias, for accuracy-oriented oracles. The far wall
    sits inside the alias-free footprint range of the texture band."""
    from depthvo.synthetic import SceneConfig, generate_scene

    kw.setdefault("depth_range", (2.0, 25.0))
    kw.setdefault("pitch_deg", 6.0)
    cfg = SceneConfig(fx=fx, fy=fx, texture_freqs=(0.35, 1.1, 3.0),
                      texture_amps=(40.0, 28.0, 16.0), **kw)
    return generate_scene(seed, cfg)


def run_odometry(scene, cfg, n_frames=None, raster_log=None):
    """Feed a rendered scene through the pipeline with lazy rasters."""
    from depthvo.pipeline import Odometry

    odo = Odometry(scene.camera, cfg)
    n = n_frames if n_frames is not None else scene.config.n_frames
    results = []
    for i in range(n):
        image = scene.render_frame_image(i)

        def loader(i=i):
            if raster_log is not None:
                raster_log.append(i)
            return scene.prediction_raster(i)[0]

        results.append(odo.process_frame(image, loader))
    return odo, results


def scale_gauge_perturb(keyframes, points, s):
    """Apply the global scale gauge: camera centers x s, rho / s."""
    from depthvo.geometry import Pose
    for kf in keyframes.values():
        kf.pose = Pose(kf.pose.R, s * kf.pose.t)
    for pt in points.values():
        pt.rho = pt.rho / s
