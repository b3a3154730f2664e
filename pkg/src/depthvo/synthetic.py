"""Synthetic scene generation and rendering for verification.

The scene is the interior of a convex room made of textured planes.
Convexity means every camera inside the room sees every surface point
unoccluded, so rendered image and depth are photoconsistent by
construction: warping one view into another through the true depth must
reproduce it up to interpolation error.

Intensity is an analytic function of the 3-D surface point (a fixed bank
of spatial sinusoids), so views can be rendered as arrays or sampled in
closed form with exact gradients (``analytic_image`` /
``analytic_idepth``), which is what the Jacobian finite-difference
oracle needs: an infinitely smooth image with no interpolation cells.

Depth rasters use the inverse z-depth convention (value = 1 / z_cam).
Exported "prediction" rasters may carry multiplicative noise and
block-structured outliers; the exact corrupted pixel set is returned so
tests can audit which residuals were poisoned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, Pose, so3_exp


@dataclass
class SceneConfig:
    width: int = 256
    height: int = 192
    fx: float = 1100.0
    fy: float = 1100.0
    n_frames: int = 50
    trajectory: str = "arc"  # straight | arc | turn
    step: float = 0.30  # meters per frame
    yaw_rate_deg: float = 0.5
    pitch_deg: float = 5.0  # camera tilted down so the ground fills the view
    depth_range: tuple = (2.0, 50.0)
    hall_half_width: float = 6.5
    ground_y: float = 1.3
    ceiling_y: float = -3.0
    texture_freqs: tuple = (0.35, 1.1, 3.0, 8.0)  # rad / meter
    texture_amps: tuple = (38.0, 26.0, 16.0, 12.0)
    intensity_sigma: float = 0.0
    depth_noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    outlier_magnitude: float = 2.0
    outlier_block: int = 16


@dataclass
class Texture:
    directions: np.ndarray  # (K, 3) unit vectors
    freqs: np.ndarray  # (K,)
    amps: np.ndarray  # (K,)
    phases: np.ndarray  # (K,)
    base: float = 128.0

    def value(self, p):
        phase = (p @ self.directions.T) * self.freqs + self.phases
        return self.base + np.sin(phase) @ self.amps

    def grad(self, p):
        phase = (p @ self.directions.T) * self.freqs + self.phases
        coef = np.cos(phase) * (self.amps * self.freqs)
        return coef @ self.directions


def _make_texture(rng, freqs, amps):
    k = len(freqs)
    dirs = rng.normal(size=(k, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    phases = rng.uniform(0.0, 2 * np.pi, k)
    return Texture(directions=dirs, freqs=np.asarray(freqs, dtype=float),
                   amps=np.asarray(amps, dtype=float), phases=phases)


def _yaw_pitch_pose(yaw, pitch, position):
    """Camera-to-world pose: heading about world y, then downward pitch
    about the camera x axis (world y points down, so tilting the optical
    axis toward the ground is a negative rotation about x)."""
    R = so3_exp([0.0, yaw, 0.0]) @ so3_exp([-pitch, 0.0, 0.0])
    return Pose(R, np.asarray(position, dtype=float))


class SyntheticScene:
    """Planes + texture + ground-truth camera trajectory."""

    def __init__(self, camera, poses_wc, planes, texture, config, seed=0):
        self.camera = camera
        self.poses_wc = poses_wc  # camera-to-world, one per frame
        self.planes = planes  # list of (normal (3,), offset b): n . p = b
        self.texture = texture
        self.config = config
        self.seed = seed

    # -- ray tracing ------------------------------------------------------

    def trace(self, T_wc, x, y):
        """Ray-cast pixels (x, y): returns (z_depth, world points, valid)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        cam = self.camera
        d_cam = np.stack([(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy,
                          np.ones_like(x)], axis=-1)
        d_w = d_cam @ T_wc.R.T
        c_w = T_wc.t
        best = np.full(x.shape, np.inf)
        for n, b in self.planes:
            denom = d_w @ n
            num = b - c_w @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                s = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
            s = np.where(s > 0.5, s, np.inf)  # in front, beyond the near limit
            best = np.minimum(best, s)
        valid = np.isfinite(best)
        p_w = c_w + d_w * np.where(valid, best, 1.0)[..., None]
        return best, p_w, valid

    # -- rendering --------------------------------------------------------

    def render_at(self, T_wc):
        """Render image and exact inverse-depth raster from a pose."""
        cam = self.camera
        xs, ys = np.meshgrid(np.arange(cam.width, dtype=float),
                             np.arange(cam.height, dtype=float))
        s, p_w, valid = self.trace(T_wc, xs, ys)
        image = np.clip(self.texture.value(p_w), 0.0, 255.0)
        idepth = np.where(valid, 1.0 / s, np.nan)
        return image, idepth

    def render(self, frame_idx):
        return self.render_at(self.poses_wc[frame_idx])

    def analytic_image(self, T_wc):
        return AnalyticImage(self, T_wc)

    def analytic_idepth(self, T_wc):
        return AnalyticIdepth(self, T_wc)

    # -- exported predictions ---------------------------------------------

    def prediction_raster(self, frame_idx):
        """Inverse-depth raster as a depth network would supply it.

        Applies multiplicative noise and block outliers (seeded per
        frame). Returns (raster, corrupted_mask).
        """
        cfg = self.config
        _, idepth = self.render(frame_idx)
        rng = np.random.default_rng((self.seed, 0xDEE, frame_idx))
        raster = idepth.copy()
        if cfg.depth_noise_sigma > 0:
            noise = 1.0 + cfg.depth_noise_sigma * rng.standard_normal(raster.shape)
            raster *= np.maximum(noise, 0.05)
        mask = np.zeros(raster.shape, dtype=bool)
        n_corrupt = int(np.floor(cfg.outlier_fraction * raster.size))
        if n_corrupt > 0:
            mask = _block_mask(raster.shape, n_corrupt, cfg.outlier_block, rng)
            raster[mask] *= cfg.outlier_magnitude
        raster = np.maximum(raster, 1e-4)
        return raster, mask

    def render_frame_image(self, frame_idx):
        image, _ = self.render(frame_idx)
        if self.config.intensity_sigma > 0:
            rng = np.random.default_rng((self.seed, 0x1A6E, frame_idx))
            image = image + self.config.intensity_sigma * rng.standard_normal(image.shape)
            image = np.clip(image, 0.0, 255.0)
        return image


def _block_mask(shape, n_target, block, rng):
    """Exactly n_target pixels set, laid out as contiguous blocks."""
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    count = 0
    guard = 0
    while count < n_target and guard < 100_000:
        guard += 1
        r = int(rng.integers(0, max(h - block, 1)))
        c = int(rng.integers(0, max(w - block, 1)))
        fresh = ~mask[r:r + block, c:c + block]
        n_fresh = int(fresh.sum())
        if n_fresh == 0:
            continue
        if count + n_fresh <= n_target:
            mask[r:r + block, c:c + block] = True
            count += n_fresh
        else:
            need = n_target - count
            rr, cc = np.nonzero(fresh)
            mask[r + rr[:need], c + cc[:need]] = True
            count = n_target
    return mask


class AnalyticImage:
    """Closed-form rendered view: C-infinity samples with exact gradients."""

    def __init__(self, scene, T_wc, level=0):
        self.scene = scene
        self.T_wc = T_wc
        self.level = level
        cam = scene.camera.scaled(level)
        self.width = cam.width
        self.height = cam.height

    def level_view(self, level):
        return AnalyticImage(self.scene, self.T_wc, level)

    def _to_full(self, x, y):
        s = 2.0 ** self.level
        return (np.asarray(x, dtype=float) + 0.5) * s - 0.5, \
               (np.asarray(y, dtype=float) + 0.5) * s - 0.5

    def sample(self, x, y):
        x0, y0 = self._to_full(x, y)
        _, p_w, valid = self.scene.trace(self.T_wc, x0, y0)
        return np.where(valid, self.scene.texture.value(p_w), np.nan)

    def sample_with_grad(self, x, y):
        x0, y0 = self._to_full(x, y)
        scene, T = self.scene, self.T_wc
        cam = scene.camera
        d_cam = np.stack([(x0 - cam.cx) / cam.fx, (y0 - cam.cy) / cam.fy,
                          np.ones_like(x0)], axis=-1)
        d_w = d_cam @ T.R.T
        s, p_w, valid = scene.trace(T, x0, y0)
        n_hit, b_hit = _hit_plane(scene, T.t, d_w, s)
        # p(u) = c + s(u) d(u);  s = (b - n.c)/(n.d)
        # dp/du = d * ds/du + s * dd/du,  ds/du = -s (n . dd/du) / (n . d)
        dd_dx = (T.R[:, 0] / cam.fx)
        dd_dy = (T.R[:, 1] / cam.fy)
        nd = np.einsum("...k,...k->...", d_w, n_hit)
        s_safe = np.where(valid, s, 1.0)
        tex_grad = scene.texture.grad(p_w)
        scale = 2.0 ** self.level

        def directional(dd):
            n_dd = n_hit @ dd
            ds = -s_safe * n_dd / nd
            dp = d_w * ds[..., None] + s_safe[..., None] * dd
            return np.einsum("...k,...k->...", tex_grad, dp) * scale

        val = np.where(valid, scene.texture.value(p_w), np.nan)
        return val, directional(dd_dx), directional(dd_dy)


class AnalyticIdepth:
    """Closed-form inverse z-depth of a view, with exact pixel gradients."""

    def __init__(self, scene, T_wc):
        self.scene = scene
        self.T_wc = T_wc
        self.width = scene.camera.width
        self.height = scene.camera.height

    def sample(self, x, y):
        s, _, valid = self.scene.trace(self.T_wc, x, y)
        return np.where(valid, 1.0 / s, np.nan)

    def sample_with_grad(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        scene, T = self.scene, self.T_wc
        cam = scene.camera
        d_cam = np.stack([(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy,
                          np.ones_like(x)], axis=-1)
        d_w = d_cam @ T.R.T
        s, _, valid = scene.trace(T, x, y)
        n_hit, _ = _hit_plane(scene, T.t, d_w, s)
        nd = np.einsum("...k,...k->...", d_w, n_hit)
        s_safe = np.where(valid, s, 1.0)
        dd_dx = (T.R[:, 0] / cam.fx)
        dd_dy = (T.R[:, 1] / cam.fy)

        def dinv(dd):
            n_dd = n_hit @ dd
            ds = -s_safe * n_dd / nd
            return -ds / (s_safe * s_safe)

        val = np.where(valid, 1.0 / s_safe, np.nan)
        return val, dinv(dd_dx), dinv(dd_dy)


def _hit_plane(scene, c_w, d_w, s_hit):
    """Normal and offset of the plane actually hit by each ray."""
    best_n = np.zeros(d_w.shape[:-1] + (3,))
    best_b = np.zeros(d_w.shape[:-1])
    best_err = np.full(d_w.shape[:-1], np.inf)
    p = c_w + d_w * s_hit[..., None]
    for n, b in scene.planes:
        err = np.abs(p @ n - b)
        better = err < best_err
        best_err = np.where(better, err, best_err)
        best_n = np.where(better[..., None], n, best_n)
        best_b = np.where(better, b, best_b)
    return best_n, best_b


def generate_scene(seed, cfg: SceneConfig | None = None) -> SyntheticScene:
    """Build the corridor scene and its ground-truth trajectory."""
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    camera = CameraModel(cfg.fx, cfg.fy, (cfg.width - 1) / 2.0, (cfg.height - 1) / 2.0,
                         cfg.width, cfg.height)
    texture = _make_texture(rng, cfg.texture_freqs, cfg.texture_amps)

    far_z = cfg.depth_range[1] - 5.0
    planes = [
        (np.array([0.0, 1.0, 0.0]), cfg.ground_y),      # ground (y points down)
        (np.array([0.0, 1.0, 0.0]), cfg.ceiling_y),     # ceiling
        (np.array([1.0, 0.0, 0.0]), cfg.hall_half_width),
        (np.array([1.0, 0.0, 0.0]), -cfg.hall_half_width),
        (np.array([0.0, 0.0, 1.0]), far_z),             # far wall
        (np.array([0.0, 0.0, 1.0]), -10.0),             # behind the start
    ]

    pitch = np.deg2rad(cfg.pitch_deg)
    yaw_rate = np.deg2rad(cfg.yaw_rate_deg)
    poses = []
    position = np.zeros(3)
    for i in range(cfg.n_frames):
        if cfg.trajectory == "straight":
            yaw = 0.0
        elif cfg.trajectory == "arc":
            yaw = yaw_rate * i
        elif cfg.trajectory == "turn":
            yaw = yaw_rate * 4.0 * max(0, i - cfg.n_frames // 2)
        else:
            raise ValueError(f"unknown trajectory {cfg.trajectory!r}")
        pose = _yaw_pitch_pose(yaw, pitch, position)
        poses.append(pose)
        heading = np.array([np.sin(yaw), 0.0, np.cos(yaw)])
        position = position + cfg.step * heading
    return SyntheticScene(camera, poses, planes, texture, cfg, seed=seed)
