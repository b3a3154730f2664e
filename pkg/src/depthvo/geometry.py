"""SE(3) geometry, pinhole camera model and inverse-depth point transport.

Twist layout is (v, w): translational part first, rotational part last.
Poses are stored as a rotation matrix plus translation vector; a pose maps
points from its source frame into its target frame, x_tgt = R x_src + t.
Keyframe poses throughout the system are world-to-camera, and pose updates
are applied by right multiplication T * Exp(xi), i.e. on the world side
(global-frame update), which is what makes host and observer derivatives
of a shared residual equal up to sign.
"""

from __future__ import annotations

import numpy as np

from .errors import NonPositiveDepth, NonPositiveInverseDepth

# Renormalize the rotation after this many chained compositions.
_RENORM_EVERY = 1000

_SMALL_ANGLE = 1e-6


def skew(w):
    """3x3 cross-product matrix [w]_x."""
    w = np.asarray(w, dtype=float)
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def so3_exp(w):
    """Rodrigues rotation for a rotation vector w (radians)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < _SMALL_ANGLE:
        # 2nd-order Taylor; error O(theta^3) ~ 1e-18
        return np.eye(3) + W + 0.5 * (W @ W)
    s, c = np.sin(theta), np.cos(theta)
    return np.eye(3) + (s / theta) * W + ((1.0 - c) / theta**2) * (W @ W)


def so3_log(R):
    """Rotation vector of R; principal branch, |w| <= pi."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < _SMALL_ANGLE:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - theta < 1e-6:
        # Near pi the antisymmetric part degenerates; use the symmetric part.
        A = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        k = int(np.argmax(axis))
        axis[(k + 1) % 3] = A[k, (k + 1) % 3] / axis[k]
        axis[(k + 2) % 3] = A[k, (k + 2) % 3] / axis[k]
        axis /= np.linalg.norm(axis)
        # Fix the sign using the antisymmetric part where it is nonzero.
        w_asym = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(axis, w_asym) < 0.0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


def _left_jacobian(w):
    """SO(3) left Jacobian V(w): translation factor of the SE(3) exponential."""
    theta = np.linalg.norm(w)
    W = skew(w)
    t2 = theta * theta
    if theta < 1e-4:
        # series for (1-cos)/t^2 and (t-sin)/t^3; avoids 1-cos cancellation
        a = 0.5 - t2 / 24.0
        b = 1.0 / 6.0 - t2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / t2
        b = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * W + b * (W @ W)


def _left_jacobian_inv(w):
    theta = np.linalg.norm(w)
    W = skew(w)
    t2 = theta * theta
    if theta < 1e-2:
        # the closed form cancels catastrophically below ~1e-3
        coef = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        coef = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / t2
    return np.eye(3) - 0.5 * W + coef * (W @ W)


class Pose:
    """Rigid transform in SE(3): x_out = R x_in + t."""

    __slots__ = ("R", "t", "_ops")

    def __init__(self, R=None, t=None, _ops=0):
        self.R = np.eye(3) if R is None else np.asarray(R, dtype=float)
        self.t = np.zeros(3) if t is None else np.asarray(t, dtype=float).reshape(3)
        self._ops = _ops

    @staticmethod
    def identity():
        return Pose()

    @staticmethod
    def from_matrix(T):
        T = np.asarray(T, dtype=float)
        return Pose(T[:3, :3].copy(), T[:3, 3].copy())

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Pose") -> "Pose":
        ops = max(self._ops, other._ops) + 1
        out = Pose(self.R @ other.R, self.R @ other.t + self.t, _ops=ops)
        if ops > _RENORM_EVERY:
            return out.renormalized()
        return out

    def __matmul__(self, other):
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t, _ops=self._ops)

    def act(self, x):
        """Apply to one point (3,) or many (..., 3)."""
        x = np.asarray(x, dtype=float)
        return x @ self.R.T + self.t

    def retract(self, xi) -> "Pose":
        """Right-multiplicative (global-frame) update T * Exp(xi)."""
        return self.compose(se3_exp(xi))

    def adjoint(self):
        return adjoint(self)

    def renormalized(self) -> "Pose":
        """Project the rotation back onto SO(3) (nearest orthogonal matrix)."""
        U, _, Vt = np.linalg.svd(self.R)
        R = U @ Vt
        if np.linalg.det(R) < 0.0:
            R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
        return Pose(R, self.t.copy(), _ops=0)

    def __repr__(self):
        return f"Pose(R={self.R.tolist()}, t={self.t.tolist()})"


def se3_exp(xi) -> Pose:
    """Closed-form exponential map of a twist (v, w)."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    v, w = xi[:3], xi[3:]
    return Pose(so3_exp(w), _left_jacobian(w) @ v)


def se3_log(T: Pose):
    """Twist (v, w) with se3_exp(se3_log(T)) == T; valid for |w| < pi."""
    w = so3_log(T.R)
    v = _left_jacobian_inv(w) @ T.t
    return np.concatenate([v, w])


def adjoint(T: Pose):
    """6x6 adjoint Ad_T with Exp(Ad_T xi) * T == T * Exp(xi)."""
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = T.R
    Ad[:3, 3:] = skew(T.t) @ T.R
    Ad[3:, 3:] = T.R
    return Ad


class CameraModel:
    """Pinhole camera without distortion."""

    __slots__ = ("fx", "fy", "cx", "cy", "width", "height")

    def __init__(self, fx, fy, cx, cy, width, height):
        if fx <= 0 or fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= cx < width and 0 <= cy < height):
            raise ValueError("principal point must lie inside the image")
        self.fx = float(fx)
        self.fy = float(fy)
        self.cx = float(cx)
        self.cy = float(cy)
        self.width = int(width)
        self.height = int(height)

    def K(self):
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def scaled(self, level: int) -> "CameraModel":
        """Camera for pyramid level `level` (half-pixel-centered downscaling)."""
        if level == 0:
            return self
        s = 2.0 ** level
        return CameraModel(
            self.fx / s, self.fy / s,
            (self.cx + 0.5) / s - 0.5, (self.cy + 0.5) / s - 0.5,
            int(np.ceil(self.width / s)), int(np.ceil(self.height / s)),
        )

    def contains(self, u, margin=0.0):
        u = np.asarray(u, dtype=float)
        return ((u[..., 0] >= margin) & (u[..., 0] <= self.width - 1 - margin)
                & (u[..., 1] >= margin) & (u[..., 1] <= self.height - 1 - margin))

    def __repr__(self):
        return (f"CameraModel(fx={self.fx}, fy={self.fy}, cx={self.cx}, "
                f"cy={self.cy}, width={self.width}, height={self.height})")


def project(x, cam: CameraModel):
    """Pinhole projection; x is (3,) or (..., 3) with positive z."""
    x = np.asarray(x, dtype=float)
    z = x[..., 2]
    if np.any(z <= 1e-8):
        raise NonPositiveDepth(f"z = {np.min(z)}")
    u = cam.fx * x[..., 0] / z + cam.cx
    v = cam.fy * x[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def backproject(u, rho, cam: CameraModel):
    """Inverse projection at inverse z-depth rho: z component equals 1/rho."""
    if np.any(np.asarray(rho) <= 0):
        raise NonPositiveInverseDepth(f"rho = {rho}")
    u = np.asarray(u, dtype=float)
    x = (u[..., 0] - cam.cx) / cam.fx
    y = (u[..., 1] - cam.cy) / cam.fy
    one = np.ones_like(x)
    return np.stack([x, y, one], axis=-1) / np.asarray(rho)[..., None]


def bearing_from_pixel(u, cam: CameraModel):
    """Unit ray direction through pixel u; fixed for the lifetime of a point."""
    d = backproject(u, 1.0, cam)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def transform_point(T_ih: Pose, bearing, rho):
    """Map a host-anchored point into the observer frame.

    Returns x_i = R_ih (bearing / rho) + t_ih. The scaled form
    rho * x_i = R_ih bearing + rho * t_ih used by the Jacobians is
    available via scaled_transform.
    """
    return scaled_transform(T_ih, bearing, rho) / rho


def scaled_transform(T_ih: Pose, bearing, rho):
    """rho * x_i = R_ih bearing + rho * t_ih (linear in rho)."""
    bearing = np.asarray(bearing, dtype=float)
    return bearing @ T_ih.R.T + np.asarray(rho)[..., None] * T_ih.t \
        if bearing.ndim > 1 else T_ih.R @ bearing + rho * T_ih.t
