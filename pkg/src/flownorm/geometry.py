"""Pinhole camera, SE(3) poses and the point projection used by direct alignment.

Conventions:
    - A pose ``T`` maps points from the source camera frame into the target
      camera frame: ``X_t = R @ X_s + t``.
    - Tangent vectors are ordered ``[rho (translation, m); omega (rotation, rad)]``.
    - Updates are applied on the left: ``retract(T, delta) = exp(delta) @ T``.
    - Landmarks are parameterised by inverse depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, InvalidConfigurationError

DEPTH_FLOOR = 1e-6
BORDER_MARGIN = 2.0


def skew(w):
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]], dtype=float
    )


def _so3_coefficients(theta):
    # A = sin(t)/t, B = (1-cos t)/t^2, C = (t - sin t)/t^3 with Taylor fallbacks
    if theta < 1e-4:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    return (
        math.sin(theta) / theta,
        (1.0 - math.cos(theta)) / theta**2,
        (theta - math.sin(theta)) / theta**3,
    )


def so3_exp(omega):
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    a, b, _ = _so3_coefficients(theta)
    W = skew(omega)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R):
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = math.acos(cos_theta)
    if theta < 1e-6:
        # first order: R - R^T = 2 [w]x
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if math.pi - theta < 1e-4:
        # near pi the antisymmetric part vanishes; read the axis off R + I
        M = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / math.sqrt(max(M[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        # fix the sign using the (small) antisymmetric part
        s = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if axis @ s < 0:
            axis = -axis
        return theta * axis
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * math.sin(theta)) * v


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform with an orthonormal rotation matrix and translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def exp(cls, delta):
        delta = np.asarray(delta, dtype=float).reshape(6)
        rho, omega = delta[:3], delta[3:]
        theta = float(np.linalg.norm(omega))
        a, b, c = _so3_coefficients(theta)
        W = skew(omega)
        WW = W @ W
        R = np.eye(3) + a * W + b * WW
        V = np.eye(3) + b * W + c * WW
        return cls(R, V @ rho)

    def log(self):
        omega = so3_log(self.rotation)
        theta = float(np.linalg.norm(omega))
        W = skew(omega)
        if theta < 1e-4:
            V_inv = np.eye(3) - 0.5 * W + (1.0 / 12.0) * (W @ W)
        else:
            a, b, _ = _so3_coefficients(theta)
            V_inv = np.eye(3) - 0.5 * W + (1.0 - a / (2.0 * b)) / theta**2 * (W @ W)
        return np.concatenate([V_inv @ self.translation, omega])

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @classmethod
    def from_quaternion(cls, q_xyzw, translation=(0.0, 0.0, 0.0)):
        x, y, z, w = (float(v) for v in q_xyzw)
        n = math.sqrt(x * x + y * y + z * z + w * w)
        x, y, z, w = x / n, y / n, z / n, w / n
        R = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )
        return cls(R, translation)

    def quaternion(self):
        """Unit quaternion (x, y, z, w) with w >= 0."""
        R = self.rotation
        tr = np.trace(R)
        if tr > 0:
            s = 2.0 * math.sqrt(tr + 1.0)
            q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
        else:
            i = int(np.argmax(np.diag(R)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = 2.0 * math.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 1e-300))
            q = [0.0, 0.0, 0.0, (R[k, j] - R[j, k]) / s]
            q[i] = 0.25 * s
            q[j] = (R[j, i] + R[i, j]) / s
            q[k] = (R[k, i] + R[i, k]) / s
        q = np.array(q)
        q /= np.linalg.norm(q)
        return -q if q[3] < 0 else q

    def inverse(self):
        Rt = self.rotation.T
        return SE3Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        if isinstance(other, SE3Pose):
            return SE3Pose(
                self.rotation @ other.rotation,
                self.rotation @ other.translation + self.translation,
            )
        return NotImplemented

    def transform(self, points):
        """Apply to an (N, 3) array (or a single 3-vector) of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def orthonormality_error(self):
        return float(np.linalg.norm(self.rotation.T @ self.rotation - np.eye(3)))


def retract(T, delta):
    delta = np.asarray(delta, dtype=float)
    if not np.any(delta):
        return T
    return SE3Pose.exp(delta) @ T


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InputError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InputError("principal point must lie inside the image")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def at_level(self, level):
        """Intrinsics of pyramid level ``level`` (2x2 box downsampling per level)."""
        if level == 0:
            return self
        s = 2.0**level
        return CameraIntrinsics(
            self.fx / s,
            self.fy / s,
            (self.cx + 0.5) / s - 0.5,
            (self.cy + 0.5) / s - 0.5,
            self.width >> level,
            self.height >> level,
        )

    def backproject(self, pixels, depth):
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        depth = np.asarray(depth, dtype=float).reshape(-1)
        x = (pixels[:, 0] - self.cx) / self.fx
        y = (pixels[:, 1] - self.cy) / self.fy
        return np.stack([x * depth, y * depth, depth], axis=1)

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        if not path.exists():
            raise InputError(f"calibration file not found: {path}", kind="missing-file")
        lines = [ln for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
        try:
            fx, fy, cx, cy, w, h = lines[0].split()
            return cls(float(fx), float(fy), float(cx), float(cy), int(float(w)), int(float(h)))
        except (IndexError, ValueError) as exc:
            raise InputError(f"{path}:1: expected 'fx fy cx cy width height'", kind="malformed-line") from exc

    def to_file(self, path):
        Path(path).write_text(
            f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r} {self.width} {self.height}\n"
        )


@dataclass(frozen=True)
class Landmark:
    pixel: np.ndarray
    inverse_depth: float


def to_level(pixels, level):
    """Map full-resolution pixel coordinates to pyramid level coordinates."""
    return (np.asarray(pixels, dtype=float) + 0.5) / 2.0**level - 0.5


def from_level(pixels, level):
    return (np.asarray(pixels, dtype=float) + 0.5) * 2.0**level - 0.5


def in_bounds(uv, width, height, margin=BORDER_MARGIN):
    return (
        (uv[:, 0] >= margin)
        & (uv[:, 0] <= width - 1 - margin)
        & (uv[:, 1] >= margin)
        & (uv[:, 1] <= height - 1 - margin)
    )


def project_points(pixels, T, inv_depth, K, margin=BORDER_MARGIN):
    """Vectorised projection of source pixels into the target image.

    Returns ``(uv, valid, X_t)`` where ``X_t`` are the points in the target
    camera frame. Invalid rows still carry finite (but meaningless) values.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    inv_depth = np.asarray(inv_depth, dtype=float).reshape(-1)
    rays = np.stack(
        [(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy, np.ones(len(pixels))], axis=1
    )
    X_t = (rays / inv_depth[:, None]) @ T.rotation.T + T.translation
    z = X_t[:, 2]
    ok = z > DEPTH_FLOOR
    z_safe = np.where(ok, z, 1.0)
    uv = np.stack([K.fx * X_t[:, 0] / z_safe + K.cx, K.fy * X_t[:, 1] / z_safe + K.cy], axis=1)
    valid = ok & in_bounds(uv, K.width, K.height, margin)
    return uv, valid, X_t


def project(p, T, inv_depth, K):
    """Project one source pixel; returns ``(pixel, valid)``."""
    if not inv_depth > 0:
        raise InvalidConfigurationError("inverse depth must be positive")
    uv, valid, _ = project_points(np.asarray(p, dtype=float)[None], T, [inv_depth], K)
    return uv[0], bool(valid[0])


def point_jacobians(X_t, K):
    """d(uv)/d(delta) for left perturbations, evaluated at target-frame points.

    Returns an (N, 2, 6) array.
    """
    x, y, z = X_t[:, 0], X_t[:, 1], X_t[:, 2]
    iz = 1.0 / z
    # d(uv)/dX
    du = np.stack([K.fx * iz, np.zeros_like(z), -K.fx * x * iz * iz], axis=1)
    dv = np.stack([np.zeros_like(z), K.fy * iz, -K.fy * y * iz * iz], axis=1)
    # dX/d(delta) = [I | -[X]x]
    J = np.empty((len(z), 2, 6))
    J[:, 0, :3] = du
    J[:, 1, :3] = dv
    # -[X]x columns: d/dw of w x X = -[X]x
    J[:, 0, 3] = -du[:, 1] * z + du[:, 2] * y
    J[:, 0, 4] = du[:, 0] * z - du[:, 2] * x
    J[:, 0, 5] = -du[:, 0] * y + du[:, 1] * x
    J[:, 1, 3] = -dv[:, 1] * z + dv[:, 2] * y
    J[:, 1, 4] = dv[:, 0] * z - dv[:, 2] * x
    J[:, 1, 5] = -dv[:, 0] * y + dv[:, 1] * x
    return J


def inverse_depth_jacobians(pixels, T, inv_depth, X_t, K):
    """d(uv)/d(inverse depth), (N, 2)."""
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    rays = np.stack(
        [(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy, np.ones(len(pixels))], axis=1
    )
    dX = -(rays @ T.rotation.T) / (inv_depth[:, None] ** 2)
    x, y, z = X_t[:, 0], X_t[:, 1], X_t[:, 2]
    du = K.fx * (dX[:, 0] / z - x * dX[:, 2] / z**2)
    dv = K.fy * (dX[:, 1] / z - y * dX[:, 2] / z**2)
    return np.stack([du, dv], axis=1)


def projection_jacobian(p, T, inv_depth, K, with_depth=False):
    """2x6 derivative of the projected pixel w.r.t. a left se(3) perturbation.

    With ``with_depth=True`` also returns the 2-vector derivative w.r.t. the
    inverse depth.
    """
    p = np.asarray(p, dtype=float)[None]
    d = np.array([float(inv_depth)])
    if not d[0] > 0:
        raise InvalidConfigurationError("inverse depth must be positive")
    _, valid, X_t = project_points(p, T, d, K)
    if not valid[0]:
        raise InvalidConfigurationError("projection is invalid at this configuration")
    J = point_jacobians(X_t, K)[0]
    if with_depth:
        return J, inverse_depth_jacobians(p, T, d, X_t, K)[0]
    return J
