"""SE(3) poses, pinhole camera model, and depth image container.

Conventions used throughout the package:
    - Quaternions are stored as (qx, qy, qz, qw), matching TUM-style
      trajectory files.
    - A Pose maps points from its local frame into the parent frame:
      x_parent = R @ x_local + t.  Camera poses are camera-to-world.
    - Camera frame: x right, y down, z forward along the optical axis.
    - Twist (se3) vectors are 6-dimensional, rotation part first:
      (wx, wy, wz, vx, vy, vz).
    - Depth images hold meters as float64; invalid cells are NaN.
    - Pixel coordinates are continuous; a sample lands in the integer cell
      obtained by round-to-nearest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_LOG_SINGULARITY_MARGIN = 1e-6


def skew(v):
    """3x3 cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _quat_mul(a, b):
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def _quat_to_matrix(q):
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def _matrix_to_quat(m):
    # Shepperd's method: branch on the largest diagonal combination to
    # avoid cancellation.
    t = np.trace(m)
    if t > m[0, 0] and t > m[1, 1] and t > m[2, 2]:
        r = math.sqrt(1.0 + t)
        s = 0.5 / r
        q = np.array([(m[2, 1] - m[1, 2]) * s, (m[0, 2] - m[2, 0]) * s,
                      (m[1, 0] - m[0, 1]) * s, 0.5 * r])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        r = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        s = 0.5 / r
        q = np.array([0.5 * r, (m[0, 1] + m[1, 0]) * s,
                      (m[0, 2] + m[2, 0]) * s, (m[2, 1] - m[1, 2]) * s])
    elif m[1, 1] >= m[2, 2]:
        r = math.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2])
        s = 0.5 / r
        q = np.array([(m[0, 1] + m[1, 0]) * s, 0.5 * r,
                      (m[1, 2] + m[2, 1]) * s, (m[0, 2] - m[2, 0]) * s])
    else:
        r = math.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2])
        s = 0.5 / r
        q = np.array([(m[0, 2] + m[2, 0]) * s, (m[1, 2] + m[2, 1]) * s,
                      0.5 * r, (m[1, 0] - m[0, 1]) * s])
    return q


class Pose:
    """Rigid transform in SE(3): unit quaternion `q` plus translation `t`.

    Immutable after construction; the quaternion is renormalized on entry.
    """

    __slots__ = ("q", "t", "_rot")

    def __init__(self, quat, trans):
        q = np.array(quat, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion has zero or non-finite norm")
        q = q / n
        t = np.array(trans, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation has non-finite components")
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "_rot", None)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    def __reduce__(self):
        return (Pose, (np.array(self.q), np.array(self.t)))

    @classmethod
    def identity(cls):
        return cls((0.0, 0.0, 0.0, 1.0), (0.0, 0.0, 0.0))

    @classmethod
    def from_matrix(cls, rot, trans):
        return cls(_matrix_to_quat(np.asarray(rot, dtype=np.float64)), trans)

    @property
    def rotation_matrix(self):
        if self._rot is None:
            r = _quat_to_matrix(self.q)
            r.flags.writeable = False
            object.__setattr__(self, "_rot", r)
        return self._rot

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self @ other)(x) = self(other(x))."""
        return Pose(_quat_mul(self.q, other.q),
                    self.t + self.rotation_matrix @ other.t)

    def inverse(self) -> "Pose":
        qinv = np.array([-self.q[0], -self.q[1], -self.q[2], self.q[3]])
        return Pose(qinv, -(self.rotation_matrix.T @ self.t))

    def transform(self, points):
        """Apply to one point (3,) or a batch (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation_matrix.T + self.t

    def rotation_angle(self) -> float:
        """Rotation angle in [0, pi]."""
        s = float(np.linalg.norm(self.q[:3]))
        return 2.0 * math.atan2(s, abs(float(self.q[3])))

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self.q)
        t = ", ".join(f"{v:.6g}" for v in self.t)
        return f"Pose(q=[{q}], t=[{t}])"


def _rotvec_to_quat(w):
    theta = float(np.linalg.norm(w))
    if theta < 1e-8:
        # sin(t/2)/t -> 1/2 - t^2/48
        f = 0.5 - theta * theta / 48.0
    else:
        f = math.sin(0.5 * theta) / theta
    return np.array([w[0] * f, w[1] * f, w[2] * f, math.cos(0.5 * theta)])


def _quat_to_rotvec(q):
    if q[3] < 0.0:
        q = -q
    s = float(np.linalg.norm(q[:3]))
    angle = 2.0 * math.atan2(s, float(q[3]))
    if angle >= math.pi - _LOG_SINGULARITY_MARGIN:
        raise ValueError("se3 log near singularity: rotation angle near pi")
    if s < 1e-12:
        return 2.0 * np.asarray(q[:3], dtype=np.float64)
    return (angle / s) * np.asarray(q[:3], dtype=np.float64)


def so3_left_jacobian(w):
    theta2 = float(np.dot(w, w))
    s = skew(w)
    if theta2 < 1e-8:
        a = 0.5 - theta2 / 24.0
        b = 1.0 / 6.0 - theta2 / 120.0
    else:
        theta = math.sqrt(theta2)
        a = (1.0 - math.cos(theta)) / theta2
        b = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) + a * s + b * (s @ s)


def so3_left_jacobian_inv(w):
    theta2 = float(np.dot(w, w))
    s = skew(w)
    if theta2 < 1e-8:
        c = 1.0 / 12.0 + theta2 / 720.0
    else:
        theta = math.sqrt(theta2)
        c = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) - 0.5 * s + c * (s @ s)


def se3_exp(v) -> Pose:
    """Exponential map from a twist (wx, wy, wz, vx, vy, vz) to a Pose."""
    v = np.asarray(v, dtype=np.float64).reshape(6)
    w, u = v[:3], v[3:]
    return Pose(_rotvec_to_quat(w), so3_left_jacobian(w) @ u)


def se3_log(p: Pose):
    """Inverse of se3_exp.  Raises ValueError for rotations at/near pi."""
    w = _quat_to_rotvec(p.q)
    u = so3_left_jacobian_inv(w) @ p.t
    return np.concatenate([w, u])


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters plus the sensor's usable depth range."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_min: float = 0.3
    depth_max: float = 8.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point outside image")
        if not (0 < self.depth_min < self.depth_max):
            raise ValueError("require 0 < depth_min < depth_max")


def project(point, k: Intrinsics):
    """Project a camera-frame point to continuous pixel coords and depth."""
    x, y, z = (float(c) for c in point)
    if z <= 0.0:
        raise ValueError("behind camera: point has non-positive depth")
    return k.cx + k.fx * (x / z), k.cy + k.fy * (y / z), z


def backproject(u, v, z, k: Intrinsics):
    """Lift a pixel plus depth to a camera-frame 3D point."""
    z = float(z)
    if not math.isfinite(z) or z <= 0.0:
        raise ValueError("invalid depth for backprojection")
    if not (-0.5 <= u < k.width - 0.5) or not (-0.5 <= v < k.height - 0.5):
        raise ValueError("pixel outside image bounds")
    return np.array([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z])


class DepthImage:
    """H x W grid of depth samples in meters; invalid cells are NaN."""

    __slots__ = ("samples",)

    def __init__(self, samples):
        a = np.array(samples, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("depth image must be 2-dimensional")
        finite = np.isfinite(a)
        if np.any(a[finite] <= 0.0):
            raise ValueError("valid depth samples must be positive")
        a[~finite] = np.nan
        a.flags.writeable = False
        object.__setattr__(self, "samples", a)

    def __setattr__(self, name, value):
        raise AttributeError("DepthImage is immutable")

    def __reduce__(self):
        return (DepthImage, (np.array(self.samples),))

    @classmethod
    def invalid(cls, width: int, height: int):
        return cls(np.full((height, width), np.nan))

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def valid_mask(self):
        return np.isfinite(self.samples)

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(np.isfinite(self.samples)))
