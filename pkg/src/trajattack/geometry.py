"""Quaternion / rigid-transform algebra and two-keyframe pose interpolation.

Conventions used throughout the package:

* quaternions are stored as (w, x, y, z) and treated as unit rotations;
  q and -q encode the same rotation and pose constructors canonicalize
  to w >= 0,
* a track transform ``T_n`` maps points from frame n into the world frame
  (``p_world = R @ p_n + t``),
* all values are immutable after construction and every operation here is
  pure, so concurrent use is safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

# Below this interpolation angle (rad) slerp falls back to normalized
# linear interpolation: sin(theta) division is unstable.
SLERP_SMALL_ANGLE = 1e-7

_ORTHO_TOL = 1e-9
_UNIT_TOL = 1e-6


def _vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {v.shape}")
    return v


def _quat(x) -> np.ndarray:
    q = np.asarray(x, dtype=float)
    if q.shape != (4,):
        raise ValueError(f"expected a (w,x,y,z) quaternion, got shape {q.shape}")
    return q


@dataclass(frozen=True)
class Pose:
    """Keyframe pose: translation (m) plus unit quaternion (w, x, y, z).

    The quaternion is normalized on construction and sign-canonicalized to
    w >= 0. ``stamp`` is in seconds and optional for single keyframes.
    """

    t: np.ndarray
    q: np.ndarray
    stamp: Optional[float] = None

    def __post_init__(self):
        t = _vec3(self.t)
        q = _quat(self.q)
        norm = float(np.linalg.norm(q))
        if norm < 1e-12:
            raise ValueError("quaternion has zero norm")
        # skip the division for already-unit inputs so that construction
        # from a previously normalized quaternion is bitwise stable
        if abs(norm - 1.0) > 1e-12:
            q = q / norm
        if q[0] < 0.0:
            q = -q
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", q)

    @staticmethod
    def identity(stamp: Optional[float] = None) -> "Pose":
        return Pose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]), stamp)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation matrix plus translation; maps ``p -> R @ p + t``.

    Construction validates orthonormality and det(R) = 1 to 1e-9. Perturbed
    compensation matrices (R + R~ and friends) never pass through this type;
    they live as raw arrays inside the attack path.
    """

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        if R.shape != (3, 3):
            raise ValueError(f"expected a 3x3 rotation, got shape {R.shape}")
        t = _vec3(self.t)
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation matrix is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation matrix determinant is not 1 within 1e-9")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (m, 3)."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            return self.R @ pts + self.t
        return pts @ self.R.T + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self o other (apply ``other`` first)."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "RigidTransform":
        """Closed-form rigid inverse (R^T, -R^T t)."""
        return RigidTransform(self.R.T, -(self.R.T @ self.t))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m


@dataclass(frozen=True)
class InterpolatedTrack:
    """Ordered world-frame transforms for the N interpolated sweep frames.

    ``transforms[0]`` reproduces keyframe A; index n carries the pose the
    sensor had while emitting packet n.
    """

    transforms: tuple

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if len(self.transforms) == 0:
            raise ValueError("track must hold at least one transform")

    @property
    def n_steps(self) -> int:
        return len(self.transforms)

    def __len__(self) -> int:
        return len(self.transforms)

    def __getitem__(self, n: int) -> RigidTransform:
        return self.transforms[n]


def lerp_translation(t_a, t_b, n_steps: int, n: int) -> np.ndarray:
    """Linear translation interpolation: t_a + (t_b - t_a) * n / n_steps."""
    if n_steps < 2:
        raise ValueError(f"n_steps must be >= 2, got {n_steps}")
    if not 0 <= n <= n_steps - 1:
        raise ValueError(f"step index {n} out of range [0, {n_steps - 1}]")
    t_a = _vec3(t_a)
    t_b = _vec3(t_b)
    return t_a + (t_b - t_a) * (n / n_steps)


def slerp(q_a, q_b, u: float) -> np.ndarray:
    """Spherical linear interpolation between unit quaternions.

    Takes the shortest arc (q_b is sign-flipped when the dot product is
    negative). Angles below SLERP_SMALL_ANGLE fall back to normalized
    linear interpolation, which is not an error. u=0 and u=1 return the
    endpoints exactly.
    """
    q_a = _quat(q_a)
    q_b = _quat(q_b)
    if abs(np.linalg.norm(q_a) - 1.0) > _UNIT_TOL or abs(np.linalg.norm(q_b) - 1.0) > _UNIT_TOL:
        raise ValueError("slerp endpoints must be unit quaternions")
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"interpolation fraction {u} outside [0, 1]")
    d = float(np.dot(q_a, q_b))
    if d < 0.0:
        q_b = -q_b
        d = -d
    if u == 0.0:
        return q_a.copy()
    if u == 1.0:
        return q_b.copy()
    d = min(d, 1.0)
    theta = math.acos(d)
    if theta < SLERP_SMALL_ANGLE:
        out = (1.0 - u) * q_a + u * q_b
    else:
        s = math.sin(theta)
        out = (math.sin((1.0 - u) * theta) / s) * q_a + (math.sin(u * theta) / s) * q_b
    return out / np.linalg.norm(out)


def quat_to_rotmat(q) -> np.ndarray:
    """Standard unit-quaternion to rotation-matrix conversion."""
    q = _quat(q)
    if abs(np.linalg.norm(q) - 1.0) > _UNIT_TOL:
        raise ValueError("quaternion is not unit length within 1e-6")
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    """Unit quaternion for a rotation of ``angle`` rad about ``axis``."""
    axis = _vec3(axis)
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        raise ValueError("rotation axis has zero norm")
    axis = axis / norm
    half = 0.5 * angle
    return np.concatenate(([math.cos(half)], math.sin(half) * axis))


def quat_from_yaw(yaw: float) -> np.ndarray:
    """Unit quaternion for a planar heading (rotation about +z)."""
    return quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw)


def pose_to_transform(pose: Pose) -> RigidTransform:
    """Pose to rigid transform; block layout [R(q), t; 0, 1]."""
    return RigidTransform(quat_to_rotmat(pose.q), pose.t)


def relative_transform(t_a: RigidTransform, t_b: RigidTransform) -> RigidTransform:
    """Return t_a^-1 o t_b using the closed-form rigid inverse.

    With t_a the world transform of frame n and t_b the world transform of
    frame A, the result maps frame-A points into frame n.
    """
    return RigidTransform(t_a.R.T @ t_b.R, t_a.R.T @ (t_b.t - t_a.t))


def interpolate_track(pose_a: Pose, pose_b: Pose, n_steps: int) -> InterpolatedTrack:
    """Interpolate n_steps intermediate frames between two keyframes.

    Step n carries translation t_a + (t_b - t_a) * n / n_steps and the
    slerp of the keyframe quaternions at fraction n / n_steps, so step 0
    reproduces pose A exactly and the track approaches (never reaches)
    pose B.
    """
    if n_steps < 2:
        raise ValueError(f"n_steps must be >= 2, got {n_steps}")
    transforms = []
    for n in range(n_steps):
        t = lerp_translation(pose_a.t, pose_b.t, n_steps, n)
        q = slerp(pose_a.q, pose_b.q, n / n_steps)
        transforms.append(RigidTransform(quat_to_rotmat(q), t))
    return InterpolatedTrack(tuple(transforms))
