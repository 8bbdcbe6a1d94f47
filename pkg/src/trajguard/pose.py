"""Rotations, camera poses and trajectories.

Poses follow the COLMAP world-to-camera convention, ``x_cam = R @ x_world + t``.
Camera centers are always derived (``c = -R.T @ t``), never stored.
Quaternions are (w, x, y, z).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

SLERP_LINEAR_CUTOFF = 1e-7  # radians of geodesic angle


def _readonly(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def canonicalize_quaternion(q) -> np.ndarray:
    """Unit-normalize ``q`` and pick the sign with w >= 0.

    When w == 0 the first nonzero component decides the sign.
    """
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"cannot normalize quaternion {q!r}")
    if abs(n - 1.0) > 4 * np.finfo(float).eps:  # leave unit input untouched so this is idempotent
        q = q / n
    for c in q:
        if c != 0.0:
            if c < 0.0:
                q = -q
            break
    return q


def _qmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion rotation. ``q`` and ``-q`` are the same rotation."""

    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _readonly(canonicalize_quaternion(self.q)))

    def __eq__(self, other):
        if not isinstance(other, Rotation):
            return NotImplemented
        return bool(np.array_equal(self.q, other.q))

    def __hash__(self):
        return hash(tuple(self.q.tolist()))

    def __repr__(self):
        w, x, y, z = self.q
        return f"Rotation(w={w:.6g}, x={x:.6g}, y={y:.6g}, z={z:.6g})"

    @classmethod
    def identity(cls) -> Rotation:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> Rotation:
        axis = np.asarray(axis, dtype=float)
        n = np.linalg.norm(axis)
        if n == 0.0:
            return cls.identity()
        axis = axis / n
        half = 0.5 * angle
        return cls(np.concatenate([[math.cos(half)], math.sin(half) * axis]))

    @classmethod
    def from_rotvec(cls, rotvec) -> Rotation:
        rotvec = np.asarray(rotvec, dtype=float)
        return cls.from_axis_angle(rotvec, float(np.linalg.norm(rotvec)))

    @classmethod
    def from_matrix(cls, m) -> Rotation:
        m = np.asarray(m, dtype=float)
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        # Shepperd: branch on the largest diagonal term for stability
        if tr > 0:
            s = 2.0 * math.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        return cls(np.array(q))

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def as_rotvec(self) -> np.ndarray:
        w = self.q[0]
        v = self.q[1:]
        s = np.linalg.norm(v)
        if s == 0.0:
            return np.zeros(3)
        return 2.0 * math.atan2(s, w) * v / s

    def inverse(self) -> Rotation:
        w, x, y, z = self.q
        return Rotation(np.array([w, -x, -y, -z]))

    def __mul__(self, other: Rotation) -> Rotation:
        if not isinstance(other, Rotation):
            return NotImplemented
        return Rotation(_qmul(self.q, other.q))

    def apply(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.as_matrix().T

    @property
    def angle(self) -> float:
        return geodesic_angle(Rotation.identity(), self)


def geodesic_angle(a: Rotation, b: Rotation) -> float:
    """Rotation angle of ``a^-1 b`` in radians, in [0, pi].

    Equal to ``2 arccos(|<a, b>|)``; evaluated through atan2 so that tiny
    angles are not swamped by arccos round-off near 1.
    """
    d = _qmul(a.inverse().q, b.q)
    return 2.0 * math.atan2(float(np.linalg.norm(d[1:])), abs(float(d[0])))


def slerp(a: Rotation, b: Rotation, s: float) -> Rotation:
    """Constant angular velocity interpolation along the shortest arc."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"slerp fraction must lie in [0, 1], got {s}")
    if s == 0.0:
        return a
    if s == 1.0:
        return b
    qa, qb = a.q, b.q
    if float(qa @ qb) < 0.0:
        qb = -qb
    angle = geodesic_angle(a, b)
    if angle < SLERP_LINEAR_CUTOFF:
        return Rotation((1.0 - s) * qa + s * qb)
    theta = 0.5 * angle
    sin_theta = math.sin(theta)
    wa = math.sin((1.0 - s) * theta) / sin_theta
    wb = math.sin(s * theta) / sin_theta
    return Rotation(wa * qa + wb * qb)


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera pose: ``x_cam = R @ x_world + t``."""

    rotation: Rotation
    translation: np.ndarray
    time_step: int = 0
    frame_name: str = ""

    def __post_init__(self):
        t = _readonly(np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "translation", t)
        if self.time_step < 0:
            raise ValueError(f"time_step must be >= 0, got {self.time_step}")
        object.__setattr__(self, "time_step", int(self.time_step))
        if not np.all(np.isfinite(self.center)):
            raise ValueError("camera center is not finite")

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (
            self.rotation == other.rotation
            and np.array_equal(self.translation, other.translation)
            and self.time_step == other.time_step
            and self.frame_name == other.frame_name
        )

    __hash__ = None

    def __repr__(self):
        return (
            f"CameraPose(step={self.time_step}, name={self.frame_name!r}, "
            f"{self.rotation!r}, t={np.round(self.translation, 6).tolist()})"
        )

    @classmethod
    def identity(cls, time_step: int = 0, frame_name: str = "") -> CameraPose:
        return cls(Rotation.identity(), np.zeros(3), time_step, frame_name)

    @classmethod
    def from_center(cls, rotation: Rotation, center, time_step: int = 0, frame_name: str = "") -> CameraPose:
        t = -rotation.as_matrix() @ np.asarray(center, dtype=float)
        return cls(rotation, t, time_step, frame_name)

    @classmethod
    def from_matrix(cls, m, time_step: int = 0, frame_name: str = "") -> CameraPose:
        m = np.asarray(m, dtype=float)
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3], time_step, frame_name)

    @property
    def R(self) -> np.ndarray:
        return self.rotation.as_matrix()

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        f = self.R.T @ np.array([0.0, 0.0, 1.0])
        return f / np.linalg.norm(f)

    def matrix(self) -> np.ndarray:
        """3x4 ``[R | t]``."""
        return np.hstack([self.R, self.translation[:, None]])

    def transform(self, points) -> np.ndarray:
        """Map world points (N, 3) into this camera's frame."""
        return np.asarray(points, dtype=float) @ self.R.T + self.translation

    def replace(self, **changes) -> CameraPose:
        kw = dict(rotation=self.rotation, translation=self.translation,
                  time_step=self.time_step, frame_name=self.frame_name)
        kw.update(changes)
        return CameraPose(**kw)


def relative_pose(a: CameraPose, b: CameraPose) -> tuple[Rotation, np.ndarray]:
    """Transform taking camera-a coordinates to camera-b coordinates."""
    r_rel = b.rotation * a.rotation.inverse()
    t_rel = b.translation - r_rel.as_matrix() @ a.translation
    return r_rel, t_rel


def compose(a: CameraPose, r_rel: Rotation, t_rel) -> CameraPose:
    """Apply a relative transform to ``a``; inverse of :func:`relative_pose`."""
    rot = r_rel * a.rotation
    t = r_rel.as_matrix() @ a.translation + np.asarray(t_rel, dtype=float)
    return CameraPose(rot, t, a.time_step, a.frame_name)


def camera_center_and_forward(p: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    return p.center, p.forward


def flatten_pose(p: CameraPose) -> np.ndarray:
    """Row-major 12-vector of the 3x4 world-to-camera matrix."""
    return p.matrix().reshape(12)


def unflatten_pose(v, time_step: int = 0, frame_name: str = "") -> CameraPose:
    return CameraPose.from_matrix(np.asarray(v, dtype=float).reshape(3, 4), time_step, frame_name)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, pixels) -> np.ndarray:
        px = np.asarray(pixels, dtype=float).reshape(-1, 2)
        return (px[:, 0] >= 0) & (px[:, 0] <= self.width) & (px[:, 1] >= 0) & (px[:, 1] <= self.height)

    def normalize(self, pixels) -> np.ndarray:
        """Pixels (N, 2) -> normalized image coordinates (N, 2)."""
        px = np.asarray(pixels, dtype=float).reshape(-1, 2)
        return np.column_stack([(px[:, 0] - self.cx) / self.fx, (px[:, 1] - self.cy) / self.fy])

    def project(self, points_cam) -> np.ndarray:
        p = np.asarray(points_cam, dtype=float).reshape(-1, 3)
        return np.column_stack([self.fx * p[:, 0] / p[:, 2] + self.cx, self.fy * p[:, 1] / p[:, 2] + self.cy])


@dataclass(frozen=True)
class Trajectory:
    poses: tuple[CameraPose, ...]
    pose_rate_hz: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        if not self.pose_rate_hz > 0:
            raise ValueError(f"pose_rate_hz must be positive, got {self.pose_rate_hz}")
        steps = [p.time_step for p in self.poses]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("trajectory time steps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self) -> Iterator[CameraPose]:
        return iter(self.poses)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Trajectory(self.poses[i], self.pose_rate_hz)
        return self.poses[i]

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.pose_rate_hz == other.pose_rate_hz and len(self) == len(other) and all(
            a == b for a, b in zip(self.poses, other.poses)
        )

    __hash__ = None

    @property
    def time_steps(self) -> np.ndarray:
        return np.array([p.time_step for p in self.poses], dtype=int)

    @property
    def duration_seconds(self) -> float:
        if not self.poses:
            return 0.0
        return (self.poses[-1].time_step - self.poses[0].time_step) / self.pose_rate_hz

    def centers(self) -> np.ndarray:
        return np.array([p.center for p in self.poses]).reshape(-1, 3)

    def forwards(self) -> np.ndarray:
        return np.array([p.forward for p in self.poses]).reshape(-1, 3)

    def rotations(self) -> list[Rotation]:
        return [p.rotation for p in self.poses]

    def index_of(self, time_step: int) -> int:
        steps = self.time_steps
        i = int(np.searchsorted(steps, time_step))
        if i >= len(steps) or steps[i] != time_step:
            raise KeyError(time_step)
        return i

    def with_poses(self, poses: Iterable[CameraPose]) -> Trajectory:
        return Trajectory(tuple(poses), self.pose_rate_hz)

    def transformed(self, rotation: Rotation, translation=(0.0, 0.0, 0.0), scale: float = 1.0) -> Trajectory:
        """Apply a similarity to the world frame: ``x' = scale * G x + g``."""
        g = np.asarray(translation, dtype=float)
        out = []
        for p in self.poses:
            c = scale * rotation.apply(p.center) + g
            out.append(CameraPose.from_center(p.rotation * rotation.inverse(), c, p.time_step, p.frame_name))
        return self.with_poses(out)


def trajectory_from_arrays(rotations: Sequence[Rotation], centers, pose_rate_hz: float = 4.0,
                           time_steps=None, names=None) -> Trajectory:
    centers = np.asarray(centers, dtype=float)
    n = len(rotations)
    steps = range(n) if time_steps is None else time_steps
    names = [f"frame_{i:05d}.png" for i in steps] if names is None else names
    poses = [CameraPose.from_center(r, c, int(s), nm) for r, c, s, nm in zip(rotations, centers, steps, names)]
    return Trajectory(tuple(poses), pose_rate_hz)
