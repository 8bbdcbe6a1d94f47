"""Synthetic ground truth: smooth 6-DoF flights, corruption injection, two-view matches."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import DegenerateGeometryError, RetryExhaustedError, ValidationError
from .model_io import MatchSet, PairStats
from .pose import CameraPose, Intrinsics, Rotation, Trajectory, relative_pose, slerp, trajectory_from_arrays
from .verify import CheckConfig, essential_from_pose, kinematics_check, symmetric_epipolar_error

CORRUPTION_KINDS = ("center_teleport", "rotation_jump", "forward_flip", "jitter_burst")
DEFAULT_MAGNITUDES = {"center_teleport": 50.0, "rotation_jump": 30.0, "forward_flip": 180.0, "jitter_burst": 5.0}
WORLD_UP = np.array([0.0, 0.0, 1.0])
MAX_GENERATION_ATTEMPTS = 100
FRUSTUM_RETRIES = 10

DEFAULT_INTRINSICS = Intrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def look_rotation(forward, up=WORLD_UP) -> Rotation:
    """World-to-camera rotation whose optical axis is ``forward`` (x right, y down)."""
    z = np.asarray(forward, float)
    z = z / np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-6:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return Rotation.from_matrix(np.vstack([x, y, z]))


def _flight_knots(rng: np.random.Generator, times: np.ndarray, speed: float) -> np.ndarray:
    """Sample a smooth random flight (sinusoidal speed, yaw rate and climb) at ``times``."""
    span = float(times[-1] - times[0])
    t = np.linspace(times[0], times[-1], max(int(span * 20), 1) + 1)
    dt = t[1] - t[0] if len(t) > 1 else 0.0
    w = rng.uniform(0.05, 0.15, size=3)
    ph = rng.uniform(0.0, 2 * np.pi, size=3)
    v = speed * (1.0 + rng.uniform(0.1, 0.3) * np.sin(w[0] * t + ph[0]))
    yaw_rate = rng.uniform(-0.04, 0.04) + rng.uniform(0.02, 0.06) * np.sin(w[1] * t + ph[1])
    yaw = rng.uniform(0.0, 2 * np.pi) + np.cumsum(yaw_rate) * dt
    climb = rng.uniform(0.05, 0.2) * np.sin(w[2] * t + ph[2])
    vel = v[:, None] * np.column_stack([np.cos(climb) * np.cos(yaw), np.cos(climb) * np.sin(yaw), np.sin(climb)])
    pos = np.cumsum(vel, axis=0) * dt
    return pos[np.searchsorted(t, times).clip(0, len(t) - 1)]


def _draw_trajectory(rng: np.random.Generator, n_steps: int, knot_count: int, speed: float, pose_rate_hz: float):
    times = np.linspace(0.0, n_steps - 1, knot_count)
    knots = _flight_knots(rng, times, speed)
    spline = CubicSpline(times, knots)
    steps = np.arange(n_steps, dtype=float)
    centers = spline(steps)
    # key rotations look along the path with a slowly swaying yaw offset
    sway, w, ph = rng.uniform(0.05, 0.2), rng.uniform(0.05, 0.15), rng.uniform(0.0, 2 * np.pi)
    keys = [
        Rotation.from_axis_angle([0.0, 1.0, 0.0], sway * math.sin(w * tk + ph)) * look_rotation(tan)
        for tk, tan in zip(times, spline(times, 1))
    ]
    rots = []
    for t in steps:
        k = min(int(np.searchsorted(times, t, side="right")) - 1, knot_count - 2)
        s = (t - times[k]) / (times[k + 1] - times[k])
        rots.append(slerp(keys[k], keys[k + 1], min(max(float(s), 0.0), 1.0)))
    return trajectory_from_arrays(rots, centers, pose_rate_hz)


def default_knot_count(n_steps: int) -> int:
    return max(2, (n_steps - 1) // 3 + 1)


def generate_smooth_trajectory(seed: int, n_steps: int = 61, knot_count: int | None = None, *, speed: float = 0.25,
                               pose_rate_hz: float = 4.0, cfg: CheckConfig = CheckConfig()) -> Trajectory:
    """Not-a-knot cubic spline through random flight knots, slerped key rotations.

    The result is certified clean: draws are repeated (deterministically,
    from the same seed) until the kinematics check reports no flagged
    transition under ``cfg``.
    """
    if knot_count is None:
        knot_count = default_knot_count(n_steps)
    if n_steps < 8:
        raise ValidationError("n_steps must be >= 8")
    if knot_count < 2:
        raise ValidationError("knot_count must be >= 2")
    ss = np.random.SeedSequence(seed)
    for child in ss.spawn(MAX_GENERATION_ATTEMPTS):
        traj = _draw_trajectory(np.random.default_rng(child), n_steps, knot_count, speed, pose_rate_hz)
        bad, _ = kinematics_check(traj, cfg)
        if not bad.any():
            return traj
    raise RetryExhaustedError(f"no clean trajectory for seed {seed} after {MAX_GENERATION_ATTEMPTS} draws")


# -- corruption -----------------------------------------------------------------

@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    at_transition: int
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValidationError(f"unknown corruption kind {self.kind!r}")
        if not self.magnitude > 0:
            raise ValidationError("magnitude must be positive")

    def modified_poses(self) -> list[int]:
        i = self.at_transition
        return [i + 1, i + 2] if self.kind == "jitter_burst" else [i + 1]


def median_step(traj: Trajectory) -> float:
    return float(np.median(np.linalg.norm(np.diff(traj.centers(), axis=0), axis=1)))


def _unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def inject(traj: Trajectory, spec: CorruptionSpec) -> Trajectory:
    """Corrupt the pose(s) just after ``spec.at_transition``; all other poses are untouched.

    Camera centers of rotated poses are preserved.
    """
    n = len(traj)
    mods = spec.modified_poses()
    if spec.at_transition < 0 or max(mods) > n - 1:
        raise IndexError(f"corruption at transition {spec.at_transition} out of range for {n} poses")
    rng = np.random.default_rng(spec.seed)
    poses = list(traj.poses)
    step = median_step(traj)
    for k in mods:
        p = poses[k]
        if spec.kind in ("center_teleport", "jitter_burst"):
            c = p.center + spec.magnitude * step * _unit(rng)
            poses[k] = CameraPose.from_center(p.rotation, c, p.time_step, p.frame_name)
        elif spec.kind == "rotation_jump":
            jump = Rotation.from_axis_angle(_unit(rng), math.radians(spec.magnitude))
            poses[k] = CameraPose.from_center(jump * p.rotation, p.center, p.time_step, p.frame_name)
        else:  # forward_flip: half turn about the camera's vertical axis
            flip = Rotation.from_axis_angle([0.0, 1.0, 0.0], math.pi)
            poses[k] = CameraPose.from_center(flip * p.rotation, p.center, p.time_step, p.frame_name)
    return traj.with_poses(poses)


def inject_dense(traj: Trajectory, fraction: float = 0.4, seed: int = 0, magnitude: float = 20.0):
    """Teleport random poses until at least ``fraction`` of transitions touch a corrupted pose.

    Returns ``(corrupted, modified_pose_indices)``.
    """
    n = len(traj)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    touched = np.zeros(n - 1, dtype=bool)
    chosen = []
    for k in order:
        chosen.append(int(k))
        if k > 0:
            touched[k - 1] = True
        if k < n - 1:
            touched[k] = True
        if touched.mean() >= fraction:
            break
    step = median_step(traj)
    poses = list(traj.poses)
    for k in chosen:
        p = poses[k]
        poses[k] = CameraPose.from_center(p.rotation, p.center + magnitude * step * _unit(rng), p.time_step,
                                          p.frame_name)
    return traj.with_poses(poses), sorted(chosen)


# -- two-view correspondences ---------------------------------------------------------

def synth_two_view(pose_a: CameraPose, pose_b: CameraPose, intrinsics: Intrinsics = DEFAULT_INTRINSICS,
                   n_points: int = 60, noise_px: float = 0.0, seed: int = 0,
                   depth_range: tuple[float, float] = (2.0, 12.0)):
    """Random scene points visible in both views, projected to pixels.

    Returns ``(MatchSet, E_true)`` with ``E_true = [t]x R`` of the relative
    pose, ``||E_true||_F = sqrt(2)``.
    """
    if n_points < 8:
        raise ValidationError("n_points must be >= 8")
    E_true = essential_from_pose(pose_a, pose_b)  # raises on zero baseline
    rng = np.random.default_rng(seed)
    k = intrinsics
    got_a, got_b = [], []
    count = 0
    for _ in range(FRUSTUM_RETRIES):
        m = 4 * n_points
        px = np.column_stack([rng.uniform(0, k.width, m), rng.uniform(0, k.height, m)])
        depth = rng.uniform(*depth_range, m)
        rays = np.column_stack([(px[:, 0] - k.cx) / k.fx, (px[:, 1] - k.cy) / k.fy, np.ones(m)])
        pts_cam_a = rays * depth[:, None]
        world = (pts_cam_a - pose_a.translation) @ pose_a.R  # R^T (x - t)
        pts_cam_b = pose_b.transform(world)
        front = pts_cam_b[:, 2] > 0.1
        pa = px[front]
        pb = k.project(pts_cam_b[front])
        if noise_px > 0:
            pa = pa + rng.normal(scale=noise_px, size=pa.shape)
            pb = pb + rng.normal(scale=noise_px, size=pb.shape)
        keep = k.contains(pa) & k.contains(pb)
        got_a.append(pa[keep])
        got_b.append(pb[keep])
        count += int(keep.sum())
        if count >= n_points:
            break
    else:
        raise RetryExhaustedError(f"only {count} co-visible points after {FRUSTUM_RETRIES} attempts")
    pa = np.concatenate(got_a)[:n_points]
    pb = np.concatenate(got_b)[:n_points]
    return MatchSet(pose_a.frame_name, pose_b.frame_name, pa, pb), E_true


@dataclass
class SimulatedVideo:
    truth: Trajectory
    estimate: Trajectory
    intrinsics: Intrinsics
    stats: list[PairStats]
    matches: list[MatchSet]
    corruptions: list[CorruptionSpec] = field(default_factory=list)


def simulate_video(seed: int, n_steps: int = 61, knot_count: int | None = None, corruptions=(),
                   intrinsics: Intrinsics = DEFAULT_INTRINSICS, n_points: int = 60, noise_px: float = 0.5,
                   cfg: CheckConfig = CheckConfig()) -> SimulatedVideo:
    """Clean flight, matches between consecutive true views, then corruption of the estimate."""
    truth = generate_smooth_trajectory(seed, n_steps, knot_count, cfg=cfg)
    est = truth
    for spec in corruptions:
        est = inject(est, spec)
    stats, matches = [], []
    for i in range(len(truth) - 1):
        a, b = truth[i], truth[i + 1]
        ms, E = synth_two_view(a, b, intrinsics, n_points, noise_px, seed=seed * 100003 + i)
        err = symmetric_epipolar_error(E, intrinsics.normalize(ms.pixels_a), intrinsics.normalize(ms.pixels_b))
        inl = int(np.sum(np.nan_to_num(err, nan=np.inf) < cfg.epipolar_threshold))
        matches.append(ms)
        stats.append(PairStats(a.frame_name, b.frame_name, len(ms), inl))
    return SimulatedVideo(truth, est, intrinsics, stats, matches, list(corruptions))
