"""Clip extraction, local memory windows and the near-static clip filter.

All durations are given in seconds and converted to integer pose steps at
the trajectory's pose rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, MissingPoseError, ValidationError, WindowInfeasibleError
from .pose import CameraPose, Trajectory, geodesic_angle


def seconds_to_steps(seconds: float, pose_rate_hz: float) -> int:
    steps = seconds * pose_rate_hz
    if abs(steps - round(steps)) > 1e-9:
        raise ValidationError(f"{seconds} s is not a whole number of steps at {pose_rate_hz} Hz")
    return int(round(steps))


@dataclass(frozen=True)
class ClipSpec:
    t0: int
    t1: int
    clip_seconds: float = 5.0
    stride_seconds: float = 1.0
    pose_rate_hz: float = 4.0

    def __post_init__(self):
        if self.t0 < 0:
            raise ValidationError("t0 must be >= 0")
        if self.t1 - self.t0 != seconds_to_steps(self.clip_seconds, self.pose_rate_hz):
            raise ValidationError(f"clip [{self.t0}, {self.t1}] does not span {self.clip_seconds} s")

    @property
    def steps(self) -> range:
        return range(self.t0, self.t1 + 1)


@dataclass(frozen=True)
class LocalWindow:
    k_s: int
    k_e: int
    L_steps: int

    def satisfies(self, t0: int, t1: int) -> bool:
        """Every inequality of the window rule, checked literally, plus ``k_s >= 0``."""
        return (
            t0 - self.L_steps <= self.k_s <= t0
            and max(self.k_s, t0) + 1 <= self.k_e <= min(self.k_s + self.L_steps, t1)
            and self.k_s >= 0
        )


@dataclass(frozen=True)
class DiversityConfig:
    min_path_length: float = 0.5
    min_total_rotation: float = 15.0  # degrees

    def __post_init__(self):
        if self.min_path_length < 0 or self.min_total_rotation < 0:
            raise ValidationError("diversity thresholds must be >= 0")
        if self.min_path_length == 0 and self.min_total_rotation == 0:
            raise ValidationError("at least one diversity threshold must be positive")


def extract_clips(traj: Trajectory, clip_seconds: float = 5.0, stride_seconds: float = 1.0) -> list[ClipSpec]:
    """Overlapping clips starting at the first pose step, one every ``stride_seconds``."""
    rate = traj.pose_rate_hz
    clip = seconds_to_steps(clip_seconds, rate)
    stride = seconds_to_steps(stride_seconds, rate)
    if clip < 1 or stride < 1:
        raise ValidationError("clip and stride must span at least one step")
    if len(traj) == 0:
        return []
    first = int(traj.time_steps[0])
    span = int(traj.time_steps[-1]) - first
    if span < clip:
        return []
    count = (span - clip) // stride + 1
    return [
        ClipSpec(first + k * stride, first + k * stride + clip, clip_seconds, stride_seconds, rate)
        for k in range(count)
    ]


def feasible_ks_range(t0: int, t1: int, L_steps: int) -> tuple[int, int]:
    """Inclusive range of window starts that admit at least one valid end."""
    if L_steps < 1:
        raise ValidationError("L_steps must be >= 1")
    if t1 <= t0:
        raise WindowInfeasibleError(f"empty clip [{t0}, {t1}]")
    return max(0, t0 - L_steps + 1), t0


def ke_range(t0: int, t1: int, L_steps: int, k_s: int) -> tuple[int, int]:
    lo, hi = max(k_s, t0) + 1, min(k_s + L_steps, t1)
    if lo > hi:
        raise WindowInfeasibleError(f"no window end for k_s={k_s}")
    return lo, hi


def feasible_pairs(t0: int, t1: int, L_steps: int) -> list[tuple[int, int]]:
    lo, hi = feasible_ks_range(t0, t1, L_steps)
    out = []
    for ks in range(lo, hi + 1):
        a, b = ke_range(t0, t1, L_steps, ks)
        out.extend((ks, ke) for ke in range(a, b + 1))
    return out


def sample_local_windows(t0: int, t1: int, L_steps: int, n: int, rng: np.random.Generator,
                         mode: str = "hierarchical") -> np.ndarray:
    """``n`` windows as an ``(n, 2)`` array of ``(k_s, k_e)``.

    ``hierarchical`` draws k_s uniformly and then k_e uniformly given k_s;
    ``pairs`` draws uniformly over all feasible ``(k_s, k_e)`` pairs.
    """
    lo, hi = feasible_ks_range(t0, t1, L_steps)
    if mode == "pairs":
        pairs = np.array(feasible_pairs(t0, t1, L_steps))
        return pairs[rng.integers(0, len(pairs), size=n)]
    if mode != "hierarchical":
        raise ValidationError(f"unknown sampling mode {mode!r}")
    ks = rng.integers(lo, hi + 1, size=n)
    ke_lo = t0 + 1  # k_s <= t0 always
    ke_hi = np.minimum(ks + L_steps, t1)
    ke = ke_lo + np.floor(rng.random(n) * (ke_hi - ke_lo + 1)).astype(np.int64)
    return np.column_stack([ks, ke])


def sample_local_window(t0: int, t1: int, L_steps: int, seed: int = 0, mode: str = "hierarchical") -> LocalWindow:
    ks, ke = sample_local_windows(t0, t1, L_steps, 1, np.random.default_rng(seed), mode)[0]
    return LocalWindow(int(ks), int(ke), L_steps)


def diversity_score(traj: Trajectory) -> tuple[float, float]:
    """Path length (scene units) and accumulated rotation (degrees)."""
    if len(traj) < 2:
        raise InsufficientDataError("diversity_score needs at least 2 poses")
    path = float(np.sum(np.linalg.norm(np.diff(traj.centers(), axis=0), axis=1)))
    rots = traj.rotations()
    turn = sum(geodesic_angle(a, b) for a, b in zip(rots, rots[1:]))
    return path, math.degrees(turn)


def diversity_keep(path_length: float, total_rotation: float, cfg: DiversityConfig = DiversityConfig()) -> bool:
    return path_length >= cfg.min_path_length or total_rotation >= cfg.min_total_rotation


def clip_segment(traj: Trajectory, clip: ClipSpec) -> Trajectory:
    i, j = traj.index_of(clip.t0), traj.index_of(clip.t1)
    return traj[i:j + 1]


def select_query_pose(clip: ClipSpec, traj: Trajectory) -> CameraPose:
    """The terminal pose of the clip."""
    try:
        return traj[traj.index_of(clip.t1)]
    except (KeyError, ValueError, IndexError) as exc:
        raise MissingPoseError(f"no pose at step {clip.t1}") from exc


def window_manifest(video_id: str, traj: Trajectory, L_seconds: float = 5.0, clip_seconds: float = 5.0,
                    stride_seconds: float = 1.0, seed: int = 0, cfg: DiversityConfig = DiversityConfig(),
                    mode: str = "hierarchical") -> list[dict]:
    """One record per clip with its sampled memory window and diversity verdict."""
    L = seconds_to_steps(L_seconds, traj.pose_rate_hz)
    rng = np.random.default_rng(seed)
    records = []
    for clip in extract_clips(traj, clip_seconds, stride_seconds):
        ks, ke = sample_local_windows(clip.t0, clip.t1, L, 1, rng, mode)[0]
        path, turn = diversity_score(clip_segment(traj, clip))
        records.append({
            "type": "clip",
            "video_id": video_id,
            "t0": clip.t0,
            "t1": clip.t1,
            "k_s": int(ks),
            "k_e": int(ke),
            "kept": diversity_keep(path, turn, cfg),
            "path_length": path,
            "total_rotation": turn,
        })
    return records
