"""Fix-or-discard policy for verified trajectories.

A run of bad transitions ``[a, b]`` replaces the poses that touch no good
transition. Interior runs are bridged by linear center interpolation and
slerp between the nearest good anchors; runs at either end of the video are
extrapolated at constant velocity with the rotation held.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .pose import CameraPose, Trajectory, geodesic_angle, slerp
from .verify import BadIndex, CheckConfig, TransitionFlags, fuse_bad_index, geometric_check, kinematics_check

ACCEPTED = "accepted"
FIXED = "fixed"
DISCARDED = "discarded"

DISCARD_REASONS = ("dense_bad_index", "run_too_long", "cap_exceeded", "revalidation_failed", "boundary_unfixable")


@dataclass(frozen=True)
class RepairConfig:
    max_bad_fraction: float = 0.2
    max_run_length: int = 8
    cap_angle_per_step: float = 15.0  # degrees
    extrapolate_boundaries: bool = True

    def __post_init__(self):
        if not 0 < self.max_bad_fraction < 1:
            raise ValidationError("max_bad_fraction must lie in (0, 1)")
        if self.max_run_length < 1:
            raise ValidationError("max_run_length must be >= 1")
        if not 0 < self.cap_angle_per_step < 180:
            raise ValidationError("cap_angle_per_step must lie in (0, 180)")


class RepairFailure(Exception):
    """A run could not be repaired; ``reason`` is one of DISCARD_REASONS."""

    def __init__(self, reason: str, message: str = ""):
        self.reason = reason
        super().__init__(message or reason)


@dataclass
class RepairOutcome:
    verdict: str
    trajectory: Trajectory | None = None
    repaired_runs: list[tuple[int, int]] = field(default_factory=list)
    reason: str | None = None
    post_fix_bad_count: int = 0

    def __post_init__(self):
        if self.verdict == FIXED and not self.repaired_runs:
            raise ValidationError("a fixed outcome needs at least one repaired run")
        if self.verdict == DISCARDED:
            if self.reason not in DISCARD_REASONS:
                raise ValidationError(f"invalid discard reason {self.reason!r}")
        elif self.reason is not None:
            raise ValidationError("only discarded outcomes carry a reason")

    def record(self, video_id: str) -> dict:
        rec = {"type": "verdict", "video_id": video_id, "verdict": self.verdict}
        if self.reason is not None:
            rec["reason"] = self.reason
        rec["repaired_runs"] = [list(r) for r in self.repaired_runs]
        rec["post_fix_bad_count"] = self.post_fix_bad_count
        return rec


@dataclass(frozen=True)
class RunDecision:
    fixable: bool
    runs: list[tuple[int, int]]
    reason: str | None = None


def classify_bad_runs(bad: BadIndex, cfg: RepairConfig = RepairConfig()) -> RunDecision:
    runs = bad.runs()
    if bad.fraction > cfg.max_bad_fraction:
        return RunDecision(False, runs, "dense_bad_index")
    if any(b - a + 1 > cfg.max_run_length for a, b in runs):
        return RunDecision(False, runs, "run_too_long")
    return RunDecision(True, runs)


@dataclass(frozen=True)
class RunPlan:
    """Poses ``replaced`` are rebuilt from the two ``anchors``; ``run`` is the declared transition range."""

    run: tuple[int, int]
    replaced: tuple[int, ...]
    anchors: tuple[int, int]
    side: str  # "interior", "start" or "end"


def plan_run(run: tuple[int, int], n_poses: int) -> RunPlan:
    a, b = run
    last = n_poses - 2
    if a == 0 and b == last:
        raise RepairFailure("boundary_unfixable", "every transition is bad")
    if a == 0:
        return RunPlan((0, b), tuple(range(0, b + 1)), (b + 1, b + 2), "start")
    if b == last:
        return RunPlan((a, last), tuple(range(a + 1, n_poses)), (a - 1, a), "end")
    if a == b:
        # a lone bad transition: either endpoint may be wrong, bridge both
        return RunPlan((a - 1, a + 1), (a, a + 1), (a - 1, a + 2), "interior")
    return RunPlan((a, b), tuple(range(a + 1, b + 1)), (a, b + 1), "interior")


def core_mask(flags: TransitionFlags, cfg: CheckConfig = CheckConfig()) -> np.ndarray:
    """Transitions flagged by something other than the smoothness diagnostic.

    A second-difference violation is attributed to both transitions it spans,
    so a single displaced pose also lights up its neighbours. Without
    per-diagnostic scores every bad transition counts as core.
    """
    sc = flags.scores
    bits = np.asarray(flags.bad_geometric, bool) | np.asarray(flags.bad_kinematic, bool)
    if not all(k in sc for k in ("translation_spike", "rotation_jump", "forward_flip_deg")):
        return bits
    thr = cfg.mad_score_threshold
    core = (
        np.asarray(flags.bad_geometric, bool)
        | (np.nan_to_num(sc["translation_spike"]) > thr)
        | (np.nan_to_num(sc["rotation_jump"]) > thr)
        | (np.nan_to_num(sc["forward_flip_deg"]) > cfg.forward_flip_angle)
    )
    return core & bits


def trim_halo(runs: Sequence[tuple[int, int]], core: np.ndarray) -> list[tuple[int, int]]:
    """Drop smoothness-only transitions from the ends of runs that keep a core."""
    out = []
    for a, b in runs:
        idx = [i for i in range(a, b + 1) if core[i]]
        out.append((idx[0], idx[-1]) if idx else (a, b))
    return out


def _conflict(p: RunPlan, q: RunPlan) -> bool:
    busy_p = set(p.replaced) | set(p.anchors)
    busy_q = set(q.replaced) | set(q.anchors)
    return bool(set(p.replaced) & busy_q or set(q.replaced) & busy_p)


def plan_runs(runs: Sequence[tuple[int, int]], n_poses: int) -> list[RunPlan]:
    """Plan every run, merging neighbours whose footprints collide."""
    runs = sorted(runs)
    while True:
        plans = [plan_run(r, n_poses) for r in runs]
        for i in range(len(plans) - 1):
            if _conflict(plans[i], plans[i + 1]):
                merged = (min(runs[i][0], plans[i].run[0]), max(runs[i + 1][1], plans[i + 1].run[1]))
                runs = runs[:i] + [merged] + runs[i + 2:]
                break
        else:
            return plans


def repair_run(traj: Trajectory, anchors: tuple[int, int], cfg: RepairConfig = RepairConfig()) -> list[CameraPose]:
    """Replacement poses strictly between anchor poses ``i`` and ``j``."""
    i, j = anchors
    if j - i < 2:
        raise ValidationError("anchors must enclose at least one pose")
    pi, pj = traj[i], traj[j]
    per_step = math.degrees(geodesic_angle(pi.rotation, pj.rotation)) / (j - i)
    if per_step > cfg.cap_angle_per_step:
        raise RepairFailure(
            "cap_exceeded", f"anchors {i}/{j} rotate {per_step:.2f} deg per step (cap {cfg.cap_angle_per_step})"
        )
    ci, cj = pi.center, pj.center
    out = []
    for k in range(i + 1, j):
        s = (k - i) / (j - i)
        rot = slerp(pi.rotation, pj.rotation, s)
        old = traj[k]
        out.append(CameraPose.from_center(rot, (1.0 - s) * ci + s * cj, old.time_step, old.frame_name))
    return out


def extrapolate_boundary(traj: Trajectory, replaced: Sequence[int], cfg: RepairConfig = RepairConfig()) -> list[CameraPose]:
    """Constant-velocity centers and held rotation for poses at the start or end of the video."""
    n = len(traj)
    replaced = list(replaced)
    if not cfg.extrapolate_boundaries:
        raise RepairFailure("boundary_unfixable", "boundary extrapolation disabled")
    if replaced[-1] == n - 1:
        first = replaced[0]
        g0, g1 = first - 2, first - 1
    elif replaced[0] == 0:
        last = replaced[-1]
        g0, g1 = last + 2, last + 1
    else:
        raise ValidationError("extrapolation needs a run touching the first or last pose")
    if min(g0, g1) < 0 or max(g0, g1) > n - 1:
        raise RepairFailure("boundary_unfixable", "fewer than two good poses next to the boundary run")
    anchor = traj[g1]
    velocity = traj[g1].center - traj[g0].center
    direction = 1 if g1 > g0 else -1
    out = []
    for k in replaced:
        steps = (k - g1) * direction
        old = traj[k]
        out.append(CameraPose.from_center(anchor.rotation, anchor.center + steps * velocity, old.time_step,
                                          old.frame_name))
    return out


def apply_plans(traj: Trajectory, plans: Sequence[RunPlan], cfg: RepairConfig = RepairConfig()) -> Trajectory:
    poses = list(traj.poses)
    for plan in plans:
        if plan.side == "interior":
            new = repair_run(traj, plan.anchors, cfg)
        else:
            new = extrapolate_boundary(traj, plan.replaced, cfg)
        for k, p in zip(plan.replaced, new):
            poses[k] = p
    return traj.with_poses(poses)


def _has_matches(traj: Trajectory, matches, i: int) -> bool:
    key = frozenset((traj[i].frame_name, traj[i + 1].frame_name))
    if isinstance(matches, dict):
        return key in matches
    return any(m.key == key for m in matches)


def repair_and_revalidate(traj: Trajectory, flags: TransitionFlags, stats, matches, intrinsics,
                          cfg_check: CheckConfig = CheckConfig(),
                          cfg_repair: RepairConfig = RepairConfig()) -> RepairOutcome:
    """Classify, repair and re-check a trajectory, returning the verdict.

    Re-validation reruns the kinematics check on the whole fixed trajectory
    and the geometric check on repaired transitions that have stored matches.
    The database check is skipped since repaired poses have no SfM statistics.
    Only repaired and previously good transitions are judged after the fix.
    """
    del stats  # repaired poses have no statistics; kept for signature symmetry
    bad = fuse_bad_index(flags)
    if bad.count == 0:
        return RepairOutcome(ACCEPTED, traj)
    decision = classify_bad_runs(bad, cfg_repair)
    if not decision.fixable:
        return RepairOutcome(DISCARDED, reason=decision.reason, post_fix_bad_count=bad.count)
    try:
        plans = plan_runs(trim_halo(decision.runs, core_mask(flags, cfg_check)), len(traj))
        fixed = apply_plans(traj, plans, cfg_repair)
    except RepairFailure as exc:
        return RepairOutcome(DISCARDED, reason=exc.reason, post_fix_bad_count=bad.count)
    runs = [p.run for p in plans]

    repaired = np.zeros(len(traj) - 1, dtype=bool)
    for a, b in runs:
        repaired[a:b + 1] = True
    post_kin, _ = kinematics_check(fixed, cfg_check)
    recheck = np.array([repaired[i] and _has_matches(fixed, matches, i) for i in range(len(repaired))], dtype=bool)
    post_geo = np.zeros_like(repaired)
    if recheck.any():
        post_geo, _ = geometric_check(recheck, fixed, matches, intrinsics, cfg_check)
    # previously bad transitions left outside every declared run are not judged
    post = (post_kin | post_geo) & (repaired | ~bad.bits)
    if post.any():
        return RepairOutcome(DISCARDED, reason="revalidation_failed", repaired_runs=runs,
                             post_fix_bad_count=int(post.sum()))
    return RepairOutcome(FIXED, fixed, runs)
