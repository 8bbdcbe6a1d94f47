"""Three-stage trajectory verification: database, geometric and kinematics checks.

Transition ``i`` joins pose ``i`` and pose ``i + 1``; every flag array has
``len(traj) - 1`` entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ConsistencyError,
    DegenerateGeometryError,
    InsufficientDataError,
    InsufficientMatchesError,
    ValidationError,
)
from .model_io import MatchSet, PairStats
from .pose import CameraPose, Intrinsics, Trajectory, geodesic_angle, relative_pose

MAD_CONSISTENCY = 0.6745
EPIPOLAR_DEN_FLOOR = 1e-12
# relative singular value under which the 8-point system counts as rank deficient
NULLSPACE_TOL = 1e-9


@dataclass(frozen=True)
class CheckConfig:
    min_inliers: int = 30
    min_inlier_ratio: float = 0.3
    epipolar_threshold: float = 0.01
    epipolar_inlier_floor: float = 0.5
    mad_score_threshold: float = 3.5
    forward_flip_angle: float = 90.0
    mad_epsilon: float = 1e-9
    ransac_iterations: int = 200
    ransac_seed: int = 0
    forward_axis: str = "optical"  # or "velocity"
    one_sided: bool = True  # only excursions above the median count as violations

    def __post_init__(self):
        for name in ("min_inliers", "epipolar_threshold", "mad_score_threshold",
                     "forward_flip_angle", "mad_epsilon", "ransac_iterations"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        for name in ("min_inlier_ratio", "epipolar_inlier_floor"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValidationError(f"{name} must lie in (0, 1]")
        if self.forward_axis not in ("optical", "velocity"):
            raise ValidationError("forward_axis must be 'optical' or 'velocity'")


@dataclass
class TransitionFlags:
    suspicious_db: np.ndarray
    bad_geometric: np.ndarray
    bad_kinematic: np.ndarray
    scores: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.suspicious_db)
        if len(self.bad_geometric) != n or len(self.bad_kinematic) != n:
            raise ConsistencyError("flag sequences have different lengths")
        for k, v in self.scores.items():
            if len(v) != n:
                raise ConsistencyError(f"score {k!r} has length {len(v)}, expected {n}")

    def __len__(self):
        return len(self.suspicious_db)


@dataclass(frozen=True, eq=False)
class BadIndex:
    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=bool).copy())

    def __len__(self):
        return len(self.bits)

    def __eq__(self, other):
        return isinstance(other, BadIndex) and np.array_equal(self.bits, other.bits)

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    @property
    def fraction(self) -> float:
        return self.count / len(self.bits) if len(self.bits) else 0.0

    def runs(self) -> list[tuple[int, int]]:
        """Maximal runs of set bits as inclusive (start, end) transition indices."""
        out = []
        start = None
        for i, b in enumerate(self.bits):
            if b and start is None:
                start = i
            elif not b and start is not None:
                out.append((start, i - 1))
                start = None
        if start is not None:
            out.append((start, len(self.bits) - 1))
        return out


# -- robust scores ------------------------------------------------------------

def robust_mad_scores(series, epsilon: float = 1e-9) -> np.ndarray:
    """Modified z-scores ``0.6745 |x - median| / MAD`` with the MAD floored at ``epsilon``."""
    x = np.asarray(series, dtype=float).ravel()
    if x.size < 2:
        raise InsufficientDataError("robust_mad_scores needs at least 2 values")
    med = np.median(x)
    dev = np.abs(x - med)
    mad = max(float(np.median(dev)), epsilon)
    return MAD_CONSISTENCY * dev / mad


# -- database check -----------------------------------------------------------

def transition_pairs(frame_names: Sequence[str]) -> list[tuple[str, str]]:
    return list(zip(frame_names[:-1], frame_names[1:]))


def database_check(stats: Sequence[PairStats], frame_names: Sequence[str], cfg: CheckConfig = CheckConfig()):
    """Flag transitions with weak or missing SfM pair statistics.

    Returns ``(suspicious, scores)``; missing pairs get NaN scores.
    """
    by_pair = {s.key: s for s in stats}
    pairs = transition_pairs(frame_names)
    suspicious = np.zeros(len(pairs), dtype=bool)
    inliers = np.full(len(pairs), np.nan)
    ratios = np.full(len(pairs), np.nan)
    for i, (a, b) in enumerate(pairs):
        s = by_pair.get(frozenset((a, b)))
        if s is None:
            suspicious[i] = True
            continue
        inliers[i] = s.num_inliers
        ratios[i] = s.inlier_ratio
        suspicious[i] = s.num_inliers < cfg.min_inliers or s.inlier_ratio < cfg.min_inlier_ratio
    return suspicious, {"db_inliers": inliers, "db_inlier_ratio": ratios}


# -- epipolar geometry ----------------------------------------------------------

def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def normalize_essential(E) -> np.ndarray:
    """Project onto singular values (s, s, 0) and scale to Frobenius norm sqrt(2)."""
    U, s, Vt = np.linalg.svd(np.asarray(E, dtype=float))
    sigma = 0.5 * (s[0] + s[1])
    if sigma <= 0:
        raise DegenerateGeometryError("essential matrix collapsed to zero")
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def essential_from_pose(a: CameraPose, b: CameraPose) -> np.ndarray:
    """``[t]x R`` of the relative pose a -> b, scaled to ||E||_F = sqrt(2)."""
    r_rel, t_rel = relative_pose(a, b)
    n = np.linalg.norm(t_rel)
    if n < 1e-12:
        raise DegenerateGeometryError("zero baseline between poses")
    return skew(t_rel / n) @ r_rel.as_matrix()


def essential_distance(E, E_ref) -> float:
    """Frobenius distance after aligning scale (both to sqrt(2)) and sign."""
    E = np.asarray(E, float)
    E_ref = np.asarray(E_ref, float)
    E = E * math.sqrt(2) / np.linalg.norm(E)
    E_ref = E_ref * math.sqrt(2) / np.linalg.norm(E_ref)
    return float(min(np.linalg.norm(E - E_ref), np.linalg.norm(E + E_ref)))


def _homog(x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    return np.column_stack([x, np.ones(len(x))])


def symmetric_epipolar_error(E, x_a, x_b) -> np.ndarray:
    """Symmetric epipolar distance for normalized correspondences.

    Returns ``sqrt(d)`` per pair. A pair whose epipolar lines both have a
    vanishing normal is undefined and reported as NaN; a single vanishing
    normal drops that term.
    """
    E = np.asarray(E, dtype=float)
    xa = _homog(x_a)
    xb = _homog(x_b)
    la = xa @ E.T  # E x_a, epipolar lines in image b
    lb = xb @ E    # E^T x_b, epipolar lines in image a
    num = np.einsum("ij,ij->i", xb, la) ** 2
    den_a = la[:, 0] ** 2 + la[:, 1] ** 2
    den_b = lb[:, 0] ** 2 + lb[:, 1] ** 2
    ok_a = den_a >= EPIPOLAR_DEN_FLOOR
    ok_b = den_b >= EPIPOLAR_DEN_FLOOR
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(ok_a, 1.0 / den_a, 0.0) + np.where(ok_b, 1.0 / den_b, 0.0)
    d = np.sqrt(num * inv)
    d[~(ok_a | ok_b)] = np.nan
    return d


def _hartley(x: np.ndarray):
    mean = x.mean(axis=0)
    scale = math.sqrt(2) / max(np.mean(np.linalg.norm(x - mean, axis=1)), 1e-15)
    T = np.array([[scale, 0, -scale * mean[0]], [0, scale, -scale * mean[1]], [0, 0, 1.0]])
    return (x - mean) * scale, T


def eight_point(x_a, x_b) -> np.ndarray:
    """Normalized 8-point essential matrix from >= 8 normalized correspondences."""
    x_a = np.asarray(x_a, float).reshape(-1, 2)
    x_b = np.asarray(x_b, float).reshape(-1, 2)
    if len(x_a) < 8:
        raise InsufficientMatchesError(f"need at least 8 correspondences, got {len(x_a)}")
    na, Ta = _hartley(x_a)
    nb, Tb = _hartley(x_b)
    ha, hb = _homog(na), _homog(nb)
    A = np.einsum("ni,nj->nij", hb, ha).reshape(-1, 9)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    sv = np.zeros(9)
    sv[: len(s)] = s
    if sv[0] == 0 or sv[7] / sv[0] < NULLSPACE_TOL:
        raise DegenerateGeometryError("8-point system has a multi-dimensional null space")
    F = Vt[-1].reshape(3, 3)
    E = Tb.T @ F @ Ta
    if np.linalg.norm(E) == 0:
        raise DegenerateGeometryError("essential matrix collapsed to zero")
    return normalize_essential(E)


@dataclass
class EssentialEstimate:
    E: np.ndarray
    inliers: np.ndarray
    seed: int


def ransac_essential(x_a, x_b, threshold: float = 0.01, iterations: int = 200, seed: int = 0) -> EssentialEstimate:
    """Fixed-seed robust sampling around :func:`eight_point` on normalized coordinates."""
    x_a = np.asarray(x_a, float).reshape(-1, 2)
    x_b = np.asarray(x_b, float).reshape(-1, 2)
    n = len(x_a)
    if n < 8:
        raise InsufficientMatchesError(f"need at least 8 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    best = None
    best_count = -1
    for _ in range(iterations):
        idx = rng.choice(n, size=8, replace=False)
        try:
            E = eight_point(x_a[idx], x_b[idx])
        except DegenerateGeometryError:
            continue
        err = symmetric_epipolar_error(E, x_a, x_b)
        inl = np.nan_to_num(err, nan=np.inf) < threshold
        c = int(inl.sum())
        if c > best_count:
            best, best_count = inl, c
            if c == n:
                break
    if best is None or best_count < 8:
        raise DegenerateGeometryError("no non-degenerate sample with at least 8 inliers")
    E = eight_point(x_a[best], x_b[best])
    inl = np.nan_to_num(symmetric_epipolar_error(E, x_a, x_b), nan=np.inf) < threshold
    return EssentialEstimate(E, inl, seed)


def estimate_essential(matches: MatchSet, k_a: Intrinsics, k_b: Intrinsics, cfg: CheckConfig = CheckConfig()) -> np.ndarray:
    """Essential matrix (||E||_F = sqrt(2)) from pixel matches and intrinsics."""
    if len(matches) < 8:
        raise InsufficientMatchesError(f"need at least 8 correspondences, got {len(matches)}")
    matches.validate_bounds(k_a, k_b)
    est = ransac_essential(
        k_a.normalize(matches.pixels_a),
        k_b.normalize(matches.pixels_b),
        cfg.epipolar_threshold,
        cfg.ransac_iterations,
        cfg.ransac_seed,
    )
    return est.E


# -- geometric check ------------------------------------------------------------

def _intrinsics_lookup(intrinsics):
    if isinstance(intrinsics, Intrinsics):
        return lambda name: intrinsics
    if callable(intrinsics):
        return intrinsics
    return lambda name: intrinsics[name]


def geometric_check(suspicious, traj: Trajectory, matches: Sequence[MatchSet] | Mapping, intrinsics,
                    cfg: CheckConfig = CheckConfig()):
    """Revisit suspicious transitions with their stored matches.

    A transition is bad when no essential matrix can be recomputed from its
    matches, when too few matches are inliers of the recomputed matrix, or
    when the median symmetric epipolar error of the matches under the
    essential matrix implied by the trajectory's own relative pose exceeds
    ``epipolar_threshold``. Suspicious transitions without matches are bad.
    """
    suspicious = np.asarray(suspicious, dtype=bool)
    n = len(traj) - 1
    if len(suspicious) != n:
        raise ConsistencyError("suspicious flags do not match the trajectory length")
    by_pair = matches if isinstance(matches, Mapping) else {m.key: m for m in matches}
    lookup = _intrinsics_lookup(intrinsics)
    bad = np.zeros(n, dtype=bool)
    median_err = np.full(n, np.nan)
    inlier_frac = np.full(n, np.nan)
    for i in np.flatnonzero(suspicious):
        pa, pb = traj[i], traj[i + 1]
        m = by_pair.get(frozenset((pa.frame_name, pb.frame_name)))
        if m is None:
            bad[i] = True
            continue
        m = m.oriented(pa.frame_name, pb.frame_name)
        ka, kb = lookup(pa.frame_name), lookup(pb.frame_name)
        try:
            E_est = estimate_essential(m, ka, kb, cfg)
        except (InsufficientDataError, DegenerateGeometryError):
            bad[i] = True
            continue
        xa, xb = ka.normalize(m.pixels_a), kb.normalize(m.pixels_b)
        err_est = symmetric_epipolar_error(E_est, xa, xb)
        defined = ~np.isnan(err_est)
        inlier_frac[i] = float(np.mean(err_est[defined] < cfg.epipolar_threshold)) if defined.any() else 0.0
        try:
            err_pose = symmetric_epipolar_error(essential_from_pose(pa, pb), xa, xb)
            median_err[i] = float(np.nanmedian(err_pose)) if (~np.isnan(err_pose)).any() else np.inf
        except DegenerateGeometryError:
            median_err[i] = np.inf
        bad[i] = median_err[i] > cfg.epipolar_threshold or inlier_frac[i] < cfg.epipolar_inlier_floor
    return bad, {"epipolar_median": median_err, "epipolar_inlier_fraction": inlier_frac}


# -- kinematics check -------------------------------------------------------------

KINEMATIC_SCORES = ("translation_spike", "rotation_jump", "forward_flip_deg", "smoothness")


def _angle_between(u, v) -> np.ndarray:
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    dot = np.einsum("ij,ij->i", u, v)
    return np.degrees(np.arctan2(cross, dot))


def _directed_scores(x: np.ndarray, cfg: CheckConfig) -> np.ndarray:
    scores = robust_mad_scores(x, cfg.mad_epsilon)
    if cfg.one_sided:
        scores = np.where(x >= np.median(x), scores, 0.0)
    return scores


def kinematics_check(traj: Trajectory, cfg: CheckConfig = CheckConfig()):
    """MAD-scored motion diagnostics per transition.

    Returns ``(bad, scores)`` where ``scores`` holds the translation-spike,
    rotation-jump and smoothness MAD scores and the forward-axis angle in
    degrees. Second-difference scores are attributed to both transitions
    they span (max over the two).
    """
    n = len(traj)
    if n < 4:
        raise InsufficientDataError("kinematics_check needs at least 4 poses")
    c = traj.centers()
    steps = np.linalg.norm(np.diff(c, axis=0), axis=1)
    rots = traj.rotations()
    angles = np.array([geodesic_angle(rots[i], rots[i + 1]) for i in range(n - 1)])
    if cfg.forward_axis == "optical":
        f = traj.forwards()
        flip = _angle_between(f[:-1], f[1:])
    else:
        v = np.diff(c, axis=0)
        flip = np.zeros(n - 1)
        flip[1:] = _angle_between(v[:-1], v[1:])
    second = np.linalg.norm(c[2:] - 2 * c[1:-1] + c[:-2], axis=1)

    s_trans = _directed_scores(steps, cfg)
    s_rot = _directed_scores(angles, cfg)
    s_acc = _directed_scores(second, cfg)
    s_smooth = np.zeros(n - 1)
    # second difference j (centered on pose j + 1) spans transitions j and j + 1
    s_smooth[:-1] = s_acc
    s_smooth[1:] = np.maximum(s_smooth[1:], s_acc)

    thr = cfg.mad_score_threshold
    bad = (s_trans > thr) | (s_rot > thr) | (s_smooth > thr) | (flip > cfg.forward_flip_angle)
    scores = {
        "translation_spike": s_trans,
        "rotation_jump": s_rot,
        "forward_flip_deg": flip,
        "smoothness": s_smooth,
    }
    return bad, scores


# -- fusion -----------------------------------------------------------------------

def fuse_bad_index(flags: TransitionFlags) -> BadIndex:
    """OR of geometric and kinematic failures; database suspicion alone never sets a bit."""
    g = np.asarray(flags.bad_geometric, dtype=bool)
    k = np.asarray(flags.bad_kinematic, dtype=bool)
    if len(g) != len(k) or len(g) != len(flags.suspicious_db):
        raise ConsistencyError("flag sequences have different lengths")
    return BadIndex(g | k)


def run_checks(traj: Trajectory, stats: Sequence[PairStats], matches, intrinsics,
               cfg: CheckConfig = CheckConfig()) -> TransitionFlags:
    """Database check, geometric check on the suspicious set, kinematics on everything."""
    names = [p.frame_name for p in traj]
    suspicious, db_scores = database_check(stats, names, cfg)
    bad_geo, geo_scores = geometric_check(suspicious, traj, matches, intrinsics, cfg)
    bad_kin, kin_scores = kinematics_check(traj, cfg)
    return TransitionFlags(suspicious, bad_geo, bad_kin, {**db_scores, **geo_scores, **kin_scores})


def _clean(v):
    v = float(v)
    return None if math.isnan(v) else (v if math.isfinite(v) else ("inf" if v > 0 else "-inf"))


def transition_records(video_id: str, traj: Trajectory, flags: TransitionFlags, bad: BadIndex) -> list[dict]:
    out = []
    for i in range(len(flags)):
        rec = {
            "type": "transition",
            "video_id": video_id,
            "transition": i,
            "frame_a": traj[i].frame_name,
            "frame_b": traj[i + 1].frame_name,
            "scores": {k: _clean(v[i]) for k, v in flags.scores.items()},
            "suspicious_db": bool(flags.suspicious_db[i]),
            "bad_geometric": bool(flags.bad_geometric[i]),
            "bad_kinematic": bool(flags.bad_kinematic[i]),
            "bad": bool(bad.bits[i]),
        }
        out.append(rec)
    return out
