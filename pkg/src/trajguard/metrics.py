"""Trajectory-following and registration metrics.

Both trajectories are first expressed in their own frame-0 camera
coordinates and scaled to unit path length, so the metrics ignore any
global similarity transform of either input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AlignmentError, UndefinedMetricError, ValidationError
from .model_io import SparseModel
from .pose import Trajectory

NORMALIZATION = "frame0_alignment+unit_path_length"
ZERO_DISPLACEMENT = 1e-9


@dataclass(frozen=True)
class PoseError:
    rotation_error: float
    translation_angle_error: float
    combined: float

    def __post_init__(self):
        for v in (self.rotation_error, self.translation_angle_error, self.combined):
            if not 0.0 <= v <= 180.0 + 1e-9:
                raise ValidationError(f"pose error {v} outside [0, 180]")


def _check_matched(gt: Trajectory, pred: Trajectory):
    if len(gt) != len(pred):
        raise AlignmentError(f"trajectories have {len(gt)} and {len(pred)} poses")
    if len(gt) == 0:
        raise AlignmentError("empty trajectories")
    if not np.array_equal(gt.time_steps, pred.time_steps):
        raise AlignmentError("trajectories are sampled at different time steps")


def normalized_arrays(traj: Trajectory, scale: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Rotations ``(N, 3, 3)`` and centers ``(N, 3)`` in the frame-0 camera frame.

    With ``scale`` the centers are divided by the path length (left as is
    for a static trajectory).
    """
    R = np.stack([p.R for p in traj])
    c = traj.centers()
    R0 = R[0]
    rots = R @ R0.T
    centers = (c - c[0]) @ R0.T
    if scale:
        path = float(np.sum(np.linalg.norm(np.diff(centers, axis=0), axis=1)))
        if path > ZERO_DISPLACEMENT:
            centers = centers / path
    return rots, centers


def _rotation_angles_deg(Ra: np.ndarray, Rb: np.ndarray) -> np.ndarray:
    rel = np.einsum("nji,njk->nik", Ra, Rb)  # Ra^T Rb
    # angle from the skew part and the trace, stable at both ends
    s = 0.5 * np.linalg.norm(np.stack([rel[:, 2, 1] - rel[:, 1, 2], rel[:, 0, 2] - rel[:, 2, 0],
                                       rel[:, 1, 0] - rel[:, 0, 1]], axis=1), axis=1)
    c = 0.5 * (np.trace(rel, axis1=1, axis2=2) - 1.0)
    return np.degrees(np.arctan2(s, c))


def _direction_angles_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ang = np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.einsum("ij,ij->i", a, b)))
    za, zb = na < ZERO_DISPLACEMENT, nb < ZERO_DISPLACEMENT
    ang = np.where(za & zb, 0.0, ang)
    return np.where(za ^ zb, 90.0, ang)


def pair_pose_errors(gt: Trajectory, pred: Trajectory, combine: str = "max") -> list[PoseError]:
    """Per-frame rotation and translation-direction errors (degrees) after normalization.

    ``combine`` is ``"max"`` (relocation convention) or ``"rotation"``.
    """
    if combine not in ("max", "rotation"):
        raise ValidationError(f"unknown combine rule {combine!r}")
    _check_matched(gt, pred)
    Rg, cg = normalized_arrays(gt)
    Rp, cp = normalized_arrays(pred)
    rot = _rotation_angles_deg(Rg, Rp)
    trans = _direction_angles_deg(cg, cp)
    comb = np.maximum(rot, trans) if combine == "max" else rot
    return [PoseError(float(r), float(t), float(c)) for r, t, c in zip(rot, trans, comb)]


def _combined(errors) -> np.ndarray:
    vals = [e.combined if isinstance(e, PoseError) else float(e) for e in errors]
    return np.asarray(vals, dtype=float)


def auc_at(errors: Sequence[PoseError] | Sequence[float], tau: float) -> float:
    """Mean accuracy over thresholds 1, 2, ..., tau degrees (accuracy = fraction with error < x)."""
    if not tau > 0:
        raise ValidationError("tau must be positive")
    e = _combined(errors)
    if e.size == 0:
        raise UndefinedMetricError("no errors to integrate")
    grid = np.arange(1, math.floor(tau) + 1, dtype=float)
    hits = int(np.count_nonzero(e[None, :] < grid[:, None]))  # integer count keeps exact ratios exact
    return hits / (e.size * tau)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na2, nb2 = float(a @ a), float(b @ b)
    if na2 == 0.0 or nb2 == 0.0:
        raise UndefinedMetricError("zero-norm pose vector")
    # sqrt(x * x) == x exactly, so identical inputs give exactly 1
    return float(np.clip((a @ b) / math.sqrt(na2 * nb2), -1.0, 1.0))


def _flattened(rots: np.ndarray, centers: np.ndarray) -> np.ndarray:
    t = -np.einsum("nij,nj->ni", rots, centers)
    return np.concatenate([rots, t[:, :, None]], axis=2).reshape(len(rots), 12)


def pose_cosine_similarity(gt: Trajectory, pred: Trajectory, per_frame: bool = False,
                           normalize: bool = True) -> float:
    """Cosine between the concatenated flattened ``[R | t]`` of two trajectories.

    ``per_frame`` averages per-frame cosines instead; ``normalize=False``
    skips the path-length scaling (frame-0 alignment is always applied).
    """
    _check_matched(gt, pred)
    a = _flattened(*normalized_arrays(gt, normalize))
    b = _flattened(*normalized_arrays(pred, normalize))
    if per_frame:
        return float(np.mean([_cosine(x, y) for x, y in zip(a, b)]))
    return _cosine(a.reshape(-1), b.reshape(-1))


def reconstruction_rate(model: SparseModel) -> float:
    if model.total_frame_count <= 0:
        raise UndefinedMetricError("model has no frames")
    return model.registered_count / model.total_frame_count


# report keys and the table headings they correspond to
COLUMN_TITLES = {"auc30": "AUC@30", "auc15": "AUC@15", "cosine": "CosSim"}


def metrics_record(gt: Trajectory, pred: Trajectory, combine: str = "max", per_frame: bool = False,
                   normalize: bool = True) -> dict:
    errs = pair_pose_errors(gt, pred, combine)
    return {
        "type": "metrics",
        "auc30": auc_at(errs, 30),
        "auc15": auc_at(errs, 15),
        "cosine": pose_cosine_similarity(gt, pred, per_frame, normalize),
        "n_frames": len(errs),
        "normalization": NORMALIZATION if normalize else "frame0_alignment",
        "combine": combine,
    }
