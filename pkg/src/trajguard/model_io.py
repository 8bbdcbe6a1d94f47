"""Readers and writers for COLMAP text models and the JSON-lines exports.

Line-delimited records are one JSON object per line. Every parser either
accepts a line or raises :class:`ParseError` carrying the line number.
"""

from __future__ import annotations

import io
import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np

from .errors import ParseError, QuaternionDriftWarning, UnsortedInputWarning, UnsupportedModelError, ValidationError
from .pose import CameraPose, Intrinsics, Rotation, Trajectory

QUATERNION_DRIFT_TOL = 1e-3


@dataclass(frozen=True)
class PairStats:
    image_a: str
    image_b: str
    num_matches: int
    num_inliers: int

    def __post_init__(self):
        if self.num_matches < 0 or self.num_inliers < 0:
            raise ValidationError("match counts must be non-negative")
        if self.num_inliers > self.num_matches:
            raise ValidationError(
                f"num_inliers ({self.num_inliers}) exceeds num_matches ({self.num_matches}) "
                f"for pair {self.image_a}/{self.image_b}"
            )

    @property
    def inlier_ratio(self) -> float:
        return self.num_inliers / self.num_matches if self.num_matches > 0 else 0.0

    @property
    def key(self) -> frozenset:
        return frozenset((self.image_a, self.image_b))


@dataclass(frozen=True, eq=False)
class MatchSet:
    image_a: str
    image_b: str
    pixels_a: np.ndarray  # (N, 2)
    pixels_b: np.ndarray  # (N, 2)

    def __post_init__(self):
        a = np.asarray(self.pixels_a, dtype=float).reshape(-1, 2)
        b = np.asarray(self.pixels_b, dtype=float).reshape(-1, 2)
        if a.shape != b.shape:
            raise ValidationError("pixels_a and pixels_b must have the same length")
        object.__setattr__(self, "pixels_a", a)
        object.__setattr__(self, "pixels_b", b)

    def __len__(self):
        return len(self.pixels_a)

    def __eq__(self, other):
        if not isinstance(other, MatchSet):
            return NotImplemented
        return (
            self.image_a == other.image_a
            and self.image_b == other.image_b
            and np.array_equal(self.pixels_a, other.pixels_a)
            and np.array_equal(self.pixels_b, other.pixels_b)
        )

    @property
    def correspondences(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.pixels_a, self.pixels_b))

    @property
    def key(self) -> frozenset:
        return frozenset((self.image_a, self.image_b))

    def validate_bounds(self, k_a: Intrinsics, k_b: Intrinsics) -> None:
        bad_a = ~k_a.contains(self.pixels_a)
        bad_b = ~k_b.contains(self.pixels_b)
        if bad_a.any() or bad_b.any():
            idx = int(np.flatnonzero(bad_a | bad_b)[0])
            raise ValidationError(
                f"correspondence {idx} of {self.image_a}/{self.image_b} lies outside the image bounds"
            )

    def oriented(self, image_a: str, image_b: str) -> MatchSet:
        """Return the set with ``image_a`` first, swapping sides if needed."""
        if (self.image_a, self.image_b) == (image_a, image_b):
            return self
        if (self.image_a, self.image_b) == (image_b, image_a):
            return MatchSet(image_a, image_b, self.pixels_b, self.pixels_a)
        raise KeyError((image_a, image_b))


@dataclass
class SparseModel:
    cameras: dict[int, Intrinsics]
    images: dict[str, CameraPose]
    image_cameras: dict[str, int]
    total_frame_count: int

    def __post_init__(self):
        for name, cam in self.image_cameras.items():
            if cam not in self.cameras:
                raise ValidationError(f"image {name} references unknown camera id {cam}")
        if len(self.images) > self.total_frame_count:
            raise ValidationError("more registered images than total frames")

    @property
    def registered_count(self) -> int:
        return len(self.images)

    def intrinsics_for(self, name: str) -> Intrinsics:
        return self.cameras[self.image_cameras[name]]

    def trajectory(self, pose_rate_hz: float = 4.0) -> Trajectory:
        return Trajectory(tuple(sorted(self.images.values(), key=lambda p: p.time_step)), pose_rate_hz)


def natural_key(name: str):
    """Sort key that orders embedded integers numerically (f2 < f10)."""
    return [(0, int(tok), "") if tok.isdigit() else (1, 0, tok) for tok in re.split(r"(\d+)", name) if tok != ""]


def _lines(source) -> Iterator[tuple[int, str]]:
    """Number the lines of a Path (read from disk), a str (literal text) or a text stream."""
    if isinstance(source, Path):
        with open(source, encoding="utf-8") as fh:
            yield from enumerate(fh.read().splitlines(), start=1)
    elif isinstance(source, str):
        yield from enumerate(source.splitlines(), start=1)
    else:
        yield from enumerate((ln.rstrip("\r\n") for ln in source), start=1)


def _source_name(source) -> str | None:
    if isinstance(source, Path):
        return str(source)
    return getattr(source, "name", None)


def _num(tok: str, kind, lineno: int, src, what: str):
    try:
        return kind(tok)
    except ValueError:
        raise ParseError(f"expected {kind.__name__} for {what}, got {tok!r}", lineno, src) from None


# -- COLMAP text ------------------------------------------------------------

def parse_colmap_cameras(source) -> dict[int, Intrinsics]:
    """Parse ``cameras.txt``. Supports PINHOLE and SIMPLE_PINHOLE."""
    src = _source_name(source)
    cameras: dict[int, Intrinsics] = {}
    for lineno, raw in _lines(source):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        toks = line.split()
        if len(toks) < 4:
            raise ParseError("camera line needs CAMERA_ID MODEL WIDTH HEIGHT PARAMS...", lineno, src)
        cam_id = _num(toks[0], int, lineno, src, "CAMERA_ID")
        model = toks[1]
        width = _num(toks[2], int, lineno, src, "WIDTH")
        height = _num(toks[3], int, lineno, src, "HEIGHT")
        params = [_num(t, float, lineno, src, "camera parameter") for t in toks[4:]]
        if model == "PINHOLE":
            if len(params) != 4:
                raise ParseError(f"PINHOLE expects 4 params, got {len(params)}", lineno, src)
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ParseError(f"SIMPLE_PINHOLE expects 3 params, got {len(params)}", lineno, src)
            f, cx, cy = params
            fx = fy = f
        else:
            raise UnsupportedModelError(f"unsupported camera model {model!r}", lineno, src)
        if cam_id in cameras:
            raise ParseError(f"duplicate CAMERA_ID {cam_id}", lineno, src)
        try:
            cameras[cam_id] = Intrinsics(fx, fy, cx, cy, width, height)
        except ValueError as exc:
            raise ParseError(str(exc), lineno, src) from None
    return cameras


def parse_colmap_images_with_cameras(source) -> tuple[dict[str, CameraPose], dict[str, int]]:
    src = _source_name(source)
    records = []
    expecting_points = False
    for lineno, raw in _lines(source):
        line = raw.strip()
        if line.startswith("#"):
            continue
        if expecting_points:
            # POINTS2D line: (X, Y, POINT3D_ID) triples, possibly empty; values ignored
            expecting_points = False
            toks = line.split()
            if len(toks) % 3 != 0:
                raise ParseError("POINTS2D line must hold (X, Y, POINT3D_ID) triples", lineno, src)
            for tok in toks:
                _num(tok, float, lineno, src, "POINTS2D entry")
            continue
        if not line:
            continue
        toks = line.split()
        if len(toks) < 10:
            raise ParseError("image line needs IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME", lineno, src)
        _num(toks[0], int, lineno, src, "IMAGE_ID")
        q = np.array([_num(t, float, lineno, src, "quaternion") for t in toks[1:5]])
        t = np.array([_num(v, float, lineno, src, "translation") for v in toks[5:8]])
        cam = _num(toks[8], int, lineno, src, "CAMERA_ID")
        name = " ".join(toks[9:])
        norm = float(np.linalg.norm(q))
        if norm == 0.0 or not np.isfinite(norm):
            raise ParseError("quaternion has zero or non-finite norm", lineno, src)
        if abs(norm - 1.0) > QUATERNION_DRIFT_TOL:
            warnings.warn(
                f"{name}: quaternion norm {norm:.6g} drifts from 1 by more than {QUATERNION_DRIFT_TOL}",
                QuaternionDriftWarning,
                stacklevel=2,
            )
        records.append((lineno, name, q, t, cam))
        expecting_points = True
    seen: dict[str, int] = {}
    for lineno, name, *_ in records:
        if name in seen:
            raise ParseError(f"duplicate image NAME {name!r} (first on line {seen[name]})", lineno, src)
        seen[name] = lineno
    ordered = sorted(records, key=lambda r: natural_key(r[1]))
    poses, cams = {}, {}
    for step, (lineno, name, q, t, cam) in enumerate(ordered):
        try:
            poses[name] = CameraPose(Rotation(q), t, step, name)
        except ValueError as exc:
            raise ParseError(str(exc), lineno, src) from None
        cams[name] = cam
    return poses, cams


def parse_colmap_images(source) -> dict[str, CameraPose]:
    """Parse ``images.txt`` into frame name -> pose.

    Time steps come from natural ordering of frame names.
    """
    return parse_colmap_images_with_cameras(source)[0]


def read_sparse_model(model_dir, total_frame_count: int | None = None) -> SparseModel:
    model_dir = Path(model_dir)
    cameras = parse_colmap_cameras(model_dir / "cameras.txt")
    images, image_cams = parse_colmap_images_with_cameras(model_dir / "images.txt")
    total = len(images) if total_frame_count is None else total_frame_count
    return SparseModel(cameras, images, image_cams, total)


def write_colmap_cameras(cameras: dict[int, Intrinsics], fh: IO[str]) -> None:
    fh.write("# Camera list with one line of data per camera:\n")
    fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
    for cam_id in sorted(cameras):
        k = cameras[cam_id]
        fh.write(f"{cam_id} PINHOLE {k.width} {k.height} {k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r}\n")


def write_colmap_images(poses: Iterable[CameraPose], fh: IO[str], camera_id: int = 1) -> None:
    fh.write("# Image list with two lines of data per image:\n")
    fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
    fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
    for image_id, p in enumerate(poses, start=1):
        q = " ".join(repr(float(v)) for v in p.rotation.q)
        t = " ".join(repr(float(v)) for v in p.translation)
        fh.write(f"{image_id} {q} {t} {camera_id} {p.frame_name}\n\n")


# -- JSON lines -------------------------------------------------------------

def _json_records(source) -> Iterator[tuple[int, dict]]:
    src = _source_name(source)
    for lineno, raw in _lines(source):
        line = raw.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno, src) from None
        if not isinstance(rec, dict):
            raise ParseError("record must be a JSON object", lineno, src)
        yield lineno, rec


def _require(rec: dict, keys, lineno, src):
    missing = [k for k in keys if k not in rec]
    if missing:
        raise ParseError(f"missing field(s) {', '.join(missing)}", lineno, src)


def _int_field(rec, key, lineno, src) -> int:
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ParseError(f"field {key!r} must be an integer", lineno, src)
    return v


def _vec_field(rec, key, n, lineno, src) -> np.ndarray:
    v = rec[key]
    if not isinstance(v, list) or len(v) != n or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in v
    ):
        raise ParseError(f"field {key!r} must be a list of {n} numbers", lineno, src)
    return np.array(v, dtype=float)


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=False, allow_nan=False)


def read_pair_stats(source) -> list[PairStats]:
    src = _source_name(source)
    out = []
    for lineno, rec in _json_records(source):
        _require(rec, ("image_a", "image_b", "num_matches", "num_inliers"), lineno, src)
        try:
            out.append(
                PairStats(
                    str(rec["image_a"]),
                    str(rec["image_b"]),
                    _int_field(rec, "num_matches", lineno, src),
                    _int_field(rec, "num_inliers", lineno, src),
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from None
    return out


def write_pair_stats(stats: Iterable[PairStats], fh: IO[str]) -> None:
    for s in stats:
        fh.write(dumps_record({"image_a": s.image_a, "image_b": s.image_b,
                               "num_matches": s.num_matches, "num_inliers": s.num_inliers}) + "\n")


def read_matches(source) -> list[MatchSet]:
    src = _source_name(source)
    out = []
    for lineno, rec in _json_records(source):
        _require(rec, ("image_a", "image_b", "correspondences"), lineno, src)
        corr = rec["correspondences"]
        if not isinstance(corr, list):
            raise ParseError("'correspondences' must be a list", lineno, src)
        a, b = [], []
        for j, pair in enumerate(corr):
            try:
                (ua, va), (ub, vb) = pair
                vals = [ua, va, ub, vb]
                if any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in vals):
                    raise TypeError
            except (TypeError, ValueError):
                raise ParseError(f"correspondence {j} must be [[u, v], [u, v]]", lineno, src) from None
            a.append((ua, va))
            b.append((ub, vb))
        out.append(MatchSet(str(rec["image_a"]), str(rec["image_b"]), np.array(a, float), np.array(b, float)))
    return out


def write_matches(matches: Iterable[MatchSet], fh: IO[str]) -> None:
    for m in matches:
        corr = [[[float(pa[0]), float(pa[1])], [float(pb[0]), float(pb[1])]]
                for pa, pb in zip(m.pixels_a, m.pixels_b)]
        fh.write(dumps_record({"image_a": m.image_a, "image_b": m.image_b, "correspondences": corr}) + "\n")


def read_trajectory(source) -> Trajectory:
    """Read a header record ``{"pose_rate_hz": ...}`` followed by pose records."""
    src = _source_name(source)
    rate = None
    poses = []
    seen: dict[int, int] = {}
    for lineno, rec in _json_records(source):
        if "pose_rate_hz" in rec and "time_step" not in rec:
            if rate is not None:
                raise ParseError("duplicate header record", lineno, src)
            r = rec["pose_rate_hz"]
            if isinstance(r, bool) or not isinstance(r, (int, float)) or not r > 0:
                raise ParseError("pose_rate_hz must be a positive number", lineno, src)
            rate = float(r)
            continue
        _require(rec, ("time_step", "frame_name", "q", "t"), lineno, src)
        step = _int_field(rec, "time_step", lineno, src)
        if step < 0:
            raise ParseError("time_step must be >= 0", lineno, src)
        if step in seen:
            raise ParseError(f"duplicate time_step {step} (first on line {seen[step]})", lineno, src)
        seen[step] = lineno
        q = _vec_field(rec, "q", 4, lineno, src)
        t = _vec_field(rec, "t", 3, lineno, src)
        try:
            poses.append(CameraPose(Rotation(q), t, step, str(rec["frame_name"])))
        except ValueError as exc:
            raise ParseError(str(exc), lineno, src) from None
    if rate is None:
        raise ParseError("missing header record with pose_rate_hz", None, src)
    steps = [p.time_step for p in poses]
    if steps != sorted(steps):
        warnings.warn("trajectory records are not in time order; sorting", UnsortedInputWarning, stacklevel=2)
        poses.sort(key=lambda p: p.time_step)
    return Trajectory(tuple(poses), rate)


def write_trajectory(traj: Trajectory, fh: IO[str]) -> None:
    fh.write(dumps_record({"pose_rate_hz": traj.pose_rate_hz}) + "\n")
    for p in traj:
        fh.write(dumps_record({
            "time_step": p.time_step,
            "frame_name": p.frame_name,
            "q": [float(v) for v in p.rotation.q],
            "t": [float(v) for v in p.translation],
        }) + "\n")


def read_trajectory_file(path) -> Trajectory:
    with open(path, encoding="utf-8") as fh:
        return read_trajectory(fh)


def write_trajectory_file(traj: Trajectory, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        write_trajectory(traj, fh)


def trajectory_to_string(traj: Trajectory) -> str:
    buf = io.StringIO()
    write_trajectory(traj, buf)
    return buf.getvalue()


def write_numeric_records(name: str, matrix, fh: IO[str], **meta) -> None:
    """Dump a 2D array as one record per row (bank / world-token inspection)."""
    for i, row in enumerate(np.atleast_2d(matrix)):
        rec = {"kind": name, **meta, "row": i, "values": [float(v) for v in row]}
        fh.write(dumps_record(rec) + "\n")
