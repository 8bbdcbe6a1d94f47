"""Command-line entry point.

Exit status: 0 clean or accepted, 1 something was flagged or discarded,
2 bad input or configuration.
"""

from __future__ import annotations

import argparse
import io
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .config import PipelineConfig, load_config
from .errors import ConfigError, TrajGuardError
from .metrics import metrics_record, pair_pose_errors, reconstruction_rate
from .model_io import (
    dumps_record,
    read_matches,
    read_pair_stats,
    read_sparse_model,
    read_trajectory_file,
    write_colmap_cameras,
    write_colmap_images,
    write_matches,
    write_numeric_records,
    write_pair_stats,
    write_trajectory_file,
)
from .pose import Trajectory, flatten_pose
from .repair import ACCEPTED, FIXED, repair_and_revalidate
from .retriever import (
    RetrieverParams,
    build_and_encode_queries,
    encode_memory,
    reconstruct_memory,
    retrieve,
    synth_memory_features,
)
from .synth import CORRUPTION_KINDS, DEFAULT_MAGNITUDES, CorruptionSpec, inject_dense, simulate_video
from .verify import fuse_bad_index, run_checks, transition_records
from .window import sample_local_window, seconds_to_steps, window_manifest

log = logging.getLogger("trajguard")

EXIT_OK, EXIT_FLAGGED, EXIT_INPUT = 0, 1, 2
STATS_FILE = "pair_stats.jsonl"
MATCHES_FILE = "matches.jsonl"


# -- helpers --------------------------------------------------------------------

class _Sink:
    """Collects report lines and writes them in one go (atomic rename for files)."""

    def __init__(self, out: str | None):
        self.out = out
        self.lines: list[str] = []

    def add(self, records):
        self.lines.extend(dumps_record(r) for r in records)

    def close(self):
        text = "".join(line + "\n" for line in self.lines)
        if self.out in (None, "-"):
            sys.stdout.write(text)
            return
        path = Path(self.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)


def _figure_dir(args) -> Path | None:
    if args.no_figures:
        return None
    if args.figures:
        return Path(args.figures)
    if args.out and args.out != "-":
        out = Path(args.out)
        return out.parent / f"{out.stem}_figures"
    return None


def _load_trajectory(path, cfg: PipelineConfig) -> Trajectory:
    p = Path(path)
    if p.is_dir():
        return read_sparse_model(p).trajectory(cfg.pose_rate_hz)
    return read_trajectory_file(p)


def _video_inputs(video_dir, stats_path, matches_path, cfg: PipelineConfig, total_frames=None):
    d = Path(video_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: not a directory")
    model = read_sparse_model(d, total_frames)
    traj = model.trajectory(cfg.pose_rate_hz)
    stats = read_pair_stats(Path(stats_path) if stats_path else d / STATS_FILE)
    matches = read_matches(Path(matches_path) if matches_path else d / MATCHES_FILE)
    return model, traj, stats, matches


def _run_batch(func, jobs, n_jobs: int):
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(func, jobs))
    return [func(j) for j in jobs]


def _error_result(video_id: str, exc: Exception):
    msg = f"{type(exc).__name__}: {exc}"
    return [{"type": "error", "video_id": video_id, "message": msg}], EXIT_INPUT, msg


# -- per-video workers (module level so they pickle) -------------------------------

def _check_one(job):
    video_dir, stats_path, matches_path, cfg, fig_dir, total_frames, do_repair, export = job
    video_id = Path(video_dir).name
    try:
        model, traj, stats, matches = _video_inputs(video_dir, stats_path, matches_path, cfg, total_frames)
        flags = run_checks(traj, stats, matches, model.intrinsics_for, cfg.check)
    except (TrajGuardError, OSError, ValueError, KeyError) as exc:
        return _error_result(video_id, exc)
    bad = fuse_bad_index(flags)
    records = transition_records(video_id, traj, flags, bad)
    records.append({
        "type": "bad_index", "video_id": video_id, "bits": [int(b) for b in bad.bits],
        "runs": [list(r) for r in bad.runs()], "bad_count": bad.count,
        "reconstruction_rate": reconstruction_rate(model), "ransac_seed": cfg.check.ransac_seed,
    })
    code = EXIT_FLAGGED if bad.count else EXIT_OK
    outcome = None
    if do_repair:
        outcome = repair_and_revalidate(traj, flags, stats, matches, model.intrinsics_for, cfg.check, cfg.repair)
        records.append(outcome.record(video_id))
        code = EXIT_OK if outcome.verdict in (ACCEPTED, FIXED) else EXIT_FLAGGED
        if export is not None and outcome.trajectory is not None:
            target = Path(export)
            if target.suffix != ".jsonl":
                target = target / f"{video_id}.jsonl"
            target.parent.mkdir(parents=True, exist_ok=True)
            write_trajectory_file(outcome.trajectory, target)
    if fig_dir is not None:
        from .plotting import plot_check, plot_repair

        plot_check(traj, flags.scores, bad.runs(), cfg.check.mad_score_threshold, fig_dir / f"{video_id}_check.png",
                   f"{video_id}: {bad.count} flagged")
        if outcome is not None:
            plot_repair(traj, outcome.trajectory, outcome.repaired_runs, fig_dir / f"{video_id}_repair.png",
                        title=f"{video_id}: {outcome.verdict}")
    return records, code, None


def _window_one(job):
    path, cfg, seed, fig_dir = job
    video_id = Path(path).stem if Path(path).is_file() else Path(path).name
    try:
        traj = _load_trajectory(path, cfg)
        w = cfg.window
        records = window_manifest(video_id, traj, w.L_seconds, w.clip_seconds, w.stride_seconds, seed,
                                  cfg.diversity, w.sampling)
    except (TrajGuardError, OSError, ValueError, KeyError) as exc:
        return _error_result(video_id, exc)
    if fig_dir is not None and records:
        from .plotting import plot_windows

        plot_windows(records, fig_dir / f"{video_id}_windows.png", title=video_id)
    code = EXIT_OK if any(r["kept"] for r in records) else EXIT_FLAGGED
    return records, code, None


def _collect(results, sink: _Sink) -> int:
    code = EXIT_OK
    for records, c, msg in results:
        sink.add(records)
        if msg:
            print(f"error: {msg}", file=sys.stderr)
        code = max(code, c)
    sink.close()
    return code


# -- subcommands -------------------------------------------------------------------

def cmd_check(args, cfg: PipelineConfig, do_repair: bool = False) -> int:
    if len(args.videos) > 1 and (args.stats or args.matches):
        raise ConfigError("--stats/--matches apply to a single video only")
    export = getattr(args, "export", None)
    if export and len(args.videos) > 1 and export.endswith(".jsonl"):
        raise ConfigError("exporting several videos needs a directory, not a .jsonl file")
    fig_dir = _figure_dir(args)
    jobs = [(v, args.stats, args.matches, cfg, fig_dir, args.total_frames, do_repair, export) for v in args.videos]
    return _collect(_run_batch(_check_one, jobs, args.jobs), _Sink(args.out))


def cmd_repair(args, cfg: PipelineConfig) -> int:
    return cmd_check(args, cfg, do_repair=True)


def cmd_window(args, cfg: PipelineConfig) -> int:
    fig_dir = _figure_dir(args)
    jobs = [(p, cfg, cfg.seed, fig_dir) for p in args.trajectories]
    return _collect(_run_batch(_window_one, jobs, args.jobs), _Sink(args.out))


def cmd_metrics(args, cfg: PipelineConfig) -> int:
    gt = _load_trajectory(args.reference, cfg)
    pred = _load_trajectory(args.prediction, cfg)
    m = cfg.metrics
    rec = metrics_record(gt, pred, m.combine, m.per_frame_cosine, m.normalize)
    sink = _Sink(args.out)
    sink.add([rec])
    sink.close()
    fig_dir = _figure_dir(args)
    if fig_dir is not None:
        from .plotting import plot_metrics

        errs = [e.combined for e in pair_pose_errors(gt, pred, m.combine)]
        plot_metrics(gt, pred, errs, fig_dir / "metrics.png")
    return EXIT_OK


def _parse_corruption(text: str) -> tuple[str, int, float]:
    try:
        kind, rest = text.split("@", 1)
        parts = rest.split(":")
        idx = int(parts[0])
        mag = float(parts[1]) if len(parts) > 1 else DEFAULT_MAGNITUDES[kind]
    except (ValueError, KeyError, IndexError):
        raise ConfigError(f"bad corruption {text!r}; expected KIND@TRANSITION[:MAGNITUDE]") from None
    if kind not in CORRUPTION_KINDS:
        raise ConfigError(f"unknown corruption kind {kind!r}")
    return kind, idx, mag


def cmd_simulate(args, cfg: PipelineConfig) -> int:
    s = cfg.simulate
    specs = []
    for k, text in enumerate(args.corrupt or []):
        kind, idx, mag = _parse_corruption(text)
        specs.append(CorruptionSpec(kind, idx, mag, seed=cfg.seed * 1000 + k))
    video = simulate_video(cfg.seed, s.n_steps, s.knot_count, specs, n_points=s.n_points, noise_px=s.noise_px,
                           cfg=cfg.check)
    estimate = video.estimate
    dense = []
    if args.dense is not None:
        estimate, dense = inject_dense(estimate, args.dense, seed=cfg.seed)
    out = Path(args.out or f"sim_{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cameras.txt", "w") as fh:
        write_colmap_cameras({1: video.intrinsics}, fh)
    with open(out / "images.txt", "w") as fh:
        write_colmap_images(estimate.poses, fh, camera_id=1)
    with open(out / STATS_FILE, "w") as fh:
        write_pair_stats(video.stats, fh)
    with open(out / MATCHES_FILE, "w") as fh:
        write_matches(video.matches, fh)
    write_trajectory_file(video.truth, out / "truth.jsonl")
    write_trajectory_file(estimate, out / "estimate.jsonl")
    manifest = {
        "type": "simulation", "seed": cfg.seed, "n_steps": len(video.truth),
        "corruptions": [{"kind": c.kind, "at_transition": c.at_transition, "magnitude": c.magnitude} for c in specs],
        "dense_modified_poses": dense,
    }
    (out / "simulation.json").write_text(dumps_record(manifest) + "\n")
    fig_dir = None if args.no_figures else (Path(args.figures) if args.figures else out)
    if fig_dir is not None:
        from .plotting import plot_repair

        plot_repair(estimate, None, [], fig_dir / "simulation.png", truth=video.truth, title=f"seed {cfg.seed}")
    return EXIT_OK


def cmd_retrieve(args, cfg: PipelineConfig) -> int:
    traj = _load_trajectory(args.trajectory, cfg)
    steps = traj.time_steps
    query_step = int(steps[-1]) if args.query_step is None else args.query_step
    query = traj[traj.index_of(query_step)]
    if args.window:
        k_s, k_e = args.window
    else:
        clip = seconds_to_steps(cfg.window.clip_seconds, traj.pose_rate_hz)
        L = seconds_to_steps(cfg.window.L_seconds, traj.pose_rate_hz)
        t0 = max(int(steps[0]), query_step - clip)
        win = sample_local_window(t0, query_step, L, cfg.seed, cfg.window.sampling)
        k_s, k_e = win.k_s, win.k_e
    segment = traj.with_poses([p for p in traj if k_s <= p.time_step <= k_e])
    r = cfg.retriever
    params = RetrieverParams.init(cfg.seed, d_model=r.d_model, n_heads=r.n_heads, n_blocks=r.n_blocks, M_q=r.M_q,
                                  M_mem=r.M_mem, d_m=r.d_m, D=r.D, positional=r.positional,
                                  zero_outputs=r.zero_outputs)
    bank = synth_memory_features(segment, cfg.seed, r.M_mem, r.d_m)
    X, mask = encode_memory(bank, params)
    Q = build_and_encode_queries(flatten_pose(query), params, query.time_step)
    world, weights = retrieve(Q, X, mask, params, return_weights=True)
    recon = reconstruct_memory(world, params)
    # attention mass per bank entry, averaged over heads and query rows
    per_token = weights[:, 1:, :].mean(axis=(0, 1))
    per_entry = per_token.reshape(len(bank), -1).sum(axis=1)
    sink = _Sink(args.out)
    sink.add([{
        "type": "retrieve", "query_step": query_step, "k_s": int(k_s), "k_e": int(k_e), "n_entries": len(bank),
        "entry_steps": [e.time_step for e in bank.entries],
        "attention_per_entry": [float(v) for v in per_entry],
    }])
    buf = io.StringIO()
    write_numeric_records("world_tokens", world.tokens, buf, query_step=query_step)
    write_numeric_records("reconstructed_memory", recon, buf, query_step=query_step)
    sink.lines.extend(buf.getvalue().splitlines())
    sink.close()
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config file)")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="videos processed concurrently")
    common.add_argument("--out", metavar="PATH", help="output file ('-' or omitted: stdout); simulate: directory")
    common.add_argument("--figures", metavar="DIR", help="figure directory (default: next to --out)")
    common.add_argument("--no-figures", action="store_true", help="do not render figures")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="trajguard", description="Camera trajectory verification toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (("check", "verify transitions of COLMAP video models"),
                           ("repair", "verify, repair and re-validate video models")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("videos", nargs="+", help="directories holding cameras.txt, images.txt, "
                                                 f"{STATS_FILE} and {MATCHES_FILE}")
        p.add_argument("--stats", help="pair statistics file (single video)")
        p.add_argument("--matches", help="matches file (single video)")
        p.add_argument("--total-frames", type=int, help="frame count before registration")
        if name == "repair":
            p.add_argument("--export", metavar="PATH",
                           help="write accepted/fixed trajectories to PATH (.jsonl) or into directory PATH")

    p = sub.add_parser("window", parents=[common], help="clip and memory-window manifest")
    p.add_argument("trajectories", nargs="+", help="trajectory files or model directories")

    p = sub.add_parser("metrics", parents=[common], help="compare two trajectories")
    p.add_argument("reference")
    p.add_argument("prediction")

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic video model")
    p.add_argument("--corrupt", action="append", metavar="KIND@I[:MAG]",
                   help=f"inject a corruption ({', '.join(CORRUPTION_KINDS)}); repeatable")
    p.add_argument("--dense", type=float, metavar="FRACTION", help="teleport poses until FRACTION of "
                                                                   "transitions are touched")

    p = sub.add_parser("retrieve", parents=[common], help="run the memory retriever on a trajectory")
    p.add_argument("trajectory")
    p.add_argument("--query-step", type=int)
    p.add_argument("--window", type=int, nargs=2, metavar=("K_S", "K_E"))
    return parser


COMMANDS = {
    "check": cmd_check,
    "repair": cmd_repair,
    "window": cmd_window,
    "metrics": cmd_metrics,
    "simulate": cmd_simulate,
    "retrieve": cmd_retrieve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config).with_overrides(seed=args.seed)
        if cfg.seed < 0:
            raise ConfigError("--seed must be non-negative")
        return COMMANDS[args.command](args, cfg)
    except (TrajGuardError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
