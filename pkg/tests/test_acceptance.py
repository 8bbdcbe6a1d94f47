"""Headline acceptance criteria, one test each, timed against their limits.

Run alone with ``pytest -m acceptance -s`` to see the PASS/FAIL lines inline;
they are also collected in the terminal summary.
"""

import io
import math
import time

import numpy as np
import pytest

from oracles import align_scale_sign, auc_bruteforce, enumerate_windows, essential_oracle, point_line_symmetric, window_ok
from trajguard.errors import ParseError
from trajguard.metrics import auc_at, metrics_record
from trajguard.model_io import (
    MatchSet,
    PairStats,
    parse_colmap_cameras,
    parse_colmap_images,
    read_matches,
    read_pair_stats,
    read_trajectory,
    trajectory_to_string,
    write_matches,
    write_pair_stats,
)
from trajguard.pose import CameraPose, Rotation, Trajectory
from trajguard.repair import DISCARDED, FIXED, repair_and_revalidate
from trajguard.retriever import (
    RetrieverParams,
    build_and_encode_queries,
    encode_memory,
    inject_layers,
    random_bank,
    retrieve,
)
from trajguard.synth import (
    CORRUPTION_KINDS,
    DEFAULT_INTRINSICS,
    DEFAULT_MAGNITUDES,
    CorruptionSpec,
    inject_dense,
    median_step,
    simulate_video,
    synth_two_view,
)
from trajguard.verify import estimate_essential, fuse_bad_index, run_checks, symmetric_epipolar_error
from trajguard.window import extract_clips, feasible_ks_range, sample_local_windows

pytestmark = pytest.mark.acceptance
K = DEFAULT_INTRINSICS


def corrupted_video(seed, kind):
    """One interior corruption per video, placed away from the two ends."""
    n = 61
    at = int(np.random.default_rng(10_000 + seed).integers(2, n - 4))
    spec = CorruptionSpec(kind, at, DEFAULT_MAGNITUDES[kind], seed=seed)
    return simulate_video(seed, corruptions=[spec]), spec


def test_window_rule_conformance(report):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    bad = 0
    total = 0
    for _ in range(100):
        L = int(rng.integers(1, 30))
        t0 = int(rng.integers(0, 60))
        t1 = t0 + int(rng.integers(1, 30))
        mode = ("hierarchical", "pairs")[total % 2]
        w = sample_local_windows(t0, t1, L, 1000, rng, mode)
        bad += sum(not window_ok(t0, t1, L, int(a), int(b)) for a, b in w)
        total += len(w)
    mismatched = 0
    for t1 in range(1, 41):
        for t0 in range(t1):
            for L in range(1, 41):
                ks = sorted({k for k, _ in enumerate_windows(t0, t1, L)})
                mismatched += (ks[0], ks[-1]) != feasible_ks_range(t0, t1, L)
    elapsed = time.perf_counter() - start
    report("window rule conformance", total == 100_000 and bad == 0 and mismatched == 0 and elapsed < 10,
           f"{total} windows, {bad} violations, {mismatched} range mismatches, {elapsed:.1f}s")


def test_epipolar_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_e, worst_err = 0.0, 0.0
    for k in range(100):
        a = CameraPose.from_center(Rotation.from_axis_angle(rng.normal(size=3), rng.uniform(0, 0.2)), rng.normal(size=3))
        b = CameraPose.from_center(Rotation.from_axis_angle(rng.normal(size=3), rng.uniform(0, 0.2)),
                                   a.center + rng.normal(size=3))
        m, E_true = synth_two_view(a, b, K, n_points=60, noise_px=0.0, seed=k)
        E = estimate_essential(m, K, K)
        ref = essential_oracle(a.R, a.translation, b.R, b.translation)
        worst_e = max(worst_e, align_scale_sign(E, E_true), align_scale_sign(E_true, ref))
        xa, xb = K.normalize(m.pixels_a), K.normalize(m.pixels_b)
        errs = symmetric_epipolar_error(E_true, xa, xb)
        worst_err = max(worst_err, float(errs.max()))
        # spot check against the point-to-line oracle on one correspondence
        assert errs[0] == pytest.approx(point_line_symmetric(E_true, xa[0], xb[0]), abs=1e-12)
    elapsed = time.perf_counter() - start
    report("epipolar oracle", worst_e < 1e-6 and worst_err < 1e-9 and elapsed < 5,
           f"max E error {worst_e:.1e}, max epipolar error {worst_err:.1e}, {elapsed:.1f}s")


def test_detection_sweep(report):
    start = time.perf_counter()
    hits, trials = 0, 0
    clean_flags, clean_total = 0, 0
    for seed in range(200):
        for kind in CORRUPTION_KINDS:
            v, spec = corrupted_video(seed, kind)
            bits = fuse_bad_index(run_checks(v.estimate, v.stats, v.matches, K)).bits
            hits += bool(bits[spec.at_transition])
            trials += 1
            # transitions whose kinematics window touches a modified pose are not clean
            support = set()
            for k in spec.modified_poses():
                support |= {k - 2, k - 1, k, k + 1}
            clean = [j for j in range(len(bits)) if j not in support]
            clean_flags += int(bits[clean].sum())
            clean_total += len(clean)
    elapsed = time.perf_counter() - start
    recall = hits / trials
    fp = clean_flags / clean_total
    report("detection sweep", recall >= 0.95 and fp <= 0.05 and elapsed < 60,
           f"recall {recall:.3f}, false positives {fp:.4f}, {elapsed:.1f}s")


def test_repair_closed_loop(report):
    fixed, trials, rmse_ok = 0, 0, 0
    per_kind = {}
    for seed in range(100):
        for kind in CORRUPTION_KINDS:
            v, _ = corrupted_video(seed, kind)
            flags = run_checks(v.estimate, v.stats, v.matches, K)
            out = repair_and_revalidate(v.estimate, flags, v.stats, v.matches, K)
            trials += 1
            if out.verdict == FIXED:
                fixed += 1
                per_kind[kind] = per_kind.get(kind, 0) + 1
                err = out.trajectory.centers() - v.truth.centers()
                rmse = math.sqrt(float(np.mean(np.sum(err ** 2, axis=1))))
                rmse_ok += rmse < 0.05 * median_step(v.truth)
    dense_ok = 0
    for seed in range(100):
        v = simulate_video(seed)
        est, _ = inject_dense(v.truth, 0.4, seed=seed)
        out = repair_and_revalidate(est, run_checks(est, v.stats, v.matches, K), v.stats, v.matches, K)
        dense_ok += out.verdict == DISCARDED and out.reason == "dense_bad_index"
    counts = ", ".join(f"{k} {per_kind.get(k, 0)}/100" for k in CORRUPTION_KINDS)
    report("repair closed loop", fixed == trials and rmse_ok == fixed and dense_ok == 100,
           f"fixed {counts}; rmse within bound {rmse_ok}/{fixed}; dense discarded {dense_ok}/100")


def test_retriever_invariants(report):
    start = time.perf_counter()
    dims = dict(d_model=64, M_q=8, M_mem=8)
    live = RetrieverParams.init(7, zero_outputs=False, **dims)
    ident = RetrieverParams.init(7, **dims)
    nopos = RetrieverParams.init(7, zero_outputs=False, positional=False, **dims)
    rng = np.random.default_rng(2)
    worst = {"rows": 0.0, "mask": 0.0, "perm": 0.0}
    identity_exact = True
    for _ in range(50):
        bank = random_bank(rng, 4, live, 0.2)
        Q = build_and_encode_queries(rng.normal(size=live.d_p), live, int(rng.integers(0, 100)))
        X, mask = encode_memory(bank, live)
        w, att = retrieve(Q, X, mask, live, return_weights=True)
        worst["rows"] = max(worst["rows"], float(np.abs(att.sum(axis=-1) - 1).max()))
        i = int(rng.integers(4))
        rest = bank.without(i)
        if rest.mask.any():
            a = retrieve(Q, *encode_memory(bank.masked(i), live), live).tokens
            b = retrieve(Q, *encode_memory(rest, live), live).tokens
            worst["mask"] = max(worst["mask"], float(np.abs(a - b).max()))
        Qn = build_and_encode_queries(rng.normal(size=nopos.d_p), nopos)
        order = rng.permutation(4)
        a = retrieve(Qn, *encode_memory(bank, nopos), nopos).tokens
        b = retrieve(Qn, *encode_memory(bank.reordered(order), nopos), nopos).tokens
        worst["perm"] = max(worst["perm"], float(np.abs(a - b).max()))
        Qi = build_and_encode_queries(rng.normal(size=ident.d_p), ident)
        Xi, mi = encode_memory(bank, ident)
        Z = rng.normal(size=(5, ident.D))
        wi = retrieve(Qi, Xi, mi, ident)
        identity_exact &= np.array_equal(wi.tokens, Qi[1:]) and np.array_equal(inject_layers(Z, wi, ident), Z)
    runs = []
    for _ in range(2):
        p = RetrieverParams.init(11, zero_outputs=False, **dims)
        bank = random_bank(np.random.default_rng(5), 4, p, 0.2)
        Q = build_and_encode_queries(np.random.default_rng(6).normal(size=p.d_p), p, 3)
        runs.append(inject_layers(np.ones((4, p.D)), retrieve(Q, *encode_memory(bank, p), p), p))
    deterministic = np.array_equal(runs[0], runs[1])
    elapsed = time.perf_counter() - start
    ok = (worst["rows"] < 1e-6 and worst["mask"] < 1e-6 and worst["perm"] < 1e-6 and identity_exact
          and deterministic and elapsed < 10)
    report("retriever invariants", ok,
           f"rows {worst['rows']:.1e}, mask {worst['mask']:.1e}, perm {worst['perm']:.1e}, "
           f"identity {identity_exact}, deterministic {deterministic}, {elapsed:.1f}s")


def test_metric_sanity(report):
    rng = np.random.default_rng(3)
    self_exact = True
    worst = 0.0
    for seed in range(20):
        gt = simulate_video(seed).truth
        rec = metrics_record(gt, gt)
        self_exact &= rec["auc30"] == 1.0 and rec["auc15"] == 1.0 and rec["cosine"] == 1.0
        pred = simulate_video(seed + 100).truth
        G = Rotation(rng.normal(size=4))
        shift = rng.normal(size=3) * 10
        moved = metrics_record(gt.transformed(G, shift, 1.0), pred.transformed(G, shift, 1.0))
        base = metrics_record(gt, pred)
        worst = max(worst, *(abs(base[k] - moved[k]) for k in ("auc30", "auc15", "cosine")))
    errors = [5.0, 10.0, 45.0]
    example = auc_at(errors, 30) == 0.5 and auc_at(errors, 30) == pytest.approx(auc_bruteforce(errors, 30), abs=1e-15)
    report("metric sanity", self_exact and example and worst < 1e-9,
           f"self exact {self_exact}, worked example {example}, rigid drift {worst:.1e}")


def test_clip_arithmetic(report):
    traj = Trajectory([CameraPose.identity(k, f"f{k}") for k in range(61)], 4.0)
    clips = extract_clips(traj, 5.0, 1.0)
    report("clip arithmetic", len(clips) == 11, f"{len(clips)} clips from 15 s at 4 Hz")


def _raises_at(fn, text, line):
    try:
        fn(text)
    except ParseError as e:
        return e.line == line
    return False


def test_parser_round_trips(report):
    rng = np.random.default_rng(4)
    poses = [CameraPose(Rotation(rng.normal(size=4)), rng.normal(size=3) * 10, 3 * k, f"f{k}") for k in range(100)]
    traj = Trajectory(poses, 4.0)
    back = read_trajectory(trajectory_to_string(traj))
    traj_ok = back.pose_rate_hz == 4.0 and all(
        a.time_step == b.time_step and a.frame_name == b.frame_name
        and np.allclose(a.rotation.q, b.rotation.q, rtol=1e-12, atol=0)
        and np.allclose(a.translation, b.translation, rtol=1e-12, atol=0) for a, b in zip(traj, back))

    sets = [MatchSet(f"f{i}", f"f{i + 1}", rng.uniform(0, 640, (n, 2)), rng.uniform(0, 480, (n, 2)))
            for i, n in enumerate((0, 1, 8, 57))]
    buf = io.StringIO()
    write_matches(sets, buf)
    matches_ok = read_matches(buf.getvalue()) == sets

    stats = [PairStats(f"f{i}", f"f{i + 1}", 100 + i, 50 + i) for i in range(20)]
    buf = io.StringIO()
    write_pair_stats(stats, buf)
    stats_ok = read_pair_stats(buf.getvalue()) == stats

    defects = [
        (parse_colmap_cameras, "# header\n1 PINHOLE 1280 720 1000 1000 640\n", 2),
        (parse_colmap_cameras, "\n\n1 RADIAL 1280 720 900 640 360 0.1 0.01\n", 3),
        (parse_colmap_images, "1 1 0 0 0 0 0 0 1 a.png\n1 2\n", 2),
        (parse_colmap_images, "1 1 0 0 0 0 0 0 1 a.png\n\n2 1 0 0 0 0 0 0 1 a.png\n\n", 3),
        (parse_colmap_images, "# c\n1 1 0 q 0 0 0 0 1 a.png\n\n", 2),
        (read_trajectory, '{"pose_rate_hz": 4}\n{"time_step": 0, "frame_name": "a", "q": [1, 0], "t": [0, 0, 0]}\n', 2),
        (read_pair_stats, '\n{"image_a": "a", "image_b": "b", "num_matches": 1}\n', 2),
        (read_matches, '{"image_a": "a", "image_b": "b", "correspondences": [[1, 2]]}\n', 1),
    ]
    positioned = sum(_raises_at(fn, text, line) for fn, text, line in defects)
    report("parser round trips", traj_ok and matches_ok and stats_ok and positioned == len(defects),
           f"trajectory {traj_ok}, matches {matches_ok}, pair stats {stats_ok}, "
           f"positioned errors {positioned}/{len(defects)}")
