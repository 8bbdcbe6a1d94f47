import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import align_scale_sign, essential_oracle
from trajguard.errors import DegenerateGeometryError, ValidationError
from trajguard.model_io import trajectory_to_string
from trajguard.pose import geodesic_angle
from trajguard.synth import (
    CORRUPTION_KINDS,
    DEFAULT_INTRINSICS,
    CorruptionSpec,
    generate_smooth_trajectory,
    inject,
    inject_dense,
    median_step,
    simulate_video,
    synth_two_view,
)
from trajguard.verify import estimate_essential, kinematics_check, symmetric_epipolar_error

K = DEFAULT_INTRINSICS


@given(st.integers(0, 2**31))
@settings(max_examples=30)
def test_generated_trajectories_pass_kinematics(seed):
    bad, _ = kinematics_check(generate_smooth_trajectory(seed))
    assert not bad.any()


def test_generation_is_deterministic():
    a = trajectory_to_string(generate_smooth_trajectory(7))
    b = trajectory_to_string(generate_smooth_trajectory(7))
    assert a == b
    assert a != trajectory_to_string(generate_smooth_trajectory(8))


def test_two_knots_give_a_straight_line():
    t = generate_smooth_trajectory(3, n_steps=20, knot_count=2)
    c = t.centers()
    second = np.linalg.norm(c[2:] - 2 * c[1:-1] + c[:-2], axis=1)
    assert second.max() < 1e-9 * median_step(t) * 1e3


def test_generation_rejects_bad_sizes():
    with pytest.raises(ValidationError):
        generate_smooth_trajectory(0, n_steps=7)
    with pytest.raises(ValidationError):
        generate_smooth_trajectory(0, knot_count=1)


def test_centers_are_c2_between_knots():
    # interior third differences stay bounded relative to the step: no kinks
    t = generate_smooth_trajectory(5, n_steps=61)
    c = t.centers()
    d2 = c[2:] - 2 * c[1:-1] + c[:-2]
    jumps = np.linalg.norm(np.diff(d2, axis=0), axis=1)
    assert jumps.max() < 0.05 * median_step(t)


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
def test_injection_is_local(kind):
    t = generate_smooth_trajectory(21)
    spec = CorruptionSpec(kind, 20, 10.0 if kind != "forward_flip" else 180.0, seed=4)
    out = inject(t, spec)
    mods = set(spec.modified_poses())
    for k, (a, b) in enumerate(zip(t, out)):
        if k in mods:
            assert not (np.array_equal(a.rotation.q, b.rotation.q) and np.array_equal(a.translation, b.translation))
        else:
            assert np.array_equal(a.rotation.q, b.rotation.q) and np.array_equal(a.translation, b.translation)


@given(st.sampled_from(CORRUPTION_KINDS), st.integers(0, 55), st.integers(0, 1000))
@settings(max_examples=40)
def test_injection_locality_property(kind, at, seed):
    t = generate_smooth_trajectory(seed % 17)
    spec = CorruptionSpec(kind, at, 25.0, seed=seed)
    out = inject(t, spec)
    untouched = set(range(len(t))) - set(spec.modified_poses())
    assert all(t[k] is out[k] or t[k] == out[k] for k in untouched)


def test_injection_magnitudes():
    t = generate_smooth_trajectory(30)
    step = median_step(t)
    out = inject(t, CorruptionSpec("center_teleport", 10, 50.0, seed=1))
    assert np.linalg.norm(out[11].center - t[11].center) == pytest.approx(50 * step, rel=1e-12)
    out = inject(t, CorruptionSpec("rotation_jump", 10, 30.0, seed=1))
    assert np.degrees(geodesic_angle(out[11].rotation, t[11].rotation)) == pytest.approx(30.0, abs=1e-9)
    assert np.allclose(out[11].center, t[11].center, atol=1e-12)


def test_teleport_is_flagged_and_flip_reverses_forward():
    t = generate_smooth_trajectory(31)
    bad, _ = kinematics_check(inject(t, CorruptionSpec("center_teleport", 25, 50.0)))
    assert bad[25]
    out = inject(t, CorruptionSpec("forward_flip", 25, 180.0))
    f = out.forwards()
    ang = np.degrees(np.arccos(np.clip(f[25] @ f[26], -1, 1)))
    assert ang > 90


def test_injection_errors():
    t = generate_smooth_trajectory(1, n_steps=10)
    with pytest.raises(IndexError):
        inject(t, CorruptionSpec("center_teleport", 9, 5.0))
    with pytest.raises(IndexError):
        inject(t, CorruptionSpec("jitter_burst", 8, 5.0))
    with pytest.raises(ValidationError):
        CorruptionSpec("melt", 1, 5.0)
    with pytest.raises(ValidationError):
        CorruptionSpec("center_teleport", 1, 0.0)


def test_jitter_burst_touches_three_transitions():
    assert CorruptionSpec("jitter_burst", 5, 1.0).modified_poses() == [6, 7]


def test_inject_dense_reaches_fraction():
    t = generate_smooth_trajectory(2)
    out, chosen = inject_dense(t, 0.4, seed=3)
    touched = np.zeros(len(t) - 1, bool)
    for k in chosen:
        touched[max(k - 1, 0):k + 1] = True
    assert touched.mean() >= 0.4


def test_two_view_noiseless_is_exact():
    t = generate_smooth_trajectory(4)
    m, E = synth_two_view(t[3], t[4], K, 60, 0.0, seed=1)
    assert len(m) == 60
    err = symmetric_epipolar_error(E, K.normalize(m.pixels_a), K.normalize(m.pixels_b))
    assert err.max() < 1e-9
    assert K.contains(m.pixels_a).all() and K.contains(m.pixels_b).all()
    ref = essential_oracle(t[3].R, t[3].translation, t[4].R, t[4].translation)
    assert align_scale_sign(estimate_essential(m, K, K), ref) < 1e-6


def test_two_view_zero_baseline():
    t = generate_smooth_trajectory(4)
    with pytest.raises(DegenerateGeometryError):
        synth_two_view(t[3], t[3])


def test_simulated_video_matches_validate():
    v = simulate_video(6, n_steps=16, noise_px=0.0)
    assert len(v.matches) == len(v.stats) == 15
    for ms, st_ in zip(v.matches, v.stats):
        assert st_.num_inliers == len(ms)
