import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import angle_between_matrices, quat_to_matrix_scipy, rot_matrix
from trajguard.pose import (
    CameraPose,
    Intrinsics,
    Rotation,
    Trajectory,
    camera_center_and_forward,
    canonicalize_quaternion,
    compose,
    flatten_pose,
    geodesic_angle,
    relative_pose,
    slerp,
    trajectory_from_arrays,
    unflatten_pose,
)

quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 1e-3)
rotations = quats.map(Rotation)
vec3 = arrays(np.float64, 3, elements=st.floats(-100, 100))
fractions = st.floats(0.0, 1.0)


def rz(deg):
    return Rotation.from_axis_angle([0, 0, 1], math.radians(deg))


def same_rotation(a, b, tol=1e-9):
    return min(np.linalg.norm(a.q - b.q), np.linalg.norm(a.q + b.q)) < tol


def test_quaternion_is_unit_and_canonical():
    r = Rotation(np.array([-2.0, 0.0, 0.0, 0.0]))
    assert np.array_equal(r.q, [1.0, 0.0, 0.0, 0.0])
    r = Rotation(np.array([0.0, -1.0, 1.0, 0.0]))
    assert r.q[1] > 0 and abs(np.linalg.norm(r.q) - 1) < 1e-12


def test_q_and_minus_q_compare_equal():
    q = np.array([0.3, -0.5, 0.1, 0.8])
    assert Rotation(q) == Rotation(-q)
    assert hash(Rotation(q)) == hash(Rotation(-q))


def test_zero_quaternion_rejected():
    with pytest.raises(ValueError):
        Rotation(np.zeros(4))


@given(quats)
def test_canonicalize_idempotent_and_preserves_action(q):
    c = canonicalize_quaternion(q)
    assert np.array_equal(canonicalize_quaternion(c), c)
    v = np.array([0.3, -1.2, 2.0])
    m = Rotation(q).as_matrix()
    assert np.allclose(m @ v, quat_to_matrix_scipy(q / np.linalg.norm(q)) @ v, atol=1e-9)


@given(rotations, rotations)
def test_compositions_stay_unit(a, b):
    for r in (a * b, a.inverse(), slerp(a, b, 0.3)):
        assert abs(np.linalg.norm(r.q) - 1.0) < 1e-9


def test_matrix_round_trip_near_half_turn():
    for axis in ([1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0]):
        m = rot_matrix(axis, 179.999)
        assert np.allclose(Rotation.from_matrix(m).as_matrix(), m, atol=1e-12)


def test_geodesic_examples():
    ident = Rotation.identity()
    assert geodesic_angle(ident, ident) == 0.0
    assert geodesic_angle(ident, rz(90)) == pytest.approx(math.pi / 2, abs=1e-12)
    a = Rotation.from_axis_angle([1, 0, 0], math.radians(30))
    b = Rotation.from_axis_angle([1, 0, 0], math.radians(100))
    assert geodesic_angle(a, b) == pytest.approx(math.radians(70), abs=1e-12)


@given(rotations, rotations)
def test_geodesic_matches_independent_oracle(a, b):
    ref = angle_between_matrices(a.as_matrix(), b.as_matrix())
    assert geodesic_angle(a, b) == pytest.approx(ref, abs=1e-7)
    assert geodesic_angle(a, b) == pytest.approx(geodesic_angle(b, a), abs=1e-12)
    assert 0.0 <= geodesic_angle(a, b) <= math.pi + 1e-12


def test_geodesic_small_angles_are_accurate():
    a = Rotation.identity()
    for ang in (1e-12, 1e-9, 1e-6):
        assert geodesic_angle(a, rz(math.degrees(ang))) == pytest.approx(ang, rel=1e-6)


def test_slerp_examples():
    ident = Rotation.identity()
    assert same_rotation(slerp(ident, ident, 0.5), ident)
    assert same_rotation(slerp(ident, rz(90), 0.5), rz(45))
    ry = lambda d: Rotation.from_axis_angle([0, 1, 0], math.radians(d))  # noqa: E731
    assert same_rotation(slerp(ry(20), ry(80), 0.25), ry(35))


def test_slerp_endpoints_exact_and_range_checked():
    a, b = rz(10), Rotation.from_axis_angle([1, 2, 3], 2.0)
    assert slerp(a, b, 0.0) is a
    assert slerp(a, b, 1.0) is b
    with pytest.raises(ValueError):
        slerp(a, b, 1.5)


def test_slerp_takes_short_arc():
    a = rz(10)
    b = Rotation(-rz(350).q)  # same rotation as -10 deg, stored with opposite sign
    mid = slerp(a, b, 0.5)
    assert geodesic_angle(mid, Rotation.identity()) < 1e-12


def test_slerp_degenerate_linear_fallback():
    a = rz(30)
    b = a * Rotation.from_axis_angle([0, 0, 1], 1e-9)
    mid = slerp(a, b, 0.5)
    assert geodesic_angle(a, mid) == pytest.approx(0.5e-9, rel=1e-3)


@given(rotations, rotations, fractions)
def test_slerp_symmetry(a, b, s):
    assert same_rotation(slerp(a, b, s), slerp(b, a, 1.0 - s), tol=1e-9)


@given(rotations, rotations, fractions)
def test_slerp_constant_angular_velocity(a, b, s):
    assert geodesic_angle(a, slerp(a, b, s)) == pytest.approx(s * geodesic_angle(a, b), abs=1e-7)


def test_slerp_symmetry_sweep(rng):
    for _ in range(1000):
        a, b = Rotation(rng.normal(size=4)), Rotation(rng.normal(size=4))
        s = rng.random()
        assert same_rotation(slerp(a, b, s), slerp(b, a, 1.0 - s))


def random_pose(rng, step=0):
    return CameraPose(Rotation(rng.normal(size=4)), rng.normal(size=3) * 5, step, f"f{step}")


def test_relative_pose_examples():
    p = CameraPose(rz(40), np.array([1.0, 2.0, 3.0]))
    r, t = relative_pose(p, p)
    assert geodesic_angle(r, Rotation.identity()) < 1e-12 and np.allclose(t, 0, atol=1e-12)
    r, t = relative_pose(CameraPose.identity(), CameraPose(Rotation.identity(), np.array([1.0, 0, 0])))
    assert r == Rotation.identity() and np.allclose(t, [1, 0, 0])


def test_relative_pose_round_trip_many(rng):
    for _ in range(10_000):
        a, b = random_pose(rng), random_pose(rng)
        r, t = relative_pose(a, b)
        c = compose(a, r, t)
        assert np.allclose(c.R, b.R, atol=1e-9) and np.allclose(c.translation, b.translation, atol=1e-9)


def test_relative_pose_matches_matrix_definition(rng):
    a, b = random_pose(rng), random_pose(rng)
    r, t = relative_pose(a, b)
    R_rel = b.R @ a.R.T
    assert np.allclose(r.as_matrix(), R_rel, atol=1e-12)
    assert np.allclose(t, b.translation - R_rel @ a.translation, atol=1e-12)


def test_center_and_forward_examples():
    c, f = camera_center_and_forward(CameraPose.identity())
    assert np.allclose(c, 0) and np.allclose(f, [0, 0, 1])
    flip = CameraPose(Rotation.from_axis_angle([0, 1, 0], math.pi), np.zeros(3))
    assert np.allclose(flip.forward, [0, 0, -1], atol=1e-12)
    R = rot_matrix([0, 1, 0], 90)
    p = CameraPose(Rotation.from_matrix(R), np.array([0.0, 0.0, 2.0]))
    assert np.allclose(p.center, -R.T @ [0, 0, 2], atol=1e-12)
    # forward is R^T z, the third row of R
    assert np.allclose(p.forward, R[2], atol=1e-12)
    assert np.allclose(p.forward, [-1, 0, 0], atol=1e-12)
    q = CameraPose(Rotation.from_matrix(rot_matrix([0, 1, 0], -90)), np.zeros(3))
    assert np.allclose(q.forward, [1, 0, 0], atol=1e-12)


@given(rotations, vec3)
def test_from_center_round_trip(r, c):
    p = CameraPose.from_center(r, c)
    assert np.allclose(p.center, c, atol=1e-9)
    assert np.allclose(p.transform(c[None]), 0.0, atol=1e-9)


def test_flatten_examples():
    assert np.array_equal(flatten_pose(CameraPose.identity()), [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0])
    p = CameraPose(Rotation.identity(), np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(flatten_pose(p), [1, 0, 0, 1, 0, 1, 0, 2, 0, 0, 1, 3])


def test_flatten_round_trip(rng):
    p = random_pose(rng)
    v = flatten_pose(p)
    q = unflatten_pose(v)
    assert np.allclose(v.reshape(3, 4)[:, :3], p.R) and np.allclose(v.reshape(3, 4)[:, 3], p.translation)
    assert np.allclose(q.R, p.R, atol=1e-12) and np.allclose(q.translation, p.translation)


def test_pose_invariants():
    with pytest.raises(ValueError):
        CameraPose(Rotation.identity(), np.array([np.nan, 0, 0]))
    with pytest.raises(ValueError):
        CameraPose(Rotation.identity(), np.zeros(3), time_step=-1)
    p = CameraPose.identity()
    with pytest.raises(ValueError):
        p.translation[0] = 1.0


def test_intrinsics_invariants():
    k = Intrinsics(500, 500, 320, 240, 640, 480)
    assert np.allclose(k.K, [[500, 0, 320], [0, 500, 240], [0, 0, 1]])
    for bad in ((0, 500, 320, 240, 640, 480), (500, 500, 700, 240, 640, 480), (500, 500, 320, 0, 640, 480)):
        with pytest.raises(ValueError):
            Intrinsics(*bad)


def test_intrinsics_project_normalize_inverse(rng):
    k = Intrinsics(400, 410, 300, 200, 640, 480)
    pts = np.column_stack([rng.normal(size=(20, 2)), rng.uniform(1, 5, 20)])
    px = k.project(pts)
    assert np.allclose(k.normalize(px), pts[:, :2] / pts[:, 2:], atol=1e-12)


def test_trajectory_invariants_and_slicing():
    poses = [CameraPose.identity(s, f"f{s}") for s in (0, 1, 2, 5)]
    t = Trajectory(poses, 4.0)
    assert len(t) == 4 and t.duration_seconds == pytest.approx(5 / 4)
    assert isinstance(t[1:3], Trajectory) and len(t[1:3]) == 2
    assert t.index_of(5) == 3
    with pytest.raises(KeyError):
        t.index_of(3)
    with pytest.raises(ValueError):
        Trajectory([poses[1], poses[0]])
    with pytest.raises(ValueError):
        Trajectory(poses, 0.0)


def test_trajectory_world_similarity(rng):
    rots = [Rotation(rng.normal(size=4)) for _ in range(5)]
    t = trajectory_from_arrays(rots, rng.normal(size=(5, 3)))
    G = Rotation.from_axis_angle([1, 1, 0], 0.4)
    moved = t.transformed(G, [1, 2, 3], 2.0)
    # relative geometry between cameras is unchanged up to scale
    for a, b, a2, b2 in zip(t, t.poses[1:], moved, moved.poses[1:]):
        assert geodesic_angle(a.rotation, b.rotation) == pytest.approx(geodesic_angle(a2.rotation, b2.rotation))
        assert np.linalg.norm(b2.center - a2.center) == pytest.approx(2 * np.linalg.norm(b.center - a.center))
