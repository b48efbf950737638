import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from radalign.geometry import (
    DegenerateTrajectoryError,
    Pose2,
    TimeRangeError,
    Trajectory,
    TrajectoryError,
    Transform2,
    apply_to_pose,
    compose,
    interpolate_pose,
    inverse,
    relative_transform,
    relative_xyt,
    wrap_angle,
)

from conftest import random_transforms

finite = st.floats(-1e3, 1e3, allow_nan=False)
angles = st.floats(-4 * math.pi, 4 * math.pi, allow_nan=False)
transforms = st.builds(Transform2, finite, finite, angles)


def close(a: Transform2, b: Transform2, tol=1e-12):
    d = a.as_array() - b.as_array()
    d[2] = wrap_angle(d[2])
    return np.all(np.abs(d) <= tol)


def test_wrap_angle_range():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    a = wrap_angle(np.linspace(-20, 20, 1001))
    assert np.all(a > -math.pi) and np.all(a <= math.pi)


def test_compose_identity():
    I = Transform2.identity()
    assert compose(I, I) == I


def test_compose_quarter_turn():
    out = compose(Transform2(1, 0, math.pi / 2), Transform2(1, 0, 0))
    assert close(out, Transform2(1, 1, math.pi / 2))


def test_relative_transform_examples():
    a = Pose2(0, 0, 0)
    assert close(relative_transform(a, a), Transform2.identity())
    assert close(relative_transform(a, Pose2(3, 4, 0)), Transform2(3, 4, 0))
    # heading pi/2: world +y is ego +x
    assert close(relative_transform(Pose2(0, 0, math.pi / 2), Pose2(0, 1, math.pi / 2)), Transform2(1, 0, 0))


def test_group_properties_bulk():
    rng = np.random.default_rng(0)
    T = random_transforms(rng, 3000)
    for k in range(1000):
        a, b, c = (Transform2.from_array(T[3 * k + i]) for i in range(3))
        assert close(compose(compose(a, b), c), compose(a, compose(b, c)), 1e-12 * 50)
        assert close(compose(a, inverse(a)), Transform2.identity(), 1e-12 * 20)


@given(transforms, transforms, transforms)
def test_compose_associative(a, b, c):
    assert close(compose(compose(a, b), c), compose(a, compose(b, c)), 1e-9)


@given(transforms)
def test_inverse_cancels(t):
    assert close(compose(t, inverse(t)), Transform2.identity(), 1e-9)
    assert close(compose(inverse(t), t), Transform2.identity(), 1e-9)


@given(transforms, transforms)
def test_relative_roundtrip(a, b):
    pa = Pose2(a.dx, a.dy, a.dtheta)
    pb = Pose2(b.dx, b.dy, b.dtheta)
    back = apply_to_pose(pa, relative_transform(pa, pb))
    assert close(Transform2(back.x, back.y, back.theta), Transform2(pb.x, pb.y, pb.theta), 1e-9)


def test_relative_xyt_matches_scalar():
    rng = np.random.default_rng(1)
    A, B = random_transforms(rng, 50), random_transforms(rng, 50)
    v = relative_xyt(A, B)
    for k in range(50):
        r = relative_transform(Pose2(*A[k]), Pose2(*B[k]))
        assert np.allclose(v[k], r.as_array(), atol=1e-12)


def test_transform_apply_matches_compose():
    t = Transform2(1.0, -2.0, 0.3)
    p = np.array([[0.5, 0.25]])
    moved = t.apply(p)
    via = compose(t, Transform2(0.5, 0.25, 0.0))
    assert np.allclose(moved[0], [via.dx, via.dy])


def test_theta_normalised_on_construction():
    assert Pose2(0, 0, 3 * math.pi).theta == pytest.approx(math.pi)
    assert Transform2(0, 0, -3 * math.pi).dtheta == pytest.approx(math.pi)


# --- trajectories --------------------------------------------------------


def test_trajectory_rejects_non_increasing_time():
    with pytest.raises(TrajectoryError):
        Trajectory("d", [0.0, 1.0, 1.0], np.zeros((3, 3)))


def test_interpolate_at_sample_exact():
    tr = Trajectory("d", [0, 1, 2, 3], [[0, 0, 0], [1, 0.2, 0.1], [2, 0.1, 0.2], [3, 0, 0.1]])
    for i in range(4):
        p = interpolate_pose(tr, float(i))
        assert (p.x, p.y, p.theta) == tuple(tr.xyt[i])


def test_interpolate_straight_line_midpoint():
    tr = Trajectory("d", [0.0, 2.0], [[0, 0, 0.3], [10, 4, 0.3]])
    p = interpolate_pose(tr, 1.0)
    assert p.x == pytest.approx(5.0, abs=1e-12)
    assert p.y == pytest.approx(2.0, abs=1e-12)
    assert p.theta == pytest.approx(0.3, abs=1e-12)


def test_interpolate_circle():
    # oracle: analytic circle of radius 50 m, samples 5 m apart.  The interior
    # interval has central tangents at both ends; the outer intervals use
    # one-sided tangents and are only checked loosely.
    R, w = 50.0, 0.1
    t = np.arange(4) * 1.0
    xyt = np.column_stack([R * np.cos(w * t), R * np.sin(w * t), w * t + math.pi / 2])
    tr = Trajectory("c", t, xyt)
    for tq in np.linspace(0.02, 2.98, 40):
        p = interpolate_pose(tr, tq)
        assert math.hypot(p.x - R * math.cos(w * tq), p.y - R * math.sin(w * tq)) < 0.05
    for tq in np.linspace(1.01, 1.99, 30):
        p = interpolate_pose(tr, tq)
        assert math.hypot(p.x - R * math.cos(w * tq), p.y - R * math.sin(w * tq)) < 0.01


def test_interpolate_sigma_linear():
    tr = Trajectory("d", [0.0, 1.0], [[0, 0, 0], [1, 0, 0]], [[1.0, 0.1], [3.0, 0.3]])
    p = interpolate_pose(tr, 0.25)
    assert p.sigma_xy == pytest.approx(1.5)
    assert p.sigma_theta == pytest.approx(0.15)


def test_interpolate_errors():
    tr = Trajectory("d", [0.0, 1.0], [[0, 0, 0], [1, 0, 0]])
    with pytest.raises(TimeRangeError):
        interpolate_pose(tr, 1.5)
    with pytest.raises(DegenerateTrajectoryError):
        interpolate_pose(Trajectory("d", [0.0], [[0, 0, 0]]), 0.0)


@given(
    st.floats(-1.0, 1.0),
    st.floats(0.01, 0.5),
    st.integers(3, 8),
)
def test_heading_interpolation_crosses_wrap(start_offset, rate, n):
    # headings straddle +-pi; the interpolated heading must stay continuous
    t = np.arange(n, dtype=float)
    heading = math.pi + start_offset * rate * n / 2 + rate * (t - n / 2)
    tr = Trajectory("w", t, np.column_stack([t, np.zeros(n), heading]))
    ts = np.linspace(0, n - 1, 20 * n)
    th = np.unwrap([interpolate_pose(tr, float(x)).theta for x in ts])
    raw = np.array([interpolate_pose(tr, float(x)).theta for x in ts])
    jumps = np.abs(wrap_angle(np.diff(raw)))
    assert np.all(jumps <= rate + 1e-9)
    assert np.all(np.abs(np.diff(th)) <= rate + 1e-9)
