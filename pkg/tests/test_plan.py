import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from plantransport.geometry import (
    ChartSpace,
    DomainError,
    Stratum,
    flat_plane,
    round_sphere,
    sphere_chart_point,
)
from plantransport.plan import (
    build_geodesic_plan,
    compression_constant,
    geodesic,
    latitude_circle,
    lipschitz_constant,
    make_plan,
    piecewise_gradient,
    plan_speed,
    reversed_plan,
    segment_bundle,
    waypoint_plan,
)


def great_circle_angle(space, curve):
    e = space.embed(curve)
    return float(np.arccos(np.clip(e[0] @ e[-1], -1, 1)))


def test_constant_and_straight_speeds(flat):
    const = make_plan(flat, np.zeros((2, 11, 2)))
    assert np.all(plan_speed(const, 5) == 0) and lipschitz_constant(const) == 0
    seg = segment_bundle(flat_plane(((-1, 4), (-1, 5))), [[0, 0]], [[3, 4]], 50)
    np.testing.assert_allclose(seg.speeds, 5.0, atol=1e-12)
    two = segment_bundle(flat, [[0, 0], [0, 0]], [[1, 0], [0, 2]], 20)
    assert two.lip_constant == pytest.approx(2.0)


def test_latitude_speed(sphere):
    plan = latitude_circle(sphere, np.pi / 3, 2000)
    assert plan.lip_constant == pytest.approx(2 * np.pi * np.sin(np.pi / 3), abs=1e-3)


def test_weights_normalised(flat):
    plan = segment_bundle(flat, [[0, 0], [0.1, 0]], [[0.2, 0], [0.3, 0]], 10, weights=[1, 3])
    np.testing.assert_allclose(plan.weights, [0.25, 0.75])
    with pytest.raises(ValueError):
        segment_bundle(flat, [[0, 0]], [[1, 1]], 10, weights=[0.0])
    with pytest.raises(ValueError):
        make_plan(flat, np.zeros((0, 5, 2)))


def test_plan_leaving_domain():
    sphere = round_sphere()
    with pytest.raises(DomainError):
        latitude_circle(sphere, 3.5, 20)


def tiny_space(points, masses):
    pts = np.asarray(points, float)
    return ChartSpace(2, lambda x: np.ones(np.asarray(x).shape[:-1], bool),
                      flat_plane().metric, flat_plane().christoffel, flat_plane().density,
                      [Stratum(2, lambda x: np.ones(np.asarray(x).shape[:-1], bool))],
                      pts, np.asarray(masses, float))


def test_compression_pushforward_arithmetic():
    space = tiny_space([[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]], [0.25] * 4)
    curves = np.stack([np.tile([0.25, 0.25], (5, 1)), np.tile([0.75, 0.75], (5, 1))])
    plan = make_plan(space, curves)
    bins = [np.array([0, 0.5, 1.0])] * 2
    assert compression_constant(plan, bins) == pytest.approx(2.0)
    single = tiny_space([[0.5, 0.5]], [1.0])
    assert compression_constant(make_plan(single, np.tile([0.5, 0.5], (1, 5, 1))),
                                [np.array([0, 1.0])] * 2) == pytest.approx(1.0)


def test_compression_of_spread_segments():
    space = flat_plane(((0, 1), (0, 1)), shape=(10, 10))
    centers = (np.stack(np.meshgrid(np.arange(10), np.arange(10)), -1).reshape(-1, 2) + 0.5) / 10
    plan = segment_bundle(space, centers - [0.03, 0.0], centers + [0.03, 0.0], 20)
    c = compression_constant(plan)
    assert 0.5 <= c <= 2.0


def test_compression_escape_detected():
    space = flat_plane(((0, 1), (0, 1)), shape=(4, 4))
    plan = segment_bundle(space, [[0.5, 0.5]], [[1.5, 0.5]], 10)
    with pytest.raises(ValueError):
        compression_constant(plan)


def test_flat_geodesics_are_lines(flat):
    plan = build_geodesic_plan(flat, ([-0.8, -0.8], [-0.2, 0.0]), ([0.2, 0.2], [0.8, 0.8]), 5, seed=3, n_steps=64)
    t = plan.grid.nodes[None, :, None]
    lines = (1 - t) * plan.curves[:, :1] + t * plan.curves[:, -1:]
    np.testing.assert_allclose(plan.curves, lines, atol=1e-10)
    acc = np.diff(plan.curves, 2, axis=1) / plan.grid.dt ** 2
    assert np.max(np.abs(acc)) < 1e-6


def test_geodesic_seed_determinism(flat):
    box = ([-0.5, -0.5], [0.0, 0.0])
    a = build_geodesic_plan(flat, box, box, 4, seed=11, n_steps=16)
    b = build_geodesic_plan(flat, box, box, 4, seed=11, n_steps=16)
    np.testing.assert_array_equal(a.curves, b.curves)


def test_degenerate_geodesic(flat):
    p = ([0.1, 0.2], [0.1, 0.2])
    plan = build_geodesic_plan(flat, p, p, 1, n_steps=16)
    assert plan.lip_constant == 0.0


def test_pole_to_equator_is_quarter_circle():
    sphere = round_sphere(axis=(1.0, 0.0, 0.0))
    p = sphere_chart_point(sphere, [0.0, 0.0, 1.0])
    q = sphere_chart_point(sphere, [0.0, 1.0, 0.0], phi_ref=p[1])
    xs, vs = geodesic(sphere, p, q, 400)
    plan = make_plan(sphere, xs[None])
    np.testing.assert_allclose(plan.speeds, np.pi / 2, atol=1e-4)
    length = np.sum(np.linalg.norm(np.diff(sphere.embed(xs), axis=0), axis=1))
    assert length == pytest.approx(np.pi / 2, abs=1e-5)
    # the curve stays in the plane of the great circle through p and q
    normal = np.cross([0, 0, 1.0], [0, 1.0, 0])
    assert np.max(np.abs(sphere.embed(xs) @ normal)) < 1e-8


def test_sphere_geodesic_matches_great_circle(sphere):
    plan = build_geodesic_plan(sphere, ([1.3, 0.1], [1.5, 0.3]), ([1.6, 1.0], [1.8, 1.3]), 3, seed=0, n_steps=200)
    for k in range(3):
        e = sphere.embed(plan.curves[k])
        angle = great_circle_angle(sphere, plan.curves[k])
        np.testing.assert_allclose(plan.speeds[k], angle, atol=1e-6)
        t = plan.grid.nodes[:, None]
        slerp = (np.sin((1 - t) * angle) * e[0] + np.sin(t * angle) * e[-1]) / np.sin(angle)
        np.testing.assert_allclose(e, slerp, atol=1e-8)


def test_waypoint_plan_breaks():
    s = np.sqrt(0.5)
    sphere = round_sphere(band=(np.pi / 6, 5 * np.pi / 6), axis=(s, -s, 0.0))
    pts = []
    for p in ([s, s, 0], [0, 1, 0], [0, 0, 1], [1, 0, 0], [s, s, 0]):
        pts.append(sphere_chart_point(sphere, p, pts[-1][1] if pts else None))
    plan = waypoint_plan(sphere, np.array(pts), 400, leg_steps=[50, 100, 100, 50])
    assert plan.breaks == (50, 150, 250)
    assert plan.break_velocities.shape == (1, 3, 2, 2)
    # three quarter circles run at constant speed over [0, 1]
    speeds = plan.space.norm(plan.curves[:, list(plan.breaks)][:, :, None], plan.break_velocities)
    np.testing.assert_allclose(speeds, 1.5 * np.pi, rtol=1e-3)
    smooth = np.setdiff1d(np.arange(plan.grid.n_nodes), plan.breaks)
    np.testing.assert_allclose(plan.speeds[:, smooth], 1.5 * np.pi, rtol=1e-3)
    np.testing.assert_allclose(plan.curves[0, 0], plan.curves[0, -1], atol=1e-12)


def test_piecewise_gradient_exact_on_broken_lines():
    t = np.linspace(0, 1, 21)
    y = np.where(t <= 0.5, t, 1.5 - 2 * t)[None, :, None] * np.ones((1, 1, 2))
    d, lim = piecewise_gradient(y, t[1] - t[0], breaks=(10,), return_limits=True)
    np.testing.assert_allclose(lim[0, 0, :, 0], [1.0, -2.0])
    np.testing.assert_allclose(d[0, :10, 0], 1.0)
    np.testing.assert_allclose(d[0, 11:, 0], -2.0)
    assert d[0, 10, 0] == pytest.approx(-0.5)


def test_reversed_and_permuted(flat_segments):
    back = reversed_plan(flat_segments)
    np.testing.assert_array_equal(back.curves, flat_segments.curves[:, ::-1])
    np.testing.assert_allclose(back.velocities, -flat_segments.velocities[:, ::-1])
    order = np.array([3, 1, 5, 0, 2, 4])
    perm = flat_segments.permuted(order)
    np.testing.assert_array_equal(perm.curves, flat_segments.curves[order])
    np.testing.assert_allclose(perm.weights, flat_segments.weights[order])


@given(st.integers(1, 6), st.integers(0, 1000))
def test_weights_sum_to_one(k, seed):
    rng = np.random.default_rng(seed)
    flat = flat_plane()
    plan = segment_bundle(flat, rng.uniform(-1, 1, (k, 2)), rng.uniform(-1, 1, (k, 2)), 12,
                          weights=rng.uniform(0.1, 5, k))
    assert plan.weights.sum() == pytest.approx(1.0, abs=1e-15)
    assert plan.lip_constant == pytest.approx(np.max(plan.speeds))
