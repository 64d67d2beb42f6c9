import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from plantransport.geometry import (
    constant_field,
    flat_space,
    orthonormal_coordinate_frame,
    round_sphere,
    sphere_chart_point,
)
from plantransport.plan import build_geodesic_plan, latitude_circle, waypoint_plan
from plantransport.planfields import node_norms
from plantransport.transport import (
    DegenerateFrameError,
    FrameField,
    FrameValidationError,
    ParallelTransport,
    connection_matrix,
    frame_coefficients,
    holonomy_angles,
    parallel_transport,
    transport_certificates,
    transport_oracle,
    validate_good_base,
)

THETA0 = np.pi / 3


def wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


@pytest.fixture(scope="module")
def flat_frame():
    return FrameField([constant_field([1.0, 0.0]), constant_field([0.0, 1.0])], 2.0)


@pytest.fixture(scope="module")
def sphere_frame(sphere):
    return FrameField(orthonormal_coordinate_frame(sphere), 2.0)


@pytest.fixture(scope="module")
def latitude_result(latitude_plan, sphere_frame):
    return parallel_transport(latitude_plan, sphere_frame, np.array([1.0, 0.0]))


@pytest.fixture(scope="module")
def sphere_bundle(sphere):
    return build_geodesic_plan(sphere, ([1.2, 0.0], [1.5, 0.4]), ([1.6, 1.0], [1.9, 1.5]), 6, seed=5, n_steps=1000)


def test_good_base_flat_examples(flat, flat_frame):
    report = validate_good_base(flat, flat_frame)
    assert report.passes
    assert report.margin_offdiag == pytest.approx(1 / 8)
    bad = validate_good_base(flat, FrameField(flat_frame.fields, 0.9))
    assert not bad.passes and "margin_norm_upper" in bad.failing
    assert "margin_norm_upper" in bad.to_dict() and bad.to_dict()["passes"] is False


def test_good_base_sphere_band():
    band = round_sphere(1.0, (np.pi / 4, 3 * np.pi / 4))
    frame = FrameField(orthonormal_coordinate_frame(band), 8.0)
    report = validate_good_base(band, frame)
    assert report.passes
    # both unit coordinate fields have |nabla w|_HS = |cot theta|
    worst = np.max(np.abs(1 / np.tan(band.sample_points[:, 0])))
    assert report.margin_hs == pytest.approx(8.0 - worst, abs=1e-6)
    assert report.margin_norm_upper == pytest.approx(7.0, abs=1e-12)


def test_frame_coefficients_orthonormal(flat, flat_frame):
    x = np.array([[0.1, 0.2], [0.3, -0.5]])
    np.testing.assert_allclose(frame_coefficients(flat, flat_frame, flat_frame.fields[0], x), [[1, 0], [1, 0]])


def test_degenerate_frame(flat):
    twice = FrameField([constant_field([1.0, 0.0]), constant_field([1.0, 0.0])], 2.0)
    with pytest.raises(DegenerateFrameError):
        frame_coefficients(flat, twice, constant_field([0.0, 1.0]), np.zeros((1, 2)))


def random_good_frame(rng, M, k):
    """Constant frame on R^k meeting the norm and near-orthogonality bounds."""
    while True:
        q, _ = np.linalg.qr(rng.standard_normal((k, k)))
        vecs = q.T + rng.uniform(0, 1) / (M * M * k * np.sqrt(k)) * rng.standard_normal((k, k))
        vecs *= (rng.uniform(1 / M, M, k) / np.linalg.norm(vecs, axis=1))[:, None]
        gram = vecs @ vecs.T
        if np.max(np.abs(gram - np.diag(np.diag(gram)))) < 1 / (M * M * k):
            return vecs


@pytest.mark.parametrize("M,k", [(2.0, 2), (3.0, 4), (5.0, 8)])
def test_sandwich_bounds(M, k):
    rng = np.random.default_rng(k)
    space = flat_space(k, per_axis=1)
    violations = 0
    for _ in range(30):
        vecs = random_good_frame(rng, M, k)
        frame = FrameField([constant_field(v) for v in vecs], M)
        assert validate_good_base(space, frame).passes
        w = rng.standard_normal((50, k)) * rng.uniform(0.01, 10, (50, 1))
        h = frame_coefficients(space, frame, w, np.zeros((50, k)))
        np.testing.assert_allclose(h @ vecs, w, atol=1e-9 * np.abs(w).max())
        hh = np.sum(h * h, axis=1)
        ww = np.sum(w * w, axis=1)
        violations += np.sum(ww < hh / (M * M * k)) + np.sum(ww > M * M * k * hh)
    assert violations == 0


def test_connection_flat_is_zero(flat_segments, flat_frame):
    conn = connection_matrix(flat_segments, flat_frame)
    assert np.all(conn.H == 0)


def test_connection_latitude(latitude_plan, sphere_frame):
    conn = connection_matrix(latitude_plan, sphere_frame)
    assert conn.antisymmetry_defect() < 1e-12
    np.testing.assert_allclose(np.abs(conn.H[..., 0, 1]), 2 * np.pi * np.cos(THETA0), atol=1e-4)


def test_connection_respects_derivative_bound(sphere_bundle, sphere_frame):
    conn = connection_matrix(sphere_bundle, sphere_frame)
    expansion = np.einsum("ktij,ktjd->ktid", conn.H, conn.frame_values)
    norms = sphere_bundle.space.norm(sphere_bundle.curves[:, :, None], expansion)
    assert np.max(norms) <= sphere_frame.M * sphere_bundle.lip_constant


def test_flat_transport_is_rigid(flat_segments, flat_frame):
    V0 = np.array([[0.3, -1.2]] * 6)
    res = parallel_transport(flat_segments, flat_frame, V0)
    np.testing.assert_array_equal(res.V.values, np.broadcast_to(V0[:, None], res.V.values.shape))
    assert res.diagnostics["norm_drift"] <= 1e-12
    assert res.diagnostics["oracle_gap"] <= 1e-12
    certs = transport_certificates(res)
    assert max(certs.values()) <= 1e-12


def test_latitude_closed_form(latitude_result):
    # unit theta-direction rotates against the frame at rate 2 pi cos(theta0) = pi
    t = latitude_result.plan.grid.nodes
    coeffs = latitude_result.coefficients[0]
    np.testing.assert_allclose(coeffs[:, 0], np.cos(np.pi * t), atol=2e-6)
    np.testing.assert_allclose(coeffs[:, 1], -np.sin(np.pi * t), atol=2e-6)
    angle = holonomy_angles(latitude_result)[0]
    assert abs(wrap(angle - 2 * np.pi * np.cos(THETA0))) <= 1e-3
    norms = node_norms(latitude_result.V)
    assert np.max(np.abs(norms ** 2 - norms[0] ** 2)) <= 1e-8


def test_latitude_oracle(sphere):
    plan = latitude_circle(sphere, THETA0, 4000)
    ref = transport_oracle(plan, np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(ref.values[0, -1], [-1.0, 0.0], atol=1e-6)


def test_latitude_certificates(latitude_result):
    certs = transport_certificates(latitude_result)
    assert certs["norm_drift"] <= 1e-8
    assert certs["roundtrip_defect"] <= 1e-8
    assert certs["isometry_defect"] <= 1e-8
    assert latitude_result.diagnostics["oracle_gap"] <= 1e-6


def test_octant_triangle_holonomy():
    s = np.sqrt(0.5)
    sphere = round_sphere(1.0, (np.pi / 6, 5 * np.pi / 6), axis=(s, -s, 0.0))
    pts = []
    for p in ([s, s, 0], [0, 1, 0], [0, 0, 1], [1, 0, 0], [s, s, 0]):
        pts.append(sphere_chart_point(sphere, p, pts[-1][1] if pts else None))
    plan = waypoint_plan(sphere, np.array(pts), 6000, leg_steps=[1000, 2000, 2000, 1000])
    frame = FrameField(orthonormal_coordinate_frame(sphere), 2.0)
    V0 = plan.velocities[:, 0] / plan.speeds[:, :1]
    res = parallel_transport(plan, frame, V0)
    assert abs(wrap(holonomy_angles(res)[0] - np.pi / 2)) <= 1e-3
    assert res.diagnostics["oracle_gap"] <= 1e-6


def test_permutation_and_threads_bit_identical(sphere_bundle, sphere_frame):
    rng = np.random.default_rng(0)
    V0 = rng.standard_normal((6, 2))
    base = parallel_transport(sphere_bundle, sphere_frame, V0, oracle=False)
    order = np.array([4, 0, 5, 2, 1, 3])
    perm = parallel_transport(sphere_bundle.permuted(order), sphere_frame, V0[order], oracle=False, n_jobs=3)
    assert np.array_equal(perm.V.values, base.V.values[order])
    assert np.array_equal(perm.coefficients, base.coefficients[order])
    threaded = parallel_transport(sphere_bundle, sphere_frame, V0, oracle=False, n_jobs=4)
    assert np.array_equal(threaded.V.values, base.V.values)


@given(st.integers(0, 2**32 - 1))
def test_linearity(seed):
    sphere = round_sphere(1.0, (np.pi / 6, 5 * np.pi / 6))
    plan = latitude_circle(sphere, 1.2, 400)
    frame = FrameField(orthonormal_coordinate_frame(sphere), 2.0)
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, 1, 2))
    a, b = rng.normal(size=2)
    kw = dict(tol=1e-14, max_iter=500, oracle=False, weak_modes=0)
    tu = parallel_transport(plan, frame, u, **kw).V.values
    tv = parallel_transport(plan, frame, v, **kw).V.values
    tw = parallel_transport(plan, frame, a * u + b * v, **kw).V.values
    assert np.max(np.abs(tw - (a * tu + b * tv))) <= 1e-10 * (1 + abs(a) + abs(b))


def test_estimator_api(latitude_plan, sphere_frame, latitude_result):
    est = ParallelTransport(sphere_frame, oracle=False)
    assert clone(est).get_params()["tol"] == 1e-10
    with pytest.raises(NotFittedError):
        est.transform(np.array([1.0, 0.0]))
    out = est.fit(latitude_plan).transform(np.array([1.0, 0.0]))
    assert est.report_.passes
    np.testing.assert_array_equal(out.V.values, latitude_result.V.values)
    with pytest.raises(FrameValidationError) as info:
        ParallelTransport(FrameField(sphere_frame.fields, 0.9)).fit(latitude_plan)
    assert "margin_norm_upper" in info.value.report.failing
    with pytest.raises(ValueError):
        ParallelTransport().fit(latitude_plan)


def test_bad_initial_shape(latitude_plan, sphere_frame):
    with pytest.raises(ValueError):
        parallel_transport(latitude_plan, sphere_frame, np.ones((3, 2)))
