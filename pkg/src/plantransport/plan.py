"""Test plans: weighted ensembles of time-sampled Lipschitz curves.

A plan is an empirical measure on curves, so every statement that holds for
almost every curve is checked curve by curve. Velocities are second-order
finite differences of the sampled positions.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ._validation import check_finite_array, check_positive_int, stable_sum
from .banach_ode import TimeGrid
from .geometry import DomainError, _gamma_contract

__all__ = [
    "GeodesicError",
    "TestPlan",
    "build_geodesic_plan",
    "compression_constant",
    "geodesic",
    "latitude_circle",
    "lipschitz_constant",
    "make_plan",
    "piecewise_gradient",
    "plan_speed",
    "reversed_plan",
    "segment_bundle",
    "waypoint_plan",
]


class GeodesicError(RuntimeError):
    """The shooting solver could not connect two points by a chart geodesic."""


@dataclass(frozen=True, eq=False)
class TestPlan:
    """Weighted ensemble of ``K`` curves sampled on ``grid``.

    ``curves`` and ``velocities`` have shape ``(K, n_nodes, dim)``; ``speeds``
    holds the metric norms of the velocities. At corner nodes listed in
    ``breaks`` the stored velocity is the mean of the one-sided derivatives,
    which are kept in ``break_velocities[k, b] = (left, right)``.
    """

    __test__ = False  # not a pytest test class

    space: object
    grid: TimeGrid
    curves: np.ndarray
    weights: np.ndarray
    velocities: np.ndarray
    speeds: np.ndarray
    lip_constant: float
    name: str = "custom"
    breaks: tuple = ()
    break_velocities: np.ndarray | None = field(default=None, compare=False, repr=False)
    compression: float | None = field(default=None, compare=False)

    @property
    def n_curves(self):
        return self.curves.shape[0]

    @property
    def dim(self):
        return self.curves.shape[-1]

    @cached_property
    def metric_along(self):
        """Metric tensors at every curve point, shape ``(K, n_nodes, dim, dim)``."""
        return self.space.metric(self.curves)

    @cached_property
    def christoffel_along(self):
        return self.space.christoffel(self.curves)

    def permuted(self, order):
        order = np.asarray(order)
        return make_plan(self.space, self.curves[order], self.weights[order],
                         velocities=self.velocities[order], name=self.name, breaks=self.breaks,
                         break_velocities=self._break_rows(order))

    def subset(self, indices):
        idx = np.asarray(indices)
        w = self.weights[idx]
        return make_plan(self.space, self.curves[idx], w / w.sum(),
                         velocities=self.velocities[idx], name=self.name, breaks=self.breaks,
                         break_velocities=self._break_rows(idx))

    def _break_rows(self, idx):
        return None if self.break_velocities is None else self.break_velocities[idx]

    def pieces(self):
        """Node ranges ``(a, b)`` (inclusive) of the smooth pieces between breaks."""
        edges = [0, *self.breaks, self.grid.n_steps]
        return list(zip(edges[:-1], edges[1:]))


def piecewise_gradient(values, dt, breaks=(), return_limits=False):
    """Second-order differences along axis 1, restarted at every break node.

    Each smooth piece gets central differences inside and one-sided stencils
    at its ends; at a break node the two one-sided values are averaged. With
    ``return_limits`` the one-sided values are also returned as an array
    ``(K, n_breaks, 2, ...)`` holding (left, right) pairs.
    """
    edges = [0, *breaks, values.shape[1] - 1]
    out = np.empty_like(values)
    limits = np.empty((values.shape[0], len(breaks), 2) + values.shape[2:])
    prev_right = None
    for j, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        # offsetting by the first sample keeps constant pieces exactly zero
        seg = values[:, a:b + 1]
        piece = np.gradient(seg - seg[:, :1], dt, axis=1, edge_order=2)
        out[:, a:b + 1] = piece
        if prev_right is not None:
            limits[:, j - 1, 0] = prev_right
            limits[:, j - 1, 1] = piece[:, 0]
            out[:, a] = 0.5 * (prev_right + piece[:, 0])
        prev_right = piece[:, -1]
    return (out, limits) if return_limits else out


def _check_breaks(breaks, n_steps):
    breaks = tuple(int(b) for b in breaks)
    edges = [0, *breaks, n_steps]
    if any(b - a < 2 for a, b in zip(edges[:-1], edges[1:])):
        raise ValueError("breaks must be increasing interior nodes at least 2 steps apart")
    return breaks


def make_plan(space, curves, weights=None, velocities=None, name="custom", breaks=(),
              break_velocities=None):
    """Assemble a :class:`TestPlan` from sampled curves.

    ``weights`` default to uniform and are normalised to sum to one. When
    ``velocities`` is omitted they are finite-differenced from ``curves``
    (central in the interior, one-sided second order at the endpoints).
    ``breaks`` lists interior nodes where the curves are only Lipschitz
    (corners); differences are never taken across them.
    """
    curves = check_finite_array(curves, "curves")
    if curves.ndim == 2:
        curves = curves[None]
    if curves.ndim != 3 or curves.shape[-1] != space.dim:
        raise ValueError(f"curves must have shape (K, n_nodes, {space.dim})")
    k, n_nodes, _ = curves.shape
    if k == 0:
        raise ValueError("a test plan needs at least one curve")
    if n_nodes < 3:
        raise ValueError("curves need at least 3 time nodes")
    grid = TimeGrid(n_nodes - 1)
    if not np.all(space.in_domain(curves)):
        raise DomainError("a plan curve leaves the chart domain")
    if weights is None:
        weights = np.full(k, 1.0 / k)
    weights = check_finite_array(weights, "weights", ndim=1)
    if weights.shape[0] != k or np.any(weights <= 0):
        raise ValueError("weights must be K positive numbers")
    weights = weights / weights.sum()
    breaks = _check_breaks(breaks, grid.n_steps)
    if velocities is None:
        velocities, limits = piecewise_gradient(curves, grid.dt, breaks, return_limits=True)
        if break_velocities is None:
            break_velocities = limits
    if breaks and break_velocities is None:
        _, break_velocities = piecewise_gradient(curves, grid.dt, breaks, return_limits=True)
    if not breaks:
        break_velocities = None
    velocities = check_finite_array(velocities, "velocities")
    if velocities.shape != curves.shape:
        raise ValueError("velocities must have the same shape as curves")
    speeds = space.norm(curves, velocities)
    lip = float(np.max(speeds))
    if breaks:
        corner = curves[:, list(breaks)][:, :, None]
        lip = max(lip, float(np.max(space.norm(corner, break_velocities))))
    return TestPlan(space, grid, curves, weights, velocities, speeds, lip, name=name,
                    breaks=breaks, break_velocities=break_velocities)


def plan_speed(plan, t):
    """Per-curve metric speed ``|gamma'_t|`` at node ``t``."""
    if not 0 <= t < plan.grid.n_nodes:
        raise IndexError(f"node {t} outside the grid")
    return plan.speeds[:, t].copy()


def lipschitz_constant(plan):
    return float(np.max(plan.speeds))


def _default_bins(space):
    if space.lattice_edges is None:
        raise ValueError("space has no sample lattice; pass explicit bins")
    return space.lattice_edges


def compression_constant(plan, bins=None):
    """Binned estimate of the smallest ``C`` with ``(e_t)_* pi <= C m``.

    ``bins`` is anything accepted by :func:`numpy.histogramdd` (edge arrays per
    axis, or counts); by default the cells of the sample lattice. Returns the
    maximum over nodes and bins of ``pi(gamma_t in B) / m(B)``.
    """
    space = plan.space
    bins = _default_bins(space) if bins is None else bins
    mass, edges = np.histogramdd(space.sample_points, bins=bins, weights=space.sample_masses)
    worst = 0.0
    for t in range(plan.grid.n_nodes):
        pushed, _ = np.histogramdd(plan.curves[:, t], bins=edges, weights=plan.weights)
        if not np.isclose(pushed.sum(), 1.0):
            raise ValueError(f"bins do not cover the plan at node {t}")
        hit = pushed > 0
        if np.any(mass[hit] <= 0):
            raise ValueError(f"plan escapes the measure support at node {t}")
        worst = max(worst, float(np.max(pushed[hit] / mass[hit])))
    return worst


# geodesics --------------------------------------------------------------------


def _geodesic_rhs(space, x, v):
    return v, -_gamma_contract(space.christoffel(x), v, v)


def _integrate_geodesics(space, x0, v0, n_steps, substeps):
    """RK4 for ``x'' + Gamma(x', x') = 0``; returns node positions and velocities."""
    h = 1.0 / (n_steps * substeps)
    xs = [x0]
    vs = [v0]
    x, v = x0, v0
    for _ in range(n_steps):
        for _ in range(substeps):
            k1x, k1v = _geodesic_rhs(space, x, v)
            k2x, k2v = _geodesic_rhs(space, x + 0.5 * h * k1x, v + 0.5 * h * k1v)
            k3x, k3v = _geodesic_rhs(space, x + 0.5 * h * k2x, v + 0.5 * h * k2v)
            k4x, k4v = _geodesic_rhs(space, x + h * k3x, v + h * k3v)
            x = x + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
            v = v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        xs.append(x)
        vs.append(v)
    return np.stack(xs, axis=-2), np.stack(vs, axis=-2)


def _endpoint(space, x0, v0, steps):
    with np.errstate(all="ignore"):
        xs, _ = _integrate_geodesics(space, x0, v0, 1, steps)
    return xs[..., -1, :]


def geodesic(space, p, q, n_steps, tol=1e-8, max_iter=50, shooting_steps=400):
    """Connect ``p`` to ``q`` by a chart geodesic parametrised on ``[0, 1]``.

    ``p`` and ``q`` may be single points ``(dim,)`` or batches ``(K, dim)``.
    Initial velocities are found by Newton shooting on the endpoint miss
    (central-difference jacobian, all perturbations integrated in one batch),
    then the geodesic is re-integrated with RK4 using at least
    ``shooting_steps`` steps. Returns ``(positions, velocities)`` with shape
    ``(..., n_steps + 1, dim)``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    single = p.ndim == 1
    p, q = np.atleast_2d(p), np.atleast_2d(q)
    space.check_domain(p, "geodesic start")
    space.check_domain(q, "geodesic end")
    n_steps = check_positive_int(n_steps, "n_steps")
    d = space.dim
    substeps = max(1, int(np.ceil(shooting_steps / n_steps)))
    steps = n_steps * substeps
    if steps > 4 * shooting_steps:
        steps = shooting_steps
    # batch layout: [v, v + e_1, v - e_1, ..., v + e_d, v - e_d]
    shifts = np.zeros((2 * d + 1, d))
    for i in range(d):
        shifts[1 + 2 * i, i] = 1.0
        shifts[2 + 2 * i, i] = -1.0
    v = q - p
    miss = np.inf
    for _ in range(max_iter):
        eps = 1e-7 * (1.0 + np.linalg.norm(v, axis=-1))
        vb = v[None] + shifts[:, None, :] * eps[None, :, None]
        xb = np.broadcast_to(p, vb.shape)
        ends = _endpoint(space, xb, vb, steps)
        f = ends[0] - q
        miss = float(np.max(np.abs(f))) if np.all(np.isfinite(f)) else np.inf
        if miss < tol * 1e-3:
            break
        if not np.isfinite(miss) or not np.all(np.isfinite(ends)):
            raise GeodesicError("geodesic shooting left the chart")
        jac = np.stack([(ends[1 + 2 * i] - ends[2 + 2 * i]) / (2 * eps[:, None]) for i in range(d)], axis=-1)
        v = v - np.linalg.solve(jac, f[..., None])[..., 0]
    if miss > tol:
        raise GeodesicError(f"geodesic shooting did not converge (endpoint miss {miss:.2e})")
    xs, vs = _integrate_geodesics(space, p, v, n_steps, substeps)
    final_miss = float(np.max(np.abs(xs[:, -1] - q)))
    if final_miss > tol:
        raise GeodesicError(f"geodesic endpoint miss {final_miss:.2e} after re-integration")
    xs[:, -1] = q
    same = np.all(p == q, axis=-1)
    xs[same] = p[same][:, None]
    vs[same] = 0.0
    if not np.all(space.in_domain(xs)):
        raise GeodesicError("geodesic leaves the chart domain")
    if single:
        return xs[0], vs[0]
    return xs, vs


def _sample_region(rng, region, k, dim):
    lo, hi = region
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (dim,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (dim,))
    return lo + (hi - lo) * rng.random((k, dim))


def build_geodesic_plan(space, source, target, n_curves, seed=0, n_steps=200):
    """Sample ``n_curves`` endpoint pairs and join each pair by a chart geodesic.

    ``source`` and ``target`` are boxes ``(lo, hi)`` in chart coordinates
    (``lo == hi`` for a single point). Weights are uniform and sampling is
    deterministic in ``seed``.
    """
    n_curves = check_positive_int(n_curves, "n_curves")
    rng = np.random.default_rng(seed)
    p = _sample_region(rng, source, n_curves, space.dim)
    q = _sample_region(rng, target, n_curves, space.dim)
    xs, _ = geodesic(space, p, q, n_steps)
    return make_plan(space, xs, name="geodesic")


def latitude_circle(space, colatitude, n_steps, longitude=0.0, turns=1.0):
    """The closed curve ``theta = colatitude`` run once around on ``[0, 1]``."""
    t = np.linspace(0.0, 1.0, check_positive_int(n_steps, "n_steps") + 1)
    curve = np.stack([np.full_like(t, colatitude), longitude + 2 * np.pi * turns * t], axis=-1)
    return make_plan(space, curve[None], name="latitude_circle")


def segment_bundle(space, starts, ends, n_steps, weights=None):
    """Straight chart segments ``(1 - t) a + t b``, one per (start, end) pair."""
    a = np.atleast_2d(np.asarray(starts, dtype=float))
    b = np.atleast_2d(np.asarray(ends, dtype=float))
    t = np.linspace(0.0, 1.0, check_positive_int(n_steps, "n_steps") + 1)[None, :, None]
    curves = (1 - t) * a[:, None, :] + t * b[:, None, :]
    return make_plan(space, curves, weights, name="segment_bundle")


def waypoint_plan(space, waypoints, n_steps, leg_steps=None):
    """A single curve made of chart geodesics through ``waypoints``.

    The time allotted to each leg is proportional to its length, so the curve
    has (nearly) constant speed; ``leg_steps`` overrides the allocation.
    """
    pts = check_finite_array(waypoints, "waypoints", ndim=2)
    legs = len(pts) - 1
    if legs < 1:
        raise ValueError("need at least two waypoints")
    if leg_steps is None:
        lengths = []
        for a, b in zip(pts[:-1], pts[1:]):
            xs, vs = geodesic(space, a, b, 64)
            lengths.append(float(space.norm(xs[0], vs[0])))
        total = sum(lengths)
        leg_steps = [max(1, int(round(n_steps * ell / total))) for ell in lengths]
    leg_steps = [check_positive_int(s, "leg_steps") for s in leg_steps]
    pieces = []
    for j, (a, b) in enumerate(zip(pts[:-1], pts[1:])):
        xs, _ = geodesic(space, a, b, leg_steps[j])
        pieces.append(xs if j == 0 else xs[1:])
    breaks = tuple(np.cumsum(leg_steps)[:-1])
    return make_plan(space, np.concatenate(pieces)[None], name="waypoints", breaks=breaks)


def reversed_plan(plan):
    """The same curves run backwards in time."""
    n = plan.grid.n_steps
    bv = None
    if plan.breaks:
        bv = -plan.break_velocities[:, ::-1, ::-1]
    return make_plan(plan.space, plan.curves[:, ::-1], plan.weights,
                     velocities=-plan.velocities[:, ::-1], name=plan.name + "_reversed",
                     breaks=tuple(n - b for b in reversed(plan.breaks)), break_velocities=bv)


def weighted_curve_sum(plan, values):
    """``sum_k weight_k values[k, ...]`` with an order-independent reduction."""
    values = np.asarray(values, dtype=float)
    w = plan.weights.reshape((-1,) + (1,) * (values.ndim - 1))
    return stable_sum(np.moveaxis(w * values, 0, -1), axis=-1)
