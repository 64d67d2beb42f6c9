"""Vector fields along a test plan and their convective derivative.

A :class:`PlanField` stores one tangent vector (chart components) per curve
and time node. The convective derivative is realised curve by curve as
``d/dt V + Gamma(gamma', V)`` with second-order time differences; weak
statements are checked by integrating against compactly supported test
fields.
"""

import csv
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_finite_array, stable_sum
from .geometry import VectorField, _gamma_contract, covariant_apply

__all__ = [
    "PlanField",
    "Term",
    "TestFieldSpec",
    "convective_derivative",
    "convective_derivative_test",
    "covariant_part",
    "embedding_check",
    "export_field_csv",
    "export_norms_csv",
    "ibp_defect",
    "l2_norm",
    "leibniz_defect",
    "materialize",
    "node_norms",
    "plan_norm",
    "product_rule",
    "sine_basket",
    "sup_norm",
    "time_integral",
]

ENDPOINT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class PlanField:
    """Tangent components ``values[k, t]`` at ``plan.curves[k, t]``."""

    plan: object
    values: np.ndarray

    def __post_init__(self):
        vals = check_finite_array(self.values, "values")
        if vals.shape != self.plan.curves.shape:
            raise ValueError(f"values must have shape {self.plan.curves.shape}, got {vals.shape}")
        object.__setattr__(self, "values", vals)

    def pointwise_norms(self):
        """``|V(k, t)|`` measured with the metric at the curve point."""
        return self.plan.space.norm(self.plan.curves, self.values)

    def inner(self, other):
        """Pointwise ``<V(k, t), W(k, t)>``, shape ``(K, n_nodes)``."""
        self._check_same_plan(other)
        return self.plan.space.inner(self.plan.curves, self.values, other.values)

    def _check_same_plan(self, other):
        if other.plan is not self.plan:
            raise ValueError("fields live on different plans")

    def __add__(self, other):
        self._check_same_plan(other)
        return PlanField(self.plan, self.values + other.values)

    def __sub__(self, other):
        self._check_same_plan(other)
        return PlanField(self.plan, self.values - other.values)

    def __mul__(self, a):
        """Multiply by a scalar or by samples ``a[k, t]``."""
        a = np.asarray(a, dtype=float)
        if a.ndim == 2:
            a = a[..., None]
        return PlanField(self.plan, a * self.values)

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, plan):
        return cls(plan, np.zeros_like(plan.curves))


def _phi_samples(phi, grid):
    if callable(phi):
        vals = np.asarray(phi(grid.nodes), dtype=float)
        vals = np.broadcast_to(vals, (grid.n_nodes,)).copy()
    else:
        vals = check_finite_array(phi, "phi", ndim=1)
        if vals.shape[0] != grid.n_nodes:
            raise ValueError(f"phi needs {grid.n_nodes} samples, got {vals.shape[0]}")
    if not np.all(np.isfinite(vals)):
        raise ValueError("phi contains non-finite samples")
    return vals


@dataclass(frozen=True, eq=False)
class Term:
    """One summand ``phi(t) * indicator(curve in curves) * v(gamma_t)``.

    ``phi`` is a callable of time or its samples on the plan grid; ``dphi``
    optionally gives its derivative the same way (otherwise differenced).
    ``curves=None`` selects every curve.
    """

    phi: Callable | np.ndarray
    field: VectorField
    curves: Sequence[int] | None = None
    dphi: Callable | np.ndarray | None = None

    def time_profile(self, grid):
        vals = _phi_samples(self.phi, grid)
        if self.dphi is not None:
            dvals = _phi_samples(self.dphi, grid)
        else:
            dvals = np.gradient(vals, grid.dt, edge_order=2)
        return vals, dvals

    def curve_mask(self, n_curves):
        mask = np.zeros(n_curves, dtype=bool)
        if self.curves is None:
            mask[:] = True
        else:
            idx = np.asarray(self.curves, dtype=int)
            if idx.size and (idx.min() < 0 or idx.max() >= n_curves):
                raise IndexError("term refers to a curve outside the plan")
            mask[idx] = True
        return mask


@dataclass(frozen=True, eq=False)
class TestFieldSpec:
    """A test field along a plan: a finite sum of :class:`Term` objects."""

    __test__ = False  # not a pytest test class

    terms: Sequence[Term] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))

    def is_compactly_supported(self, grid, tol=ENDPOINT_TOL):
        for term in self.terms:
            vals, _ = term.time_profile(grid)
            if abs(vals[0]) > tol or abs(vals[-1]) > tol:
                return False
        return True


def _field_along(plan, v):
    vals = v(plan.curves)
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"field {v.name or '<anonymous>'} is undefined at a curve point")
    return vals


def materialize(spec, plan):
    """Sample a test field spec along every curve of ``plan``."""
    out = np.zeros_like(plan.curves)
    for term in spec.terms:
        phi, _ = term.time_profile(plan.grid)
        mask = term.curve_mask(plan.n_curves)
        vals = _field_along(plan, term.field)
        out = out + mask[:, None, None] * phi[None, :, None] * vals
    return PlanField(plan, out)


def node_norms(V):
    """``[[V]]_t = (sum_k weight_k |V(k, t)|^2)^(1/2)`` at every node."""
    sq = V.pointwise_norms() ** 2
    return np.sqrt(stable_sum((V.plan.weights[:, None] * sq).T, axis=-1))


def plan_norm(V, t):
    if not 0 <= t < V.plan.grid.n_nodes:
        raise IndexError(f"node {t} outside the grid")
    return float(node_norms(V)[t])


def time_integral(values, dt):
    """Trapezoidal integral over ``[0, 1]`` of node samples."""
    values = np.asarray(values, dtype=float)
    return float(dt * (0.5 * values[0] + values[1:-1].sum() + 0.5 * values[-1]))


def l2_norm(V):
    return float(np.sqrt(time_integral(node_norms(V) ** 2, V.plan.grid.dt)))


def sup_norm(V):
    return float(np.max(node_norms(V)))


def convective_derivative(V):
    """``d/dt V + Gamma(gamma', V)`` along every curve."""
    plan = V.plan
    dv = np.gradient(V.values, plan.grid.dt, axis=1, edge_order=2)
    return PlanField(plan, dv + _gamma_contract(plan.christoffel_along, plan.velocities, V.values))


def covariant_part(spec, plan):
    """``sum_i chi_i phi_i nabla_{gamma'} v_i``: the part of the derivative carried by the fields."""
    out = np.zeros_like(plan.curves)
    for term in spec.terms:
        phi, _ = term.time_profile(plan.grid)
        mask = term.curve_mask(plan.n_curves)
        cov = covariant_apply(plan.space, term.field, plan.curves, plan.velocities)
        out = out + mask[:, None, None] * phi[None, :, None] * cov
    return PlanField(plan, out)


def convective_derivative_test(spec, plan):
    """Term-wise ``phi' v(gamma_t) + phi nabla_{gamma'} v`` for a test field spec."""
    out = covariant_part(spec, plan).values
    for term in spec.terms:
        _, dphi = term.time_profile(plan.grid)
        mask = term.curve_mask(plan.n_curves)
        out = out + mask[:, None, None] * dphi[None, :, None] * _field_along(plan, term.field)
    return PlanField(plan, out)


def _weighted(plan, pointwise):
    return stable_sum((plan.weights[:, None] * pointwise).T, axis=-1)


def leibniz_defect(V, W):
    """Worst interior mismatch of ``d/dt int <V, W> = int <DV, W> + <V, DW>``."""
    plan = V.plan
    lhs = np.gradient(_weighted(plan, V.inner(W)), plan.grid.dt, edge_order=2)
    dv, dw = convective_derivative(V), convective_derivative(W)
    rhs = _weighted(plan, dv.inner(W) + V.inner(dw))
    return float(np.max(np.abs(lhs - rhs)[1:-1]))


def product_rule(a, W):
    """Return ``(aW, a' W + a DW)`` for scalar samples ``a[k, t]``."""
    plan = W.plan
    a = np.broadcast_to(np.asarray(a, dtype=float), plan.curves.shape[:2])
    a = check_finite_array(a, "a")
    da = np.gradient(a, plan.grid.dt, axis=1, edge_order=2)
    aw = W * a
    daw = W * da + convective_derivative(W) * a
    return aw, daw


def ibp_defect(V, Z, specs):
    """Worst ``|int int <V, D W> + int int <Z, W>|`` over compactly supported specs.

    A value near zero certifies ``Z`` as the weak convective derivative of
    ``V`` against the given test fields.
    """
    plan = V.plan
    worst = 0.0
    for spec in specs:
        if not spec.is_compactly_supported(plan.grid):
            raise ValueError("test field spec is not compactly supported in time")
        W = materialize(spec, plan)
        dW = convective_derivative_test(spec, plan)
        integrand = _weighted(plan, V.inner(dW) + Z.inner(W))
        worst = max(worst, abs(time_integral(integrand, plan.grid.dt)))
    return worst


def embedding_check(V, DV):
    """``(sup_t [[V]]_t, sqrt(2) * sqrt(|V|_L2^2 + |DV|_L2^2))``."""
    return sup_norm(V), float(np.sqrt(2.0) * np.hypot(l2_norm(V), l2_norm(DV)))


def sine_basket(fields, n_modes=3, curves=None):
    """Test specs ``sin(j pi t) v`` for every field and ``j = 1..n_modes``."""
    specs = []
    for v in fields:
        for j in range(1, n_modes + 1):
            specs.append(TestFieldSpec([Term(
                lambda t, j=j: np.sin(j * np.pi * t), v, curves,
                dphi=lambda t, j=j: j * np.pi * np.cos(j * np.pi * t),
            )]))
    return specs


def _fmt(x):
    return format(float(x), ".17g")


def export_field_csv(V, path):
    """Rows ``curve, node, c_1..c_d, norm``."""
    d = V.plan.dim
    norms = V.pointwise_norms()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["curve", "node"] + [f"c{i + 1}" for i in range(d)] + ["norm"])
        for k in range(V.values.shape[0]):
            for t in range(V.values.shape[1]):
                writer.writerow([k, t] + [_fmt(c) for c in V.values[k, t]] + [_fmt(norms[k, t])])


def export_norms_csv(V, path):
    """Rows ``node, t, [[V]]_t``."""
    norms = node_norms(V)
    nodes = V.plan.grid.nodes
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["node", "t", "norm"])
        for t, (s, n) in enumerate(zip(nodes, norms)):
            writer.writerow([t, _fmt(s), _fmt(n)])
