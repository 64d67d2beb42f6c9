"""Parallel transport along a Lipschitz test plan.

Given a frame ``w_1..w_n`` with controlled norms, near-orthogonality and
bounded covariant derivative, a field ``V = sum_i g_i w_i`` along the plan is
parallel iff its coefficients solve ``g_i' + sum_j H_{j,i} g_j = 0``, where
``H`` expands the convective derivative of the frame in the frame itself.
The coefficient system is solved as a linear ODE on the weighted space of
per-curve coefficient vectors; an independent RK4 integrator of the classical
transport equation serves as a cross-check.
"""

import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_finite_array, check_positive_float, check_positive_int
from .banach_ode import OperatorPath, WeightedSpace, solve_linear_ode
from .geometry import _bilinear, _gamma_contract, covariant_apply, hs_norm, matvec
from .plan import reversed_plan
from .planfields import PlanField, ibp_defect, leibniz_defect, node_norms, sine_basket

__all__ = [
    "ConnectionPath",
    "DegenerateFrameError",
    "FrameField",
    "FrameValidationError",
    "GoodBaseReport",
    "ParallelTransport",
    "TransportResult",
    "connection_matrix",
    "frame_coefficients",
    "holonomy_angles",
    "parallel_transport",
    "transport_certificates",
    "transport_oracle",
    "validate_good_base",
]


class FrameValidationError(ValueError):
    """The frame violates a good-base bound; ``report`` names the failing margin."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DegenerateFrameError(np.linalg.LinAlgError):
    """The frame's Gram matrix is singular at some point."""


@dataclass(frozen=True)
class GoodBaseReport:
    """Worst slacks in the good-base inequalities; all must be positive to pass."""

    M: float
    margin_norm_lower: float
    margin_norm_upper: float
    margin_offdiag: float
    margin_hs: float
    witnesses: dict = field(default_factory=dict)

    @property
    def margins(self):
        return {
            "margin_norm_lower": self.margin_norm_lower,
            "margin_norm_upper": self.margin_norm_upper,
            "margin_offdiag": self.margin_offdiag,
            "margin_hs": self.margin_hs,
        }

    @property
    def passes(self):
        return all(m > 0 for m in self.margins.values())

    @property
    def failing(self):
        return [name for name, m in self.margins.items() if not m > 0]

    def to_dict(self):
        out = {"passes": self.passes, "M": self.M}
        out.update({k: (v if math.isfinite(v) else None) for k, v in self.margins.items()})
        out["witnesses"] = {k: [float(c) for c in v] for k, v in self.witnesses.items()}
        return out


@dataclass(frozen=True, eq=False)
class FrameField:
    """Candidate good base ``fields`` with constant ``M``."""

    fields: Sequence
    M: float
    report: GoodBaseReport | None = None

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        if not self.fields:
            raise ValueError("a frame needs at least one field")
        check_positive_float(self.M, "M")

    @property
    def n(self):
        return len(self.fields)

    def validated(self, space, points=None):
        return replace(self, report=validate_good_base(space, self, points))

    def values(self, x):
        """Frame vectors at ``x`` stacked as ``(..., n, dim)``."""
        return np.stack([w(x) for w in self.fields], axis=-2)


def validate_good_base(space, frame, points=None):
    """Evaluate the good-base inequalities at ``points`` (default: the sample points).

    On a point of a stratum of dimension ``k`` only ``w_1..w_k`` enter the
    norm and near-orthogonality bounds; the covariant-derivative bound is
    checked for every field everywhere.
    """
    x = space.sample_points if points is None else np.asarray(points, dtype=float).reshape(-1, space.dim)
    M = float(frame.M)
    labels = space.stratum_labels(x)
    vals = frame.values(x)
    g = space.metric(x)
    n = frame.n
    margins = {"norm_lower": np.inf, "norm_upper": np.inf, "offdiag": np.inf, "hs": np.inf}
    witness = {}

    def _update(key, slack, where):
        if slack.size == 0:
            return
        i = int(np.argmin(slack))
        if slack[i] < margins[key]:
            margins[key] = float(slack[i])
            witness["margin_" + key] = x[where][i]

    for i in range(n):
        active = labels > i
        norms = np.sqrt(np.maximum(_bilinear(g, vals[:, i], vals[:, i]), 0.0))
        _update("norm_lower", norms[active] - 1.0 / M, active)
        _update("norm_upper", M - norms[active], active)
        hs = np.atleast_1d(hs_norm(space, frame.fields[i], x))
        _update("hs", M - hs, np.ones(len(x), dtype=bool))
        for j in range(i + 1, n):
            pair = labels > j
            ip = np.abs(_bilinear(g, vals[:, i], vals[:, j]))
            _update("offdiag", (1.0 / (M * M * labels) - ip)[pair], pair)
    return GoodBaseReport(
        M, margins["norm_lower"], margins["norm_upper"], margins["offdiag"], margins["hs"], witness
    )


def _solve_small(gram, rhs):
    try:
        return np.linalg.solve(gram, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise DegenerateFrameError("frame Gram matrix is singular") from exc


def _frame_gram(space, x, wv):
    g = space.metric(x)
    n = wv.shape[-2]
    gram = np.empty(x.shape[:-1] + (n, n))
    for i in range(n):
        for j in range(i, n):
            gram[..., i, j] = gram[..., j, i] = _bilinear(g, wv[..., i, :], wv[..., j, :])
    return g, gram


def frame_coefficients(space, frame, w, x):
    """Coefficients ``h`` with ``sum_i h_i w_i(x) = w`` from the Gram system.

    ``w`` is a :class:`VectorField` or component array broadcastable to ``x``.
    """
    x = space.check_domain(np.asarray(x, dtype=float))
    comps = w(x) if callable(w) else np.broadcast_to(np.asarray(w, dtype=float), x.shape)
    wv = frame.values(x)
    g, gram = _frame_gram(space, x, wv)
    if np.any(np.abs(np.linalg.det(gram)) <= 1e-300):
        raise DegenerateFrameError("frame is degenerate at a requested point")
    rhs = np.stack([_bilinear(g, wv[..., i, :], comps) for i in range(frame.n)], axis=-1)
    return _solve_small(gram, rhs)


@dataclass(frozen=True, eq=False)
class ConnectionPath:
    """``H[k, t, i, j]``: convective derivative of ``w_i`` expanded along ``w_j``.

    At corner nodes ``H`` holds the right limit and ``H_left[k, b]`` the left one.
    """

    H: np.ndarray
    frame_values: np.ndarray
    breaks: tuple = ()
    H_left: np.ndarray | None = None

    @property
    def sup_bound(self):
        vals = [np.max(np.abs(self.H))] if self.H.size else [0.0]
        if self.H_left is not None and self.H_left.size:
            vals.append(np.max(np.abs(self.H_left)))
        return float(max(vals))

    def antisymmetry_defect(self):
        return float(np.max(np.abs(self.H + np.swapaxes(self.H, -1, -2))))


def _chunks(n_items, n_jobs):
    n_jobs = max(1, min(n_jobs or 1, n_items))
    bounds = np.linspace(0, n_items, n_jobs + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _map_curves(func, n_items, n_jobs):
    parts = _chunks(n_items, n_jobs)
    if len(parts) == 1:
        return [func(parts[0])]
    with ThreadPoolExecutor(max_workers=len(parts)) as pool:
        return list(pool.map(func, parts))


def _expand_derivatives(space, frame, x, xdot):
    wv = frame.values(x)
    g, gram = _frame_gram(space, x, wv)
    h = np.empty(x.shape[:-1] + (frame.n, frame.n))
    for i, w in enumerate(frame.fields):
        dw = covariant_apply(space, w, x, xdot)
        rhs = np.stack([_bilinear(g, wv[..., j, :], dw) for j in range(frame.n)], axis=-1)
        h[..., i, :] = _solve_small(gram, rhs)
    return h, wv


def connection_matrix(plan, frame, n_jobs=None):
    """Expand ``nabla_{gamma'} w_i`` in the frame at every curve node."""
    space = plan.space
    br = list(plan.breaks)

    def _work(sl):
        h, wv = _expand_derivatives(space, frame, plan.curves[sl], plan.velocities[sl])
        h_left = None
        if br:
            x = plan.curves[sl][:, br]
            h_left, _ = _expand_derivatives(space, frame, x, plan.break_velocities[sl][:, :, 0])
            h[:, br], _ = _expand_derivatives(space, frame, x, plan.break_velocities[sl][:, :, 1])
        return h, wv, h_left

    parts = _map_curves(_work, plan.n_curves, n_jobs)
    H = np.concatenate([p[0] for p in parts])
    H_left = np.concatenate([p[2] for p in parts]) if br else None
    if not np.all(np.isfinite(H)) or (H_left is not None and not np.all(np.isfinite(H_left))):
        raise DegenerateFrameError("frame is degenerate along the plan")
    return ConnectionPath(H, np.concatenate([p[1] for p in parts]), tuple(br), H_left)


def _coefficient_path(plan, conn):
    """The generator ``(lam f)_{k,i} = -sum_j H[k,t,j,i] f_{k,j}`` on ``[L^2(pi)]^n``."""
    k, nodes, n, _ = conn.H.shape
    ht = -np.swapaxes(conn.H, -1, -2).transpose(1, 0, 2, 3).copy()  # (t, k, i, j)

    def apply(t, f):
        return matvec(ht[t], f.reshape(k, n)).reshape(-1)

    def apply_batch(y):
        return matvec(ht, y.reshape(nodes, k, n)).reshape(nodes, k * n)

    apply_left = None
    if conn.breaks:
        hl = {b: -np.swapaxes(conn.H_left[:, j], -1, -2) for j, b in enumerate(conn.breaks)}

        def apply_left(t, f):
            return matvec(hl[t], f.reshape(k, n)).reshape(-1)

    return OperatorPath(plan.grid, apply, n * conn.sup_bound, apply_batch=apply_batch,
                        breaks=conn.breaks, apply_left=apply_left)


@dataclass(frozen=True, eq=False)
class TransportResult:
    """Coefficients ``g`` (a curve in ``[L^2(pi)]^n``), the field ``V`` and diagnostics."""

    g: object
    V: PlanField
    V0: np.ndarray
    connection: ConnectionPath
    frame: FrameField
    diagnostics: dict
    tol: float = 1e-10
    max_iter: int = 200

    @property
    def plan(self):
        return self.V.plan

    @property
    def coefficients(self):
        """``g`` reshaped to ``(K, n_nodes, n)``."""
        n = self.frame.n
        k = self.plan.n_curves
        return self.g.values.reshape(-1, k, n).transpose(1, 0, 2)


def _frame_values(plan, frame):
    return frame.values(plan.curves)


def parallel_transport(plan, frame, V0, tol=1e-10, max_iter=200, connection=None,
                       n_jobs=None, oracle=True, weak_modes=2):
    """Transport ``V0`` (components at each curve start, shape ``(K, dim)``) along ``plan``."""
    V0 = check_finite_array(V0, "V0")
    if V0.ndim == 1:
        V0 = np.broadcast_to(V0, (plan.n_curves, plan.dim)).copy()
    if V0.shape != (plan.n_curves, plan.dim):
        raise ValueError(f"V0 must have shape ({plan.n_curves}, {plan.dim})")
    conn = connection_matrix(plan, frame, n_jobs) if connection is None else connection
    g0 = frame_coefficients(plan.space, frame, V0, plan.curves[:, 0])
    n = frame.n
    space = WeightedSpace(np.repeat(plan.weights, n))
    lam = _coefficient_path(plan, conn)
    g, info = solve_linear_ode(g0.reshape(-1), lam, tol=tol, max_iter=max_iter,
                               space=space, return_info=True)
    coeffs = g.values.reshape(-1, plan.n_curves, n).transpose(1, 0, 2)
    V = PlanField(plan, np.sum(coeffs[..., :, None] * conn.frame_values, axis=-2))
    norms_sq = node_norms(V) ** 2
    diagnostics = {
        "norm_drift": float(np.max(np.abs(norms_sq - norms_sq[0]))),
        "leibniz_defect": leibniz_defect(V, V),
        "picard_iterations": info.iterations,
        "picard_residual": info.residual,
        "bound_c": lam.bound_c,
        "weak_defect": ibp_defect(V, PlanField.zeros(plan), sine_basket(frame.fields, weak_modes))
        if weak_modes else None,
        "oracle_gap": None,
    }
    result = TransportResult(g, V, V0, conn, frame, diagnostics, tol, max_iter)
    if oracle:
        ref = transport_oracle(plan, V0, n_jobs=n_jobs)
        diagnostics["oracle_gap"] = oracle_gap(V, ref)
    return result


def oracle_gap(V, ref):
    """Largest pointwise metric distance, relative to the largest initial norm."""
    scale = float(np.max(V.pointwise_norms()[:, 0]))
    gap = float(np.max((V - ref).pointwise_norms()))
    return gap / scale if scale > 0 else gap


def _fd4(y, dt):
    """Fourth-order finite differences along axis 1."""
    d = np.empty_like(y)
    d[:, 2:-2] = (y[:, :-4] - 8 * y[:, 1:-3] + 8 * y[:, 3:-1] - y[:, 4:]) / (12 * dt)
    c = np.array([-25, 48, -36, 16, -3]) / (12 * dt)
    for idx, sgn, sl in ((0, 1, slice(0, 5)), (1, 1, slice(1, 6)), (-1, -1, slice(-5, None)), (-2, -1, slice(-6, -1))):
        seg = y[:, sl]
        if sgn < 0:
            seg = seg[:, ::-1]
        d[:, idx] = sgn * np.tensordot(c, np.moveaxis(seg, 1, 0), axes=1)
    return d


def transport_oracle(plan, V0, n_jobs=None):
    """Classical RK4 integration of ``V' + Gamma(gamma', V) = 0`` curve by curve.

    Uses its own fourth-order velocity estimates (per smooth piece) and cubic
    Hermite midpoints, independent of the plan's stored velocities and of the
    coefficient solver.
    """
    space = plan.space
    V0 = check_finite_array(V0, "V0")
    if V0.ndim == 1:
        V0 = np.broadcast_to(V0, (plan.n_curves, plan.dim)).copy()
    dt = plan.grid.dt

    pieces = plan.pieces()
    if any(b - a < 5 for a, b in pieces):
        raise ValueError("transport_oracle needs at least 6 nodes per smooth piece")

    def _work(sl):
        out = np.empty_like(plan.curves[sl])
        v = V0[sl]
        out[:, 0] = v
        for a, b in pieces:
            x = plan.curves[sl, a:b + 1]
            xd = _fd4(x, dt)
            xm = 0.5 * (x[:, :-1] + x[:, 1:]) + dt / 8 * (xd[:, :-1] - xd[:, 1:])
            xdm = 1.5 * (x[:, 1:] - x[:, :-1]) / dt - 0.25 * (xd[:, :-1] + xd[:, 1:])
            gam = space.christoffel(x)
            gam_m = space.christoffel(xm)
            for t in range(b - a):
                k1 = -_gamma_contract(gam[:, t], xd[:, t], v)
                k2 = -_gamma_contract(gam_m[:, t], xdm[:, t], v + 0.5 * dt * k1)
                k3 = -_gamma_contract(gam_m[:, t], xdm[:, t], v + 0.5 * dt * k2)
                k4 = -_gamma_contract(gam[:, t + 1], xd[:, t + 1], v + dt * k3)
                v = v + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                out[:, a + t + 1] = v
        return out

    parts = _map_curves(_work, plan.n_curves, n_jobs)
    return PlanField(plan, np.concatenate(parts))


def _orthonormal_start(plan, frame):
    """Metric Gram-Schmidt of the frame at every curve start, shape ``(K, n, dim)``."""
    x0 = plan.curves[:, 0]
    g = plan.space.metric(x0)
    basis = []
    for i in range(frame.n):
        v = frame.fields[i](x0)
        for _ in range(2):
            for e in basis:
                v = v - _bilinear(g, e, v)[:, None] * e
        basis.append(v / np.sqrt(_bilinear(g, v, v))[:, None])
    return np.stack(basis, axis=1)


def transport_certificates(result, n_jobs=None):
    """Norm drift, isometry defect of a transported orthonormal set, and round-trip defect."""
    plan, frame = result.plan, result.frame
    kw = dict(tol=result.tol, max_iter=result.max_iter, n_jobs=n_jobs, oracle=False, weak_modes=0)
    basis = _orthonormal_start(plan, frame)
    transported = [
        parallel_transport(plan, frame, basis[:, a], connection=result.connection, **kw).V
        for a in range(basis.shape[1])
    ]
    iso = 0.0
    for a in range(len(transported)):
        for b in range(a, len(transported)):
            gram = transported[a].inner(transported[b])
            iso = max(iso, float(np.max(np.abs(gram - gram[:, :1]))))
    back_plan = reversed_plan(plan)
    back = parallel_transport(back_plan, frame, result.V.values[:, -1], **kw)
    diff = back.V.values[:, -1] - result.V0
    roundtrip = float(np.max(plan.space.norm(plan.curves[:, 0], diff)))
    return {
        "norm_drift": result.diagnostics["norm_drift"],
        "isometry_defect": iso,
        "roundtrip_defect": roundtrip,
    }


def _wrap(angle):
    return (angle + np.pi) % (2 * np.pi) - np.pi


def holonomy_angles(result):
    """Signed rotation from ``V(0)`` to ``V(1)`` per curve, in ``(-pi, pi]``.

    Both vectors are expressed in the metric-orthonormalised frame at their
    base points (the same point for closed loops) and compared by ``atan2``.
    Uses the first two frame fields.
    """
    plan, frame = result.plan, result.frame
    if frame.n < 2:
        raise ValueError("holonomy angles need at least two frame fields")
    space = plan.space
    angles = []
    for t in (0, -1):
        x = plan.curves[:, t]
        g = space.metric(x)
        e1 = frame.fields[0](x)
        e1 = e1 / np.sqrt(_bilinear(g, e1, e1))[:, None]
        e2 = frame.fields[1](x)
        e2 = e2 - _bilinear(g, e1, e2)[:, None] * e1
        e2 = e2 / np.sqrt(_bilinear(g, e2, e2))[:, None]
        v = result.V.values[:, t]
        angles.append(np.arctan2(_bilinear(g, e2, v), _bilinear(g, e1, v)))
    out = _wrap(angles[1] - angles[0])
    return np.where(out == -np.pi, np.pi, out)


class ParallelTransport(BaseEstimator):
    """Estimator-style front end: ``fit`` a plan, ``transform`` initial vectors.

    Parameters
    ----------
    frame : FrameField
        Candidate good base; validated on the space samples and curve points.
    tol, max_iter : float, int
        Picard stopping rule for the coefficient system.
    n_jobs : int or None
        Threads used for per-curve work; results do not depend on it.
    validate : bool
        Raise :class:`FrameValidationError` when the frame fails a bound.
    oracle : bool
        Also run the RK4 oracle and record ``oracle_gap``.
    """

    def __init__(self, frame=None, tol=1e-10, max_iter=200, n_jobs=None, validate=True, oracle=True):
        self.frame = frame
        self.tol = tol
        self.max_iter = max_iter
        self.n_jobs = n_jobs
        self.validate = validate
        self.oracle = oracle

    def fit(self, plan, y=None):
        if self.frame is None:
            raise ValueError("ParallelTransport needs a frame")
        check_positive_float(self.tol, "tol")
        check_positive_int(self.max_iter, "max_iter")
        space = plan.space
        pts = np.concatenate([space.sample_points, plan.curves.reshape(-1, space.dim)])
        self.report_ = validate_good_base(space, self.frame, pts)
        if self.validate and not self.report_.passes:
            raise FrameValidationError(
                "frame fails the good-base bounds: " + ", ".join(self.report_.failing), self.report_
            )
        self.plan_ = plan
        self.frame_ = replace(self.frame, report=self.report_)
        self.connection_ = connection_matrix(plan, self.frame_, self.n_jobs)
        return self

    def transform(self, V0):
        check_is_fitted(self, "connection_")
        return parallel_transport(self.plan_, self.frame_, V0, tol=self.tol, max_iter=self.max_iter,
                                  connection=self.connection_, n_jobs=self.n_jobs, oracle=self.oracle)

    def fit_transform(self, plan, V0):
        return self.fit(plan).transform(V0)
