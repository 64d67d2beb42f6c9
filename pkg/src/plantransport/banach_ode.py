"""Time-discretised calculus for curves valued in a weighted inner-product space.

Curves live on a uniform grid over ``[0, 1]``. Integrals use the trapezoidal
rule and derivatives use second-order finite differences, so the integral
equation solver below is a Picard iteration for the trapezoidal Volterra
scheme.
"""

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from ._validation import (
    check_finite_array,
    check_positive_float,
    check_positive_int,
    check_weights,
    stable_sum,
)

__all__ = [
    "ConvergenceError",
    "OperatorPath",
    "PicardInfo",
    "SampledCurve",
    "TimeGrid",
    "WeightedSpace",
    "bochner_integral",
    "cumulative_integral",
    "neumann_tail_bound",
    "solve_integral_equation",
    "solve_linear_ode",
    "sup_norm",
    "weak_derivative",
]


class ConvergenceError(RuntimeError):
    """Raised when a Picard iteration does not reach its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k / n_steps`` on ``[0, 1]``."""

    n_steps: int

    def __post_init__(self):
        check_positive_int(self.n_steps, "n_steps")

    @property
    def nodes(self):
        return np.linspace(0.0, 1.0, self.n_steps + 1)

    @property
    def dt(self):
        return 1.0 / self.n_steps

    @property
    def n_nodes(self):
        return self.n_steps + 1

    def __len__(self):
        return self.n_steps + 1


@dataclass(frozen=True, eq=False)
class WeightedSpace:
    """``R^dim`` with the inner product ``<u, v> = sum_i weights_i u_i v_i``."""

    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", check_weights(self.weights))

    @classmethod
    def euclidean(cls, dim):
        return cls(np.ones(check_positive_int(dim, "dim")))

    @property
    def dim(self):
        return self.weights.shape[0]

    def inner(self, u, v):
        return stable_sum(self.weights * np.asarray(u) * np.asarray(v), axis=-1)

    def norm(self, u):
        return np.sqrt(self.inner(u, u))


@dataclass(frozen=True, eq=False)
class SampledCurve:
    """Values of a curve at the nodes of ``grid``; ``values`` has shape ``(n_nodes, dim)``."""

    grid: TimeGrid
    values: np.ndarray
    space: WeightedSpace | None = None

    def __post_init__(self):
        values = check_finite_array(self.values, "values")
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] != self.grid.n_nodes:
            raise ValueError(
                f"values must have shape ({self.grid.n_nodes}, dim), got {values.shape}"
            )
        object.__setattr__(self, "values", values)
        if self.space is None:
            object.__setattr__(self, "space", WeightedSpace.euclidean(values.shape[1]))
        elif self.space.dim != values.shape[1]:
            raise ValueError("space dimension does not match curve values")

    @property
    def dim(self):
        return self.values.shape[1]

    def norms(self):
        """Pointwise norms ``||y(t_k)||`` at every node."""
        return self.space.norm(self.values)

    def sup_norm(self):
        return float(np.max(self.norms()))

    def with_values(self, values):
        return SampledCurve(self.grid, values, self.space)


@dataclass(frozen=True, eq=False)
class OperatorPath:
    """A time-indexed family of linear maps ``lam(t_k)`` with a uniform norm bound.

    ``apply(k, v)`` returns ``lam(t_k) v``. ``apply_batch`` may be supplied to
    apply every node at once to an ``(n_nodes, dim)`` array; otherwise the
    nodes are looped over.

    A piecewise continuous path lists its jump nodes in ``breaks``; there
    ``apply`` gives the right limit and ``apply_left(k, v)`` the left limit,
    and integrals are taken piece by piece.
    """

    grid: TimeGrid
    apply: Callable[[int, np.ndarray], np.ndarray]
    bound_c: float
    apply_batch: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)
    breaks: tuple = ()
    apply_left: Callable[[int, np.ndarray], np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(
            self, "bound_c", check_positive_float(self.bound_c, "bound_c", strict=False)
        )
        object.__setattr__(self, "breaks", tuple(int(b) for b in self.breaks))
        if any(not 0 < b < self.grid.n_steps for b in self.breaks):
            raise ValueError("breaks must be interior nodes")
        if self.breaks and self.apply_left is None:
            raise ValueError("a path with breaks needs apply_left")

    def __call__(self, k, v):
        return self.apply(k, v)

    def apply_nodes(self, values):
        values = np.asarray(values, dtype=float)
        if self.apply_batch is not None:
            return np.asarray(self.apply_batch(values), dtype=float)
        return np.stack([self.apply(k, values[k]) for k in range(values.shape[0])])

    @classmethod
    def zero(cls, grid, dim):
        return cls(grid, lambda k, v: np.zeros_like(v), 0.0,
                   apply_batch=lambda y: np.zeros_like(y))

    @classmethod
    def from_matrices(cls, grid, matrices, bound_c=None, space=None):
        """Build a path from an array of matrices, one per node (or one shared).

        If ``bound_c`` is omitted, the exact operator norm with respect to the
        weighted inner product of ``space`` is used.
        """
        mats = check_finite_array(matrices, "matrices")
        if mats.ndim == 2:
            mats = np.broadcast_to(mats, (grid.n_nodes,) + mats.shape)
        if mats.ndim != 3 or mats.shape[0] != grid.n_nodes or mats.shape[1] != mats.shape[2]:
            raise ValueError("matrices must have shape (n_nodes, dim, dim) or (dim, dim)")
        if bound_c is None:
            w = np.ones(mats.shape[1]) if space is None else space.weights
            s = np.sqrt(w)
            scaled = s[None, :, None] * mats / s[None, None, :]
            bound_c = float(np.max(np.linalg.norm(scaled, ord=2, axis=(1, 2))))
        return cls(
            grid,
            lambda k, v: mats[k] @ v,
            bound_c,
            apply_batch=lambda y: np.einsum("kij,kj->ki", mats, y),
        )

    def check_bound(self, space, n_probes=32, seed=0):
        """Largest observed ``||lam(t_k) v|| / ||v||`` over random probes.

        Raises ``ValueError`` if any probe exceeds ``bound_c`` beyond round-off.
        """
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_probes):
            v = rng.standard_normal((self.grid.n_nodes, space.dim))
            out = self.apply_nodes(v)
            ratio = float(np.max(space.norm(out) / space.norm(v)))
            worst = max(worst, ratio)
        if worst > self.bound_c * (1 + 1e-9) + 1e-300:
            raise ValueError(f"operator norm {worst:.6g} exceeds bound_c={self.bound_c:.6g}")
        return worst


@dataclass(frozen=True)
class PicardInfo:
    iterations: int
    residual: float


def _check_index(k, grid, name):
    if not 0 <= k < grid.n_nodes:
        raise IndexError(f"{name}={k} outside 0..{grid.n_steps}")


def sup_norm(curve):
    return curve.sup_norm()


def bochner_integral(y, a=0, b=None):
    """Trapezoidal integral of ``y`` over ``[t_a, t_b]``."""
    if b is None:
        b = y.grid.n_steps
    _check_index(a, y.grid, "a")
    _check_index(b, y.grid, "b")
    if a > b:
        raise ValueError("bochner_integral requires a <= b")
    if a == b:
        return np.zeros(y.dim)
    seg = y.values[a:b + 1]
    return y.grid.dt * (0.5 * seg[0] + seg[1:-1].sum(axis=0) + 0.5 * seg[-1])


def _cumtrapz(values, dt, right_ends=None):
    """Running trapezoid; ``right_ends`` overrides the samples used as interval right ends."""
    ends = values[1:] if right_ends is None else right_ends[1:]
    out = np.zeros_like(values)
    np.cumsum(0.5 * dt * (ends + values[:-1]), axis=0, out=out[1:])
    return out


def _running_integral(lam, values):
    """``t_k -> int_0^{t_k} lam(s) y(s) ds`` with one-sided limits at breaks."""
    applied = lam.apply_nodes(values)
    if not lam.breaks:
        return _cumtrapz(applied, lam.grid.dt)
    left = applied.copy()
    for b in lam.breaks:
        left[b] = lam.apply_left(b, values[b])
    return _cumtrapz(applied, lam.grid.dt, left)


def cumulative_integral(y):
    """Running integral ``t_k -> int_0^{t_k} y``, the antiderivative vanishing at 0."""
    return y.with_values(_cumtrapz(y.values, y.grid.dt))


def weak_derivative(y):
    """Second-order finite-difference derivative on the closed interval.

    Interior nodes use central differences, the two endpoints one-sided
    second-order stencils.
    """
    if y.grid.n_nodes < 3:
        raise ValueError("weak_derivative needs a grid with at least 3 nodes")
    return y.with_values(np.gradient(y.values, y.grid.dt, axis=0, edge_order=2))


def _check_shared_grid(z, lam):
    if z.grid != lam.grid:
        raise ValueError("curve and operator path must share the same time grid")


def solve_integral_equation(z, lam, tol=1e-10, max_iter=200, return_info=False):
    """Solve ``y(t) = z(t) + int_0^t lam(s) y(s) ds`` by Picard iteration.

    Starting from ``y = z``, iterates ``y <- z + Lambda y`` until the sup-norm
    change between iterates drops below ``tol``. The returned curve is the
    last iterate whose residual ``||y - z - Lambda y||`` was measured below
    ``tol``.

    Raises
    ------
    ValueError
        If the grid is too coarse for the bound (``bound_c * dt / 2 >= 1``),
        in which case the trapezoidal fixed point is not contractive.
    ConvergenceError
        If ``max_iter`` iterations do not reach ``tol``.
    """
    _check_shared_grid(z, lam)
    tol = check_positive_float(tol, "tol")
    max_iter = check_positive_int(max_iter, "max_iter")
    dt = z.grid.dt
    if lam.bound_c * dt / 2 >= 1:
        raise ValueError(
            f"grid too coarse for bound_c={lam.bound_c:.4g}: need n_steps > {lam.bound_c / 2:.4g}"
        )
    space = z.space
    y = z.values.copy()
    residual = np.inf
    for it in range(1, max_iter + 1):
        y_next = z.values + _running_integral(lam, y)
        residual = float(np.max(space.norm(y_next - y)))
        if not np.isfinite(residual):
            break
        if residual < tol:
            out = z.with_values(y)
            return (out, PicardInfo(it, residual)) if return_info else out
        y = y_next
    raise ConvergenceError(
        f"Picard iteration did not converge in {max_iter} steps (residual {residual:.3e})",
        residual=residual,
        iterations=max_iter,
    )


def solve_linear_ode(y0, lam, tol=1e-10, max_iter=200, space=None, return_info=False):
    """Solve ``y' = lam(t) y`` with ``y(0) = y0`` as the integral equation with constant ``z``."""
    y0 = check_finite_array(y0, "y0", ndim=1)
    z = SampledCurve(lam.grid, np.broadcast_to(y0, (lam.grid.n_nodes, y0.shape[0])).copy(), space)
    return solve_integral_equation(z, lam, tol=tol, max_iter=max_iter, return_info=return_info)


def integral_operator(lam, curve):
    """Apply ``Lambda y(t) = int_0^t lam(s) y(s) ds`` to ``curve``."""
    _check_shared_grid(curve, lam)
    return curve.with_values(_running_integral(lam, curve.values))


def neumann_tail_bound(lam, n, space=None, n_probes=24, seed=0):
    """Empirical estimate of ``||Lambda^n||`` on the sup-normed curve space.

    Applies ``Lambda`` ``n`` times to a basket of random curves with sup-norm 1
    (half constant in time, half rough) and returns the largest output sup-norm.
    """
    n = check_positive_int(n, "n")
    if space is None:
        raise ValueError("neumann_tail_bound needs the weighted space the path acts on")
    grid = lam.grid
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in range(n_probes):
        if p % 2 == 0:
            v = rng.standard_normal(space.dim)
            vals = np.broadcast_to(v, (grid.n_nodes, space.dim)).copy()
        else:
            vals = rng.standard_normal((grid.n_nodes, space.dim))
        vals /= np.max(space.norm(vals))
        curve = SampledCurve(grid, vals, space)
        for _ in range(n):
            curve = integral_operator(lam, curve)
        worst = max(worst, curve.sup_norm())
    return worst
