"""Chart-based discretised metric measure spaces.

A :class:`ChartSpace` bundles vectorised callbacks for the metric tensor,
Christoffel symbols and measure density on a chart, together with a finite
weighted sample of points discretising the reference measure and an ordered
list of dimensional strata. All callbacks accept arrays of points with shape
``(..., dim)``.

Christoffel arrays are indexed ``gamma[..., k, i, j]`` for the symbol
``Gamma^k_{ij}``; vector field jacobians are indexed ``jac[..., k, i]`` for
``d_i v^k``.
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_finite_array, check_positive_float

__all__ = [
    "ChartSpace",
    "DimensionProfile",
    "DomainError",
    "Stratum",
    "TangentVector",
    "VectorField",
    "cone",
    "constant_field",
    "covariant_apply",
    "covariant_derivative",
    "covariant_tensor",
    "dimension_profile",
    "fd_jacobian",
    "flat_plane",
    "flat_space",
    "flat_torus",
    "hs_norm",
    "linear_field",
    "matvec",
    "metric_inner",
    "orthonormal_coordinate_frame",
    "round_sphere",
    "sphere_chart_point",
    "two_strata_plane",
]

FD_REL_STEP = 1e-5


class DomainError(ValueError):
    """A point (or a finite-difference stencil around it) lies outside the chart domain."""


def matvec(a, v):
    """``a @ v`` over trailing axes with a fixed summation order.

    Unlike ``einsum``/``matmul`` the accumulation order does not depend on the
    size of the leading batch axes, which keeps results bit-identical when
    curves are processed in chunks or in a different order.
    """
    a = np.asarray(a, dtype=float)
    v = np.asarray(v, dtype=float)
    out = a[..., :, 0] * v[..., None, 0]
    for i in range(1, a.shape[-1]):
        out = out + a[..., :, i] * v[..., None, i]
    return out


def _bilinear(g, u, v):
    return np.sum(u * matvec(g, v), axis=-1)


def _gamma_contract(gamma, u, v):
    """``Gamma^k_{ij} u^i v^j`` with a fixed summation order."""
    d = gamma.shape[-1]
    out = np.zeros(np.broadcast_shapes(gamma.shape[:-2], u.shape[:-1] + (d,)))
    for i in range(d):
        for j in range(d):
            out = out + gamma[..., :, i, j] * (u[..., None, i] * v[..., None, j])
    return out


@dataclass(frozen=True)
class Stratum:
    """A region of the chart on which the tangent module has dimension ``label``.

    The tangent space on the stratum is spanned by the first ``label``
    coordinate vectors.
    """

    label: int
    region: Callable[[np.ndarray], np.ndarray]


def _everywhere(x):
    return np.ones(np.asarray(x).shape[:-1], dtype=bool)


@dataclass(frozen=True, eq=False)
class ChartSpace:
    """A chart-based stand-in for a metric measure space ``(X, d, m)``."""

    dim: int
    domain: Callable[[np.ndarray], np.ndarray]
    metric: Callable[[np.ndarray], np.ndarray]
    christoffel: Callable[[np.ndarray], np.ndarray]
    density: Callable[[np.ndarray], np.ndarray]
    strata: Sequence[Stratum]
    sample_points: np.ndarray
    sample_masses: np.ndarray
    name: str = "chart"
    lattice_edges: tuple | None = field(default=None, repr=False)
    embed: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = check_finite_array(self.sample_points, "sample_points", ndim=2)
        masses = check_finite_array(self.sample_masses, "sample_masses", ndim=1)
        if pts.shape[1] != self.dim or masses.shape[0] != pts.shape[0]:
            raise ValueError("sample_points / sample_masses shapes do not match dim")
        if np.any(masses <= 0):
            raise ValueError("sample masses must be positive")
        if not np.all(self.domain(pts)):
            raise DomainError("sample points must lie in the chart domain")
        object.__setattr__(self, "sample_points", pts)
        object.__setattr__(self, "sample_masses", masses)
        object.__setattr__(self, "strata", tuple(self.strata))
        if not self.strata:
            raise ValueError("at least one stratum is required")
        hits = np.stack([np.asarray(s.region(pts), dtype=bool) for s in self.strata])
        if np.any(hits.sum(axis=0) != 1):
            raise ValueError("strata must partition the sample points")

    # pointwise geometry -------------------------------------------------

    def in_domain(self, x):
        return np.asarray(self.domain(np.asarray(x, dtype=float)), dtype=bool)

    def check_domain(self, x, what="point"):
        x = np.asarray(x, dtype=float)
        if not np.all(self.in_domain(x)):
            raise DomainError(f"{what} outside the domain of chart {self.name!r}")
        return x

    def inner(self, x, u, v):
        return _bilinear(self.metric(x), np.asarray(u, float), np.asarray(v, float))

    def norm(self, x, u):
        return np.sqrt(np.maximum(self.inner(x, u, u), 0.0))

    def stratum_labels(self, x):
        x = np.asarray(x, dtype=float)
        labels = np.zeros(x.shape[:-1], dtype=int)
        for s in self.strata:
            hit = np.asarray(s.region(x), dtype=bool) & (labels == 0)
            labels[hit] = s.label
        if np.any(labels == 0):
            raise ValueError("point lies in no stratum")
        return labels

    def tangent_projector(self, x):
        """Metric-orthogonal projector onto the stratum tangent space at ``x``.

        Returns an array ``(..., dim, dim)`` acting on component vectors.
        """
        x = np.asarray(x, dtype=float)
        labels = self.stratum_labels(x)
        g = self.metric(x)
        proj = np.zeros(x.shape[:-1] + (self.dim, self.dim))
        for k in np.unique(labels):
            sel = labels == k
            gs = g[sel]
            b = np.eye(self.dim)[:, :k]
            gram = np.einsum("ia,nij,jb->nab", b, gs, b)
            inv = np.linalg.inv(gram)
            proj[sel] = np.einsum("ia,nab,jb,njl->nil", b, inv, b, gs)
        return proj

    @property
    def total_mass(self):
        return float(self.sample_masses.sum())

    @property
    def max_label(self):
        return max(s.label for s in self.strata)


@dataclass(frozen=True, eq=False)
class TangentVector:
    base: np.ndarray
    components: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "base", check_finite_array(self.base, "base", ndim=1))
        comps = check_finite_array(self.components, "components", ndim=1)
        if comps.shape != self.base.shape:
            raise ValueError("components and base must have the same dimension")
        object.__setattr__(self, "components", comps)


def fd_jacobian(func, x, domain=None):
    """Central finite-difference jacobian ``jac[..., k, i] = d_i f^k`` at ``x``.

    Uses the step ``h = 1e-5 * (1 + |x|)`` per point. Raises
    :class:`DomainError` if a stencil point leaves ``domain``.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    h = FD_REL_STEP * (1.0 + np.linalg.norm(x, axis=-1))
    cols = []
    for i in range(d):
        step = np.zeros_like(x)
        step[..., i] = h
        xp, xm = x + step, x - step
        if domain is not None and not (np.all(domain(xp)) and np.all(domain(xm))):
            raise DomainError("finite-difference stencil leaves the domain; shrink h or supply a jacobian")
        cols.append((np.asarray(func(xp)) - np.asarray(func(xm))) / (2 * h[..., None]))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True, eq=False)
class VectorField:
    """A vector field given in chart components.

    ``eval`` maps points ``(..., dim)`` to components ``(..., dim)``. When
    ``jacobian`` is omitted it is computed by central finite differences.
    ``mask`` optionally restricts the field to a region (zero outside).
    """

    eval: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    mask: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = ""

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        vals = np.asarray(self.eval(x), dtype=float)
        vals = np.broadcast_to(vals, x.shape).copy()
        if self.mask is not None:
            vals *= np.asarray(self.mask(x), dtype=float)[..., None]
        return vals

    def jac(self, x, domain=None):
        x = np.asarray(x, dtype=float)
        if self.jacobian is not None:
            j = np.asarray(self.jacobian(x), dtype=float)
            j = np.broadcast_to(j, x.shape + (x.shape[-1],)).copy()
        else:
            j = fd_jacobian(self.eval, x, domain)
        if self.mask is not None:
            j *= np.asarray(self.mask(x), dtype=float)[..., None, None]
        return j

    def __add__(self, other):
        return combine_fields([(1.0, self), (1.0, other)])

    def scaled(self, c):
        return combine_fields([(c, self)])


def combine_fields(terms, name=""):
    """Linear combination ``sum c_i v_i`` of vector fields."""
    terms = [(float(c), v) for c, v in terms]
    has_jac = all(v.jacobian is not None for _, v in terms)

    def _eval(x):
        return sum(c * v(x) for c, v in terms)

    def _jac(x):
        return sum(c * v.jac(x) for c, v in terms)

    return VectorField(_eval, _jac if has_jac else None, name=name)


def constant_field(components, name=""):
    c = check_finite_array(components, "components", ndim=1)
    d = c.shape[0]
    return VectorField(
        lambda x: np.broadcast_to(c, np.asarray(x).shape).copy(),
        lambda x: np.zeros(np.asarray(x).shape + (d,)),
        name=name,
    )


def linear_field(matrix, offset=None, name=""):
    """The affine field ``v(x) = A x + b`` with exact jacobian ``A``."""
    a = check_finite_array(matrix, "matrix", ndim=2)
    b = np.zeros(a.shape[0]) if offset is None else check_finite_array(offset, "offset", ndim=1)
    return VectorField(
        lambda x: matvec(a, np.asarray(x, float)) + b,
        lambda x: np.broadcast_to(a, np.asarray(x).shape[:-1] + a.shape).copy(),
        name=name,
    )


# covariant calculus ---------------------------------------------------------


def metric_inner(space, u, v):
    """Pointwise inner product ``u^T g(base) v`` of two tangent vectors at the same point."""
    if u.base.shape != v.base.shape or not np.array_equal(u.base, v.base):
        raise ValueError("tangent vectors have different base points")
    space.check_domain(u.base)
    return float(space.inner(u.base, u.components, v.components))


def covariant_tensor(space, v, x):
    """Components ``(nabla v)^k_i = d_i v^k + Gamma^k_{ij} v^j`` at points ``x``."""
    x = space.check_domain(x)
    jac = v.jac(x, space.in_domain)
    vals = v(x)
    gamma = space.christoffel(x)
    d = space.dim
    out = jac.copy()
    for j in range(d):
        out = out + gamma[..., :, :, j] * vals[..., None, None, j]
    return out


def covariant_apply(space, v, x, w):
    """Vectorised ``nabla_w v`` at points ``x`` for directions ``w``."""
    x = space.check_domain(x)
    jac = v.jac(x, space.in_domain)
    return matvec(jac, w) + _gamma_contract(space.christoffel(x), np.asarray(w, float), v(x))


def covariant_derivative(space, v, x, w):
    """``nabla_w v`` at ``x`` as a :class:`TangentVector`."""
    x = np.asarray(x, dtype=float)
    if not np.array_equal(w.base, x):
        raise ValueError("direction must be based at x")
    comps = covariant_apply(space, v, x, w.components)
    return TangentVector(x, comps)


def hs_norm(space, v, x):
    """Hilbert-Schmidt norm of ``nabla v`` at ``x`` (indices raised/lowered by ``g``)."""
    x = np.asarray(x, dtype=float)
    t = covariant_tensor(space, v, x)
    g = space.metric(x)
    ginv = np.linalg.inv(g)
    tgt = np.swapaxes(t, -1, -2) @ g @ t
    val = np.einsum("...ij,...ij->...", ginv, tgt)
    out = np.sqrt(np.maximum(val, 0.0))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class DimensionProfile:
    points: np.ndarray
    labels: np.ndarray
    constant: bool

    @property
    def label_set(self):
        return sorted(set(int(k) for k in self.labels))


def dimension_profile(space):
    """Label every sample point with its stratum and report whether the labels agree."""
    labels = space.stratum_labels(space.sample_points)
    return DimensionProfile(space.sample_points, labels, bool(np.all(labels == labels[0])))


# builders --------------------------------------------------------------------


def _lattice(extent, shape, density):
    edges = tuple(np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(extent, shape))
    centers = [0.5 * (e[1:] + e[:-1]) for e in edges]
    mesh = np.stack(np.meshgrid(*centers, indexing="ij"), axis=-1).reshape(-1, len(shape))
    cell = np.prod([(hi - lo) / n for (lo, hi), n in zip(extent, shape)])
    masses = cell * density(mesh)
    return mesh, masses, edges


def _flat_chart(dim):
    def metric(x):
        x = np.asarray(x)
        return np.broadcast_to(np.eye(dim), x.shape[:-1] + (dim, dim)).copy()

    def christoffel(x):
        return np.zeros(np.asarray(x).shape[:-1] + (dim, dim, dim))

    def density(x):
        return np.ones(np.asarray(x).shape[:-1])

    return metric, christoffel, density


def flat_plane(extent=((-1.0, 1.0), (-1.0, 1.0)), shape=(20, 20)):
    """Euclidean ``R^2`` with Lebesgue measure sampled on a box."""
    metric, christoffel, density = _flat_chart(2)
    pts, masses, edges = _lattice(extent, shape, density)
    return ChartSpace(
        2, _everywhere, metric, christoffel, density, [Stratum(2, _everywhere)],
        pts, masses, name="flat_plane", lattice_edges=edges,
        params={"extent": [list(e) for e in extent], "shape": list(shape)},
    )


def flat_space(dim, half_width=1.0, per_axis=3):
    """Euclidean ``R^dim`` sampled on the cube ``[-half_width, half_width]^dim``."""
    metric, christoffel, density = _flat_chart(dim)
    extent = ((-half_width, half_width),) * dim
    pts, masses, edges = _lattice(extent, (per_axis,) * dim, density)
    return ChartSpace(
        dim, _everywhere, metric, christoffel, density, [Stratum(dim, _everywhere)],
        pts, masses, name=f"flat_space_{dim}", lattice_edges=edges,
        params={"dim": dim, "half_width": half_width, "per_axis": per_axis},
    )


def flat_torus(periods=(1.0, 1.0), shape=(20, 20)):
    """Flat torus ``R^2 / (p1 Z x p2 Z)`` in its fundamental-domain chart."""
    metric, christoffel, density = _flat_chart(2)
    extent = ((0.0, periods[0]), (0.0, periods[1]))
    pts, masses, edges = _lattice(extent, shape, density)
    return ChartSpace(
        2, _everywhere, metric, christoffel, density, [Stratum(2, _everywhere)],
        pts, masses, name="flat_torus", lattice_edges=edges,
        params={"periods": list(periods), "shape": list(shape)},
    )


def two_strata_plane(extent=((-1.0, 1.0), (-1.0, 1.0)), shape=(20, 20)):
    """Flat chart whose left half ``x < 0`` is a 1-dimensional stratum."""
    metric, christoffel, density = _flat_chart(2)
    pts, masses, edges = _lattice(extent, shape, density)
    strata = [Stratum(1, lambda x: np.asarray(x)[..., 0] < 0),
              Stratum(2, lambda x: np.asarray(x)[..., 0] >= 0)]
    return ChartSpace(
        2, _everywhere, metric, christoffel, density, strata, pts, masses,
        name="two_strata_plane", lattice_edges=edges,
        params={"extent": [list(e) for e in extent], "shape": list(shape)},
    )


def _rotation_to(axis):
    """Orthogonal matrix sending ``e_z`` to the unit vector ``axis``."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = helper - a * (helper @ a)
    u /= np.linalg.norm(u)
    v = np.cross(a, u)
    return np.column_stack([u, v, a])


def round_sphere(radius=1.0, band=(0.05, np.pi - 0.05), shape=(24, 48), axis=(0.0, 0.0, 1.0)):
    """Round sphere of the given radius in polar coordinates ``(theta, phi)``.

    ``theta`` is measured from ``axis``; the chart domain is ``0 < theta < pi``
    and the measure is sampled on the colatitude band ``band``.
    """
    r = check_positive_float(radius, "radius")
    rot = _rotation_to(axis)
    r2 = r * r

    def domain(x):
        x = np.asarray(x)
        return (x[..., 0] > 0) & (x[..., 0] < np.pi) & np.all(np.isfinite(x), axis=-1)

    def metric(x):
        th = np.asarray(x)[..., 0]
        g = np.zeros(th.shape + (2, 2))
        g[..., 0, 0] = r2
        g[..., 1, 1] = r2 * np.sin(th) ** 2
        return g

    def christoffel(x):
        th = np.asarray(x)[..., 0]
        gam = np.zeros(th.shape + (2, 2, 2))
        gam[..., 0, 1, 1] = -np.sin(th) * np.cos(th)
        cot = np.cos(th) / np.sin(th)
        gam[..., 1, 0, 1] = cot
        gam[..., 1, 1, 0] = cot
        return gam

    def density(x):
        return r2 * np.sin(np.asarray(x)[..., 0])

    def embed(x):
        x = np.asarray(x, dtype=float)
        th, ph = x[..., 0], x[..., 1]
        local = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)
        return r * local @ rot.T

    extent = (tuple(band), (0.0, 2 * np.pi))
    pts, masses, edges = _lattice(extent, shape, density)
    space = ChartSpace(
        2, domain, metric, christoffel, density, [Stratum(2, _everywhere)],
        pts, masses, name="round_sphere", lattice_edges=edges, embed=embed,
        params={"radius": r, "band": list(band), "shape": list(shape),
                "axis": list(axis), "rotation": rot},
    )
    return space


def sphere_chart_point(space, p, phi_ref=None):
    """Chart coordinates of the embedded point ``p`` on a :func:`round_sphere` space.

    ``phi_ref`` selects the branch of the longitude closest to it.
    """
    q = space.params["rotation"].T @ (np.asarray(p, dtype=float) / np.linalg.norm(p))
    th = float(np.arccos(np.clip(q[2], -1.0, 1.0)))
    ph = float(np.arctan2(q[1], q[0]))
    if phi_ref is not None:
        ph += 2 * np.pi * np.round((phi_ref - ph) / (2 * np.pi))
    return np.array([th, ph])


def cone(angle=np.pi / 6, r_range=(0.5, 2.0), shape=(20, 40)):
    """Flat cone of half-angle ``angle`` in polar coordinates ``(r, phi)``.

    The metric is ``dr^2 + r^2 sin(angle)^2 dphi^2``; its holonomy around the
    apex is ``2 pi (1 - sin(angle))``.
    """
    s2 = np.sin(angle) ** 2

    def domain(x):
        x = np.asarray(x)
        return (x[..., 0] > 0) & np.all(np.isfinite(x), axis=-1)

    def metric(x):
        rr = np.asarray(x)[..., 0]
        g = np.zeros(rr.shape + (2, 2))
        g[..., 0, 0] = 1.0
        g[..., 1, 1] = rr * rr * s2
        return g

    def christoffel(x):
        rr = np.asarray(x)[..., 0]
        gam = np.zeros(rr.shape + (2, 2, 2))
        gam[..., 0, 1, 1] = -rr * s2
        gam[..., 1, 0, 1] = 1.0 / rr
        gam[..., 1, 1, 0] = 1.0 / rr
        return gam

    def density(x):
        return np.asarray(x)[..., 0] * np.sin(angle)

    extent = (tuple(r_range), (0.0, 2 * np.pi))
    pts, masses, edges = _lattice(extent, shape, density)
    return ChartSpace(
        2, domain, metric, christoffel, density, [Stratum(2, _everywhere)],
        pts, masses, name="cone", lattice_edges=edges,
        params={"angle": float(angle), "r_range": list(r_range), "shape": list(shape)},
    )


def orthonormal_coordinate_frame(space):
    """Fields ``e_i = d_i / sqrt(g_ii)`` for a chart with diagonal metric."""
    g = space.metric(space.sample_points)
    off = g - np.einsum("...ii->...i", g)[..., None] * np.eye(space.dim)
    if np.max(np.abs(off)) > 1e-12:
        raise ValueError("orthonormal_coordinate_frame needs a diagonal metric")
    fields = []
    for i in range(space.dim):
        def _eval(x, i=i):
            x = np.asarray(x, dtype=float)
            out = np.zeros(x.shape)
            out[..., i] = 1.0 / np.sqrt(space.metric(x)[..., i, i])
            return out
        fields.append(VectorField(_eval, name=f"e{i + 1}"))
    return fields
