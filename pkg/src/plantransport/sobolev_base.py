"""Greedy series with a nowhere-vanishing pairing, and the recursive Sobolev base.

Everything is evaluated on the finite sample of the reference measure, so
"almost everywhere" statements become statements at every sample point and
the coverage of the support is reached after finitely many terms.
"""

import json
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_positive_float
from .geometry import VectorField, _bilinear, combine_fields, hs_norm

__all__ = [
    "ApproximantSequence",
    "CoverageStalled",
    "PairingCertificate",
    "SpanFull",
    "build_sobolev_base",
    "nonvanishing_pairing_field",
    "normalizer",
    "orthogonal_witness",
    "polynomial_approximants",
    "stratum_gram_determinants",
]

ROUNDOFF = 64 * np.finfo(float).eps
MAX_NUDGES = 60


class CoverageStalled(RuntimeError):
    """The approximants ran out before the pairing covered the support."""

    def __init__(self, message, coverage=None, target=None):
        super().__init__(message)
        self.coverage = coverage
        self.target = target


class SpanFull(ValueError):
    """The given fields already span the tangent space at some point of the region."""


def normalizer(space, w):
    """``sup |w| + (int |w|^2 + |nabla w|_HS^2 dm)^(1/2)`` over the sample points."""
    x = space.sample_points
    norms = space.norm(x, w(x))
    hs = np.atleast_1d(hs_norm(space, w, x))
    sobolev = np.sqrt(np.sum(space.sample_masses * (norms ** 2 + hs ** 2)))
    return float(np.max(norms) + sobolev)


@dataclass(frozen=True, eq=False)
class ApproximantSequence:
    """Smooth fields meant to approach a target in weighted L2, with their normalizers."""

    fields: Sequence[VectorField]
    alpha: np.ndarray

    @classmethod
    def from_fields(cls, space, fields):
        fields = tuple(fields)
        alpha = np.array([normalizer(space, w) for w in fields])
        if np.any(alpha <= 0):
            raise ValueError("approximants must not vanish identically")
        return cls(fields, alpha)

    def __len__(self):
        return len(self.fields)


@dataclass
class PairingCertificate:
    """Coefficient sequences and coverage record of one greedy series."""

    beta: list[float] = field(default_factory=list)
    gamma: list[float] = field(default_factory=list)
    coverage: list[int] = field(default_factory=list)
    support_size: int = 0
    min_pairing: float | None = None
    terms: np.ndarray | None = field(default=None, repr=False)

    @property
    def gamma_last(self):
        return self.gamma[-1] if self.gamma else None

    @property
    def vacuous(self):
        return self.support_size == 0

    def beta_bound_ok(self):
        """``beta_1 = 1`` and ``beta_i <= 3^(1 - i)``."""
        b = np.asarray(self.beta)
        return bool(b[0] == 1.0 and np.all(b <= 3.0 ** (1 - np.arange(1, len(b) + 1))))

    def recursion_ok(self):
        """``3 beta_{n+1} <= gamma_{n+1} <= beta_n`` for every recorded step."""
        b, g = self.beta, self.gamma
        return all(3 * b[n + 1] <= g[n] <= b[n] for n in range(len(b) - 1)) and (
            not g or g[-1] <= b[len(g) - 1]
        )

    def tail_bounds(self):
        """Worst ``|sum_{m > n} term_m| / beta_{n+1}`` per ``n`` (must be ``<= 3/2``)."""
        if self.terms is None or len(self.beta) < 2:
            return []
        out = []
        for n in range(1, len(self.beta)):
            tail = np.abs(self.terms[n:].sum(axis=0))
            out.append(float(np.max(tail)) / self.beta[n] if tail.size else 0.0)
        return out

    def to_dict(self):
        return {
            "beta": list(self.beta),
            "gamma": list(self.gamma),
            "coverage": list(self.coverage),
            "support_size": self.support_size,
            "min_pairing": self.min_pairing,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _clamped_target(space, w, x):
    vals = w(x)
    norms = space.norm(x, vals)
    return vals / np.maximum(1.0, norms)[:, None], norms


def nonvanishing_pairing_field(space, w, approx, eps=1e-6):
    """Build ``v = sum_i (beta_i / alpha_i) w_i`` with ``<v, w> != 0`` on ``{|w| > eps}``.

    Terms are added until every support sample point has a pairing bounded
    away from zero; the margin ``|<v, w>| >= gamma_last / 2`` holds at every
    support point. Returns ``(v, certificate)``.

    Raises
    ------
    CoverageStalled
        If the approximants are exhausted before the support is covered.
    """
    eps = check_positive_float(eps, "eps")
    if len(approx) == 0:
        raise ValueError("need at least one approximant")
    x = space.sample_points
    target, raw_norms = _clamped_target(space, w, x)
    support = raw_norms > eps
    cert = PairingCertificate(support_size=int(support.sum()))
    g = space.metric(x)
    pairs = np.stack([_bilinear(g, f(x), target) / a for f, a in zip(approx.fields, approx.alpha)])

    beta = [1.0]
    s = beta[0] * pairs[0]
    # a partial sum counts as zero when it is within round-off of the magnitudes it sums
    mag = np.abs(s)

    def _nonzero(val, scale):
        return np.abs(val) > np.maximum(ROUNDOFF * scale, np.finfo(float).tiny)

    n = 0
    while True:
        if cert.vacuous:
            break
        hit = support & _nonzero(s, mag)
        cert.coverage.append(int(hit.sum()))
        if hit.any():
            floor = float(np.min(np.abs(s[hit])))
            j = max(0, int(np.ceil(np.log2(beta[n] / floor)))) if floor < beta[n] else 0
            gamma = beta[n] * 2.0 ** (-j)
            while gamma > floor:
                gamma *= 0.5
        else:
            gamma = None
        if hit.sum() == support.sum():
            cert.gamma.append(gamma)
            break
        if n + 1 >= len(approx):
            raise CoverageStalled(
                f"approximants exhausted with {int(hit.sum())} of {int(support.sum())} support points covered",
                coverage=int(hit.sum()), target=int(support.sum()),
            )
        if gamma is None:
            gamma = beta[n]
        cert.gamma.append(gamma)
        b = gamma / 6.0
        nxt = pairs[n + 1]
        # only already covered points can be cancelled by the new term
        live = support & _nonzero(s, mag)
        for _ in range(MAX_NUDGES):
            if np.all(_nonzero(s + b * nxt, mag + b * np.abs(nxt))[live]):
                break
            b *= 0.5
        else:
            raise CoverageStalled("could not avoid a zero-pairing collision", coverage=int(hit.sum()),
                                  target=int(support.sum()))
        beta.append(b)
        s = s + b * nxt
        mag = mag + b * np.abs(nxt)
        n += 1

    cert.beta = beta
    cert.terms = np.stack([beta[i] * pairs[i] for i in range(len(beta))])
    if not cert.vacuous:
        cert.min_pairing = float(np.min(np.abs(s[support])))
    used = [(beta[i] / approx.alpha[i], approx.fields[i]) for i in range(len(beta))]
    v = combine_fields(used, name="pairing_field")
    return v, cert


def _region_mask(space, region, x):
    if region is None:
        return np.ones(x.shape[:-1], dtype=bool)
    if callable(region):
        return np.asarray(region(x), dtype=bool)
    return np.asarray(region, dtype=bool)


def _project(space, x, vals):
    proj = space.tangent_projector(x)
    return np.einsum("...ij,...j->...i", proj, vals)


def _residual(space, x, g, basis_vals, probe):
    r = probe
    for _ in range(2):
        for e in basis_vals:
            ee = _bilinear(g, e, e)
            coef = np.where(ee > 0, _bilinear(g, e, r) / np.where(ee > 0, ee, 1.0), 0.0)
            r = r - coef[..., None] * e
    return r


def _orthonormalise(space, x, g, vals):
    basis = []
    for v in vals:
        r = _residual(space, x, g, basis, v)
        nr = np.sqrt(np.maximum(_bilinear(g, r, r), 0.0))
        scale = np.where(nr > 1e-12 * (1.0 + np.sqrt(np.maximum(_bilinear(g, v, v), 0.0))), nr, np.inf)
        basis.append(r / scale[..., None])
    return basis


def orthogonal_witness(space, fields, region=None, min_residual=1e-3):
    """A field orthogonal to ``fields`` with ``0 < |w| <= 1`` on ``region``.

    At each point the coordinate probes are projected onto the stratum
    tangent space and Gram-Schmidt-reduced against the given fields. One
    probe is used everywhere when its worst residual on the region exceeds
    ``min_residual``; otherwise each point takes its largest residual. The
    result is zero outside the region and scaled by ``max(1, sup|w|)``.

    Raises
    ------
    SpanFull
        If the fields already span the tangent space at some region sample point.
    """
    fields = list(fields)
    d = space.dim
    probes = np.eye(d)

    def _raw(x, choice=None):
        x = np.asarray(x, dtype=float)
        g = space.metric(x)
        basis = _orthonormalise(space, x, g, [_project(space, x, f(x)) for f in fields])
        res = []
        for j in range(d):
            p = _project(space, x, np.broadcast_to(probes[j], x.shape))
            res.append(_residual(space, x, g, basis, p))
        res = np.stack(res)
        norms = np.sqrt(np.maximum(_bilinear(g, res, res), 0.0))
        return res, norms

    xs = space.sample_points
    inside = _region_mask(space, region, xs)
    if not inside.any():
        raise ValueError("region contains no sample points")
    res, norms = _raw(xs)
    worst_per_probe = norms[:, inside].min(axis=1)
    best = int(np.argmax(worst_per_probe))
    if np.max(norms[:, inside], axis=0).min() <= 1e-10:
        raise SpanFull("span full: the fields already span the tangent space in the region")
    choice = best if worst_per_probe[best] > min_residual else None

    def _select(res, norms):
        if choice is not None:
            return res[choice]
        idx = np.argmax(norms, axis=0)
        return np.take_along_axis(res, idx[None, ..., None], axis=0)[0]

    sup = float(np.max(space.norm(xs[inside], _select(res, norms)[inside])))
    scale = max(1.0, sup)

    def _eval(x):
        x = np.asarray(x, dtype=float)
        r, nr = _raw(x)
        out = _select(r, nr) / scale
        return out * _region_mask(space, region, x)[..., None]

    return VectorField(_eval, name="witness")


def _monomial_exponents(dim, degree):
    exps = [e for e in np.ndindex(*(degree + 1,) * dim) if sum(e) <= degree]
    return np.array(sorted(exps, key=lambda e: (sum(e), tuple(-c for c in e))))


def _poly_field(coef, exps, center, half):
    def _eval(x):
        u = (np.asarray(x, dtype=float) - center) / half
        basis = np.prod(u[..., None, :] ** exps, axis=-1)
        return basis @ coef

    def _jac(x):
        u = (np.asarray(x, dtype=float) - center) / half
        cols = []
        for i in range(exps.shape[1]):
            e = exps.copy()
            fac = e[:, i].astype(float)
            e[:, i] = np.maximum(e[:, i] - 1, 0)
            db = fac * np.prod(u[..., None, :] ** e, axis=-1) / half[i]
            cols.append(db @ coef)
        return np.stack(cols, axis=-1)

    return VectorField(_eval, _jac, name="poly")


def polynomial_approximants(space, w, degrees=range(9)):
    """Mass-weighted least-squares polynomial fits of ``w`` of increasing degree."""
    x = space.sample_points
    lo, hi = x.min(axis=0), x.max(axis=0)
    center = 0.5 * (lo + hi)
    half = np.where(hi > lo, 0.5 * (hi - lo), 1.0)
    target = w(x)
    sw = np.sqrt(space.sample_masses)[:, None]
    fields = []
    for deg in degrees:
        exps = _monomial_exponents(space.dim, deg)
        u = (x - center) / half
        basis = np.prod(u[:, None, :] ** exps, axis=-1)
        coef, *_ = np.linalg.lstsq(sw * basis, sw * target, rcond=None)
        f = _poly_field(coef, exps, center, half)
        if np.max(space.norm(x, f(x))) > 0:
            fields.append(f)
    return ApproximantSequence.from_fields(space, fields)


def build_sobolev_base(space, approximants: Callable = polynomial_approximants, eps=1e-6,
                       return_certificates=False):
    """Recursively build ``v_1..v_n`` independent on every union of strata of dimension ``>= n``.

    ``approximants(space, target)`` must return an :class:`ApproximantSequence`
    of smooth fields approaching ``target``.
    """
    top = space.max_label
    base, certs = [], []
    for n in range(top):
        def region(x, n=n):
            return space.stratum_labels(x) > n

        witness = orthogonal_witness(space, base, region)
        seq = approximants(space, witness)
        v, cert = nonvanishing_pairing_field(space, witness, seq, eps)
        base.append(v)
        certs.append(cert)
    return (base, certs) if return_certificates else base


def stratum_gram_determinants(space, fields):
    """Per-point determinant of the Gram matrix of the first ``n`` fields, projected to the stratum.

    Returns ``{n: dets}`` over the sample points of strata of dimension ``>= n``.
    """
    x = space.sample_points
    labels = space.stratum_labels(x)
    g = space.metric(x)
    vals = [_project(space, x, f(x)) for f in fields]
    out = {}
    for n in range(1, len(fields) + 1):
        sel = labels >= n
        if not sel.any():
            continue
        gram = np.empty((int(sel.sum()), n, n))
        for i in range(n):
            for j in range(n):
                gram[:, i, j] = _bilinear(g[sel], vals[i][sel], vals[j][sel])
        out[n] = np.linalg.det(gram)
    return out
