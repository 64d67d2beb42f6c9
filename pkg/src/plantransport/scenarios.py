"""Declarative scenarios: config validation, builtin scenarios and the run pipeline."""

import copy
import csv
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources

import jsonschema
import numpy as np
import sympy

from . import geometry
from .banach_ode import ConvergenceError
from .geometry import DomainError, VectorField, sphere_chart_point
from .plan import (
    GeodesicError,
    build_geodesic_plan,
    compression_constant,
    latitude_circle,
    segment_bundle,
    waypoint_plan,
)
from .planfields import export_norms_csv, node_norms
from .transport import (
    DegenerateFrameError,
    FrameField,
    ParallelTransport,
    holonomy_angles,
    transport_certificates,
)

__all__ = [
    "BUILTIN_SCENARIOS",
    "SCHEMA_VERSION",
    "ConfigError",
    "RunReport",
    "StageError",
    "build_frame",
    "build_plan",
    "build_space",
    "builtin_config",
    "emit_plot_data",
    "initial_vectors",
    "load_config",
    "run_config",
    "validate_config",
    "write_outputs",
]

SCHEMA_VERSION = 1

DEFAULT_THRESHOLDS = {
    "norm_drift": 1e-8,
    "isometry": 1e-8,
    "roundtrip": 1e-8,
    "oracle_gap": 1e-6,
    "weak_defect": 1e-5,
    "holonomy": 1e-3,
}


class ConfigError(ValueError):
    """The scenario config does not parse or does not validate."""


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``exit_code`` maps it to the CLI."""

    def __init__(self, stage, message, exit_code, report=None):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.exit_code = exit_code
        self.report = report


def _schema():
    text = resources.files("plantransport").joinpath("scenario_schema.json").read_text()
    return json.loads(text)


# builtin scenarios -----------------------------------------------------------

_SPHERE_BAND = [math.pi / 6, 5 * math.pi / 6]


def _flat_identity():
    ticks = [-0.6, -0.2, 0.2, 0.6]
    starts = [[x, y] for x in ticks for y in ticks]
    ends = [[x + 0.3, y + 0.15] for x, y in starts]
    return {
        "name": "flat_identity",
        "description": "16 straight segments in the flat plane with the constant orthonormal frame",
        "space": {"builder": "flat_plane", "params": {"extent": [[-1, 1], [-1, 1]], "shape": [20, 20]}},
        "plan": {"generator": "segment_bundle", "n_steps": 1000, "starts": starts, "ends": ends},
        "frame": {"builtin": "orthonormal_coordinate", "M": 2.0},
        "initial": {"kind": "components", "values": [1.0, 0.5]},
        "expected_holonomy": 0.0,
    }


def _flat_torus_bundle():
    return {
        "name": "flat_torus_bundle",
        "description": "8 random geodesics in the fundamental domain of the flat torus",
        "space": {"builder": "flat_torus", "params": {"periods": [1.0, 1.0], "shape": [20, 20]}},
        "plan": {"generator": "geodesic", "n_steps": 1000, "K": 8, "seed": 0,
                 "source": {"lo": [0.1, 0.1], "hi": [0.3, 0.3]},
                 "target": {"lo": [0.6, 0.6], "hi": [0.9, 0.9]}},
        "frame": {"builtin": "orthonormal_coordinate", "M": 2.0},
        "initial": {"kind": "frame_coefficients", "values": [0.6, 0.8]},
    }


def _sphere_latitude():
    return {
        "name": "sphere_latitude_pi3",
        "description": "latitude circle at colatitude pi/3 on the unit sphere; holonomy pi",
        "space": {"builder": "round_sphere", "params": {"radius": 1.0, "band": _SPHERE_BAND, "shape": [24, 48]}},
        "plan": {"generator": "latitude_circle", "n_steps": 2000, "colatitude": math.pi / 3},
        "frame": {"builtin": "orthonormal_coordinate", "M": 2.0},
        "initial": {"kind": "frame_coefficients", "values": [1.0, 0.0]},
        "expected_holonomy": math.pi,
    }


def _sphere_triangle():
    s = math.sqrt(0.5)
    return {
        "name": "sphere_octant_triangle",
        "description": "geodesic triangle with three right angles on the unit sphere; holonomy pi/2",
        "space": {"builder": "round_sphere",
                  "params": {"radius": 1.0, "band": _SPHERE_BAND, "shape": [24, 48], "axis": [s, -s, 0.0]}},
        "plan": {"generator": "custom_waypoints", "n_steps": 36000,
                 "embedded_waypoints": [[s, s, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [s, s, 0.0]],
                 "leg_steps": [6000, 12000, 12000, 6000]},
        "frame": {"builtin": "orthonormal_coordinate", "M": 2.0},
        "initial": {"kind": "unit_velocity"},
        "expected_holonomy": math.pi / 2,
    }


def _sphere_geodesic_bundle():
    return {
        "name": "sphere_geodesic_bundle",
        "description": "16 random great-circle arcs near the equator of the unit sphere",
        "space": {"builder": "round_sphere", "params": {"radius": 1.0, "band": _SPHERE_BAND, "shape": [24, 48]}},
        "plan": {"generator": "geodesic", "n_steps": 4000, "K": 16, "seed": 0,
                 "source": {"lo": [1.2, 0.0], "hi": [1.5, 0.4]},
                 "target": {"lo": [1.6, 1.0], "hi": [1.9, 1.5]}},
        "frame": {"builtin": "orthonormal_coordinate", "M": 2.0},
        "initial": {"kind": "frame_coefficients", "values": [0.8, -0.6]},
    }


def _cone_circle():
    angle = math.pi / 8
    return {
        "name": "cone_circle",
        "description": "circle r = 1 around the apex of a cone of half-angle pi/8; holonomy 2 pi (1 - sin(pi/8))",
        "space": {"builder": "cone", "params": {"angle": angle, "r_range": [0.5, 2.0], "shape": [20, 40]}},
        "plan": {"generator": "latitude_circle", "n_steps": 2000, "colatitude": 1.0},
        "frame": {"builtin": "orthonormal_coordinate", "M": 3.0},
        "initial": {"kind": "frame_coefficients", "values": [1.0, 0.0]},
        "expected_holonomy": 2 * math.pi * (1 - math.sin(angle)),
    }


BUILTIN_SCENARIOS = {
    "flat_identity": _flat_identity,
    "flat_torus_bundle": _flat_torus_bundle,
    "sphere_latitude_pi3": _sphere_latitude,
    "sphere_octant_triangle": _sphere_triangle,
    "sphere_geodesic_bundle": _sphere_geodesic_bundle,
    "cone_circle": _cone_circle,
}


def builtin_config(name):
    if name not in BUILTIN_SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; known: {', '.join(sorted(BUILTIN_SCENARIOS))}")
    return BUILTIN_SCENARIOS[name]()


# config handling -------------------------------------------------------------


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_config(cfg)


_PLAN_KEYS = {
    "geodesic": ("source", "target", "K"),
    "latitude_circle": ("colatitude",),
    "segment_bundle": ("starts", "ends"),
}

_SPACE_PARAMS = {
    "flat_plane": {"extent", "shape"},
    "two_strata_plane": {"extent", "shape"},
    "round_sphere": {"radius", "band", "shape", "axis"},
    "flat_torus": {"periods", "shape"},
    "cone": {"angle", "r_range", "shape"},
}


def validate_config(cfg):
    """Schema and cross-field checks; returns a config with defaults filled in."""
    try:
        jsonschema.validate(cfg, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    cfg = copy.deepcopy(cfg)
    extra = set(cfg["space"].get("params", {})) - _SPACE_PARAMS[cfg["space"]["builder"]]
    if extra:
        raise ConfigError(f"unknown parameters for {cfg['space']['builder']}: {sorted(extra)}")
    plan = cfg["plan"]
    gen = plan["generator"]
    for key in _PLAN_KEYS.get(gen, ()):
        if key not in plan:
            raise ConfigError(f"plan generator {gen!r} needs {key!r}")
    if gen == "custom_waypoints" and not ("waypoints" in plan or "embedded_waypoints" in plan):
        raise ConfigError("custom_waypoints needs 'waypoints' or 'embedded_waypoints'")
    if gen == "custom_waypoints" and "embedded_waypoints" in plan and cfg["space"]["builder"] != "round_sphere":
        raise ConfigError("embedded_waypoints are only supported on round_sphere")
    if gen == "segment_bundle" and len(plan["starts"]) != len(plan["ends"]):
        raise ConfigError("segment_bundle needs as many starts as ends")
    if cfg["initial"]["kind"] != "unit_velocity" and "values" not in cfg["initial"]:
        raise ConfigError(f"initial kind {cfg['initial']['kind']!r} needs 'values'")
    cfg.setdefault("name", "custom")
    cfg.setdefault("solver", {})
    cfg["solver"].setdefault("tol", 1e-10)
    cfg["solver"].setdefault("max_iter", 200)
    cfg["thresholds"] = {**DEFAULT_THRESHOLDS, **cfg.get("thresholds", {})}
    cfg.setdefault("expected_holonomy", None)
    cfg.setdefault("outputs", {})
    cfg["outputs"].setdefault("directory", "out")
    cfg["outputs"].setdefault("formats", ["json", "csv"])
    return cfg


# assembly --------------------------------------------------------------------


def build_space(spec):
    builder = getattr(geometry, spec["builder"])
    params = {k: (tuple(tuple(e) if isinstance(e, list) else e for e in v) if isinstance(v, list) else v)
              for k, v in spec.get("params", {}).items()}
    try:
        return builder(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot build space {spec['builder']!r}: {exc}") from exc


def build_plan(space, spec, seed=None):
    gen = spec["generator"]
    n = spec["n_steps"]
    if gen == "geodesic":
        box = lambda b: (np.array(b["lo"], float), np.array(b["hi"], float))
        s = spec.get("seed", 0) if seed is None else seed
        return build_geodesic_plan(space, box(spec["source"]), box(spec["target"]), spec["K"], seed=s, n_steps=n)
    if gen == "latitude_circle":
        return latitude_circle(space, spec["colatitude"], n, spec.get("longitude", 0.0), spec.get("turns", 1.0))
    if gen == "segment_bundle":
        return segment_bundle(space, spec["starts"], spec["ends"], n, spec.get("weights"))
    if "embedded_waypoints" in spec:
        pts, ref = [], None
        for p in spec["embedded_waypoints"]:
            q = sphere_chart_point(space, p, ref)
            ref = q[1]
            pts.append(q)
    else:
        pts = spec["waypoints"]
    return waypoint_plan(space, np.array(pts, float), n, spec.get("leg_steps"))


def _expression_field(exprs, variables, name):
    syms = sympy.symbols(variables)
    parsed = [sympy.sympify(e, locals={str(s): s for s in syms}) for e in exprs]
    free = set().union(*(p.free_symbols for p in parsed)) - set(syms)
    if free:
        raise ConfigError(f"frame expression uses unknown symbols {sorted(map(str, free))}")
    jac = sympy.Matrix(parsed).jacobian(syms)
    f_eval = sympy.lambdify(syms, parsed, "numpy")
    f_jac = [[sympy.lambdify(syms, jac[i, j], "numpy") for j in range(len(syms))] for i in range(len(parsed))]

    def _eval(x):
        x = np.asarray(x, dtype=float)
        cols = f_eval(*np.moveaxis(x, -1, 0))
        return np.stack([np.broadcast_to(c, x.shape[:-1]) for c in cols], axis=-1).astype(float)

    def _jac(x):
        x = np.asarray(x, dtype=float)
        args = np.moveaxis(x, -1, 0)
        out = np.empty(x.shape[:-1] + (len(f_jac), len(syms)))
        for i, row in enumerate(f_jac):
            for j, entry in enumerate(row):
                out[..., i, j] = np.broadcast_to(entry(*args), x.shape[:-1])
        return out

    return VectorField(_eval, _jac, name=name)


def build_frame(space, spec):
    if "builtin" in spec:
        fields = geometry.orthonormal_coordinate_frame(space)
    else:
        variables = spec.get("variables") or [f"x{i + 1}" for i in range(space.dim)]
        if len(variables) != space.dim:
            raise ConfigError(f"frame needs {space.dim} variables")
        fields = []
        for i, exprs in enumerate(spec["fields"]):
            if len(exprs) != space.dim:
                raise ConfigError(f"frame field {i + 1} needs {space.dim} components")
            try:
                fields.append(_expression_field(exprs, variables, f"w{i + 1}"))
            except (sympy.SympifyError, SyntaxError, TypeError) as exc:
                raise ConfigError(f"cannot parse frame field {i + 1}: {exc}") from exc
    return FrameField(fields, float(spec["M"]))


def initial_vectors(plan, frame, spec):
    """Initial components ``(K, dim)`` at the curve starts."""
    x0 = plan.curves[:, 0]
    kind = spec["kind"]
    if kind == "unit_velocity":
        v = plan.velocities[:, 0]
        s = plan.speeds[:, :1]
        if np.any(s == 0):
            raise ConfigError("unit_velocity needs curves with nonzero initial speed")
        return v / s
    vals = np.asarray(spec["values"], dtype=float)
    if kind == "components":
        if vals.shape != (plan.dim,):
            raise ConfigError(f"initial components need {plan.dim} values")
        return np.broadcast_to(vals, x0.shape).copy()
    if vals.shape != (frame.n,):
        raise ConfigError(f"initial frame coefficients need {frame.n} values")
    return np.einsum("i,kid->kd", vals, frame.values(x0))


# pipeline --------------------------------------------------------------------


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _wrap(angle):
    return (angle + np.pi) % (2 * np.pi) - np.pi


@dataclass
class RunReport:
    """Everything a run produces, plus the suite table that decides the exit code."""

    scenario: dict
    plan_stats: dict = field(default_factory=dict)
    good_base: dict = field(default_factory=dict)
    transport: dict = field(default_factory=dict)
    suites: dict = field(default_factory=dict)
    result: object = field(default=None, repr=False)
    angles: object = field(default=None, repr=False)

    @property
    def passed(self):
        return bool(self.suites) and all(s["passed"] for s in self.suites.values())

    def to_dict(self):
        return _clean({
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario,
            "plan": self.plan_stats,
            "good_base": self.good_base,
            "transport": self.transport,
            "suites": self.suites,
            "passed": self.passed,
        })


def _suite(value, threshold):
    return {"value": value, "threshold": threshold, "passed": bool(value is not None and value <= threshold)}


def run_config(cfg, n_jobs=None, seed=None):
    """Build, validate, transport and certify; returns a :class:`RunReport`.

    Raises :class:`StageError` for validation (exit 3) or solver (exit 4)
    failures and :class:`ConfigError` for bad configs (exit 2).
    """
    report = RunReport(scenario=copy.deepcopy(cfg))
    if seed is not None:
        report.scenario["plan"]["seed"] = seed
    space = build_space(cfg["space"])
    try:
        plan = build_plan(space, cfg["plan"], seed)
    except GeodesicError as exc:
        raise StageError("plan", str(exc), 4, report) from exc
    except DomainError as exc:
        raise ConfigError(f"plan: {exc}") from exc
    try:
        compression = compression_constant(plan)
    except ValueError:
        compression = None
    report.plan_stats = {"name": plan.name, "n_curves": plan.n_curves, "n_steps": plan.grid.n_steps,
                         "lip_constant": plan.lip_constant, "compression": compression}
    frame = build_frame(space, cfg["frame"])
    V0 = initial_vectors(plan, frame, cfg["initial"])
    est = ParallelTransport(frame, tol=cfg["solver"]["tol"], max_iter=cfg["solver"]["max_iter"],
                            n_jobs=n_jobs, validate=False)
    try:
        est.fit(plan)
    except DegenerateFrameError as exc:
        raise StageError("frame", str(exc), 3, report) from exc
    report.good_base = est.report_.to_dict()
    if not est.report_.passes:
        raise StageError("good_base", "frame fails " + ", ".join(est.report_.failing), 3, report)
    try:
        result = est.transform(V0)
        certs = transport_certificates(result, n_jobs=n_jobs)
    except (ConvergenceError, DegenerateFrameError, ValueError) as exc:
        raise StageError("transport", str(exc), 4, report) from exc
    angles = holonomy_angles(result) if frame.n >= 2 and plan.dim >= 2 else None
    diag = dict(result.diagnostics)
    diag.update(certs)
    diag["antisymmetry_defect"] = est.connection_.antisymmetry_defect()
    diag["holonomy_angles"] = None if angles is None else [float(a) for a in angles]
    report.transport = diag
    th = cfg["thresholds"]
    suites = {
        "good_base": {"value": None, "threshold": None, "passed": True},
        "norm_preservation": _suite(diag["norm_drift"], th["norm_drift"]),
        "isometry": _suite(diag["isometry_defect"], th["isometry"]),
        "roundtrip": _suite(diag["roundtrip_defect"], th["roundtrip"]),
        "oracle": _suite(diag["oracle_gap"], th["oracle_gap"]),
        "weak_derivative": _suite(diag["weak_defect"], th["weak_defect"]),
    }
    if cfg.get("expected_holonomy") is not None and angles is not None:
        err = float(np.max(np.abs(_wrap(angles - cfg["expected_holonomy"]))))
        suites["holonomy"] = _suite(err, th["holonomy"])
    report.suites = suites
    report.result = result
    report.angles = angles
    return report


def _fmt(x):
    return format(float(x), ".17g")


def emit_plot_data(result, path, angles=None):
    """Write norms.csv, traces.csv and (when given) holonomy.csv into ``path``."""
    os.makedirs(path, exist_ok=True)
    export_norms_csv(result.V, os.path.join(path, "norms.csv"))
    plan = result.plan
    V = result.V
    w = plan.weights[:, None]
    traces = []
    for i in range(result.frame.n):
        ip = plan.space.inner(plan.curves, V.values, result.connection.frame_values[:, :, i])
        traces.append(np.sort(w * ip, axis=0).sum(axis=0))
    with open(os.path.join(path, "traces.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["node", "t", "norm"] + [f"pair_w{i + 1}" for i in range(result.frame.n)])
        norms = node_norms(V)
        for t, s in enumerate(plan.grid.nodes):
            wr.writerow([t, _fmt(s), _fmt(norms[t])] + [_fmt(tr[t]) for tr in traces])
    if angles is not None:
        with open(os.path.join(path, "holonomy.csv"), "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["curve", "angle_radians"])
            for k, a in enumerate(angles):
                wr.writerow([k, _fmt(a)])


def write_g_csv(result, path):
    coeffs = result.coefficients
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["curve", "node"] + [f"g{i + 1}" for i in range(coeffs.shape[-1])])
        for k in range(coeffs.shape[0]):
            for t in range(coeffs.shape[1]):
                wr.writerow([k, t] + [_fmt(c) for c in coeffs[k, t]])


def write_outputs(report, out_dir, formats=("json", "csv")):
    os.makedirs(out_dir, exist_ok=True)
    if "json" in formats:
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    if "csv" in formats and report.result is not None:
        write_g_csv(report.result, os.path.join(out_dir, "g.csv"))
        emit_plot_data(report.result, out_dir, report.angles)
