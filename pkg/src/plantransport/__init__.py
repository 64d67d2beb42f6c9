"""Parallel transport of vector fields along weighted curve ensembles on chart-based spaces."""

from .banach_ode import (
    ConvergenceError,
    OperatorPath,
    SampledCurve,
    TimeGrid,
    WeightedSpace,
    bochner_integral,
    neumann_tail_bound,
    solve_integral_equation,
    solve_linear_ode,
)
from .geometry import (
    ChartSpace,
    DomainError,
    VectorField,
    cone,
    flat_plane,
    flat_space,
    flat_torus,
    orthonormal_coordinate_frame,
    round_sphere,
    two_strata_plane,
)
from .plan import (
    GeodesicError,
    TestPlan,
    build_geodesic_plan,
    compression_constant,
    latitude_circle,
    make_plan,
    segment_bundle,
    waypoint_plan,
)
from .planfields import (
    PlanField,
    Term,
    TestFieldSpec,
    convective_derivative,
    materialize,
)
from .sobolev_base import (
    build_sobolev_base,
    nonvanishing_pairing_field,
    polynomial_approximants,
)
from .transport import (
    FrameField,
    FrameValidationError,
    ParallelTransport,
    holonomy_angles,
    parallel_transport,
    transport_certificates,
    validate_good_base,
)

__version__ = "0.1.0"

__all__ = [
    "ChartSpace",
    "ConvergenceError",
    "DomainError",
    "FrameField",
    "FrameValidationError",
    "GeodesicError",
    "OperatorPath",
    "ParallelTransport",
    "PlanField",
    "SampledCurve",
    "Term",
    "TestFieldSpec",
    "TestPlan",
    "TimeGrid",
    "VectorField",
    "WeightedSpace",
    "bochner_integral",
    "build_geodesic_plan",
    "build_sobolev_base",
    "compression_constant",
    "cone",
    "convective_derivative",
    "flat_plane",
    "flat_space",
    "flat_torus",
    "holonomy_angles",
    "latitude_circle",
    "make_plan",
    "materialize",
    "neumann_tail_bound",
    "nonvanishing_pairing_field",
    "orthonormal_coordinate_frame",
    "parallel_transport",
    "polynomial_approximants",
    "round_sphere",
    "segment_bundle",
    "solve_integral_equation",
    "solve_linear_ode",
    "transport_certificates",
    "two_strata_plane",
    "validate_good_base",
    "waypoint_plan",
]
