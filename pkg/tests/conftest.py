import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from plantransport.geometry import flat_plane, round_sphere
from plantransport.plan import latitude_circle, segment_bundle

settings.register_profile(
    "repro", derandomize=True, deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repro")

SPHERE_BAND = (np.pi / 6, 5 * np.pi / 6)


@pytest.fixture(scope="session")
def flat():
    return flat_plane()


@pytest.fixture(scope="session")
def sphere():
    return round_sphere(1.0, SPHERE_BAND)


@pytest.fixture(scope="session")
def latitude_plan(sphere):
    return latitude_circle(sphere, np.pi / 3, 2000)


@pytest.fixture(scope="session")
def flat_segments(flat):
    rng = np.random.default_rng(7)
    starts = rng.uniform(-0.8, 0.0, size=(6, 2))
    ends = rng.uniform(0.0, 0.8, size=(6, 2))
    return segment_bundle(flat, starts, ends, 200, weights=rng.uniform(0.5, 2.0, 6))


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one ``PASS``/``FAIL`` line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def _record(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        lines.append(line)
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
