import numpy as np
import pytest

from cuspflow.atlas import Discretization, SurfaceSpec
from cuspflow.geometry import hyperbolic_background_metric, make_geometry

_ACCEPTANCE: list[str] = []

ONE_END = SurfaceSpec(((0.5, 0.5),), (2.0,))
TWO_ENDS = SurfaceSpec(((0.25, 0.25), (0.75, 0.75)), (1.0, 4.0))


@pytest.fixture(scope="session")
def one_end():
    """Coarse one-end geometry: (atlas, background)."""
    return make_geometry(ONE_END, Discretization(n_core=32, n_s=64))


@pytest.fixture(scope="session")
def one_end_fine():
    return make_geometry(ONE_END, Discretization(n_core=64, n_s=128))


@pytest.fixture(scope="session")
def two_ends():
    return make_geometry(TWO_ENDS, Discretization(n_core=48, n_s=64, s_lo=0.4))


@pytest.fixture(scope="session")
def hyperbolic(one_end):
    return hyperbolic_background_metric(one_end[1])


@pytest.fixture
def rng():
    return np.random.default_rng(20261019)


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(name: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
