import numpy as np
import pytest
from hypothesis import settings

from nelson.basis import TestFunctionBasis
from nelson.catalog import gaussian_entropic_case
from nelson.cost import CostFunction
from nelson.dual import maximize_dual

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def entropic():
    """Entropic Gaussian case s(t)^2 = (1+t)^2 solved at default resolution."""
    case = gaussian_entropic_case("(1 + t)**2")
    cost = CostFunction.quadratic()
    basis = TestFunctionBasis.for_flow(case.flow)
    sol = maximize_dual(basis, case.spec, case.flow, cost)
    return case, cost, sol


@pytest.fixture(scope="session")
def frozen():
    """Frozen-variance case s(t)^2 = 1 solved at default resolution."""
    case = gaussian_entropic_case("1")
    cost = CostFunction.quadratic()
    sol = maximize_dual(TestFunctionBasis.for_flow(case.flow), case.spec, case.flow, cost)
    return case, cost, sol


@pytest.fixture(scope="session")
def small_problem():
    """Coarse basis on a mildly stressed flow; fast enough for many objective calls."""
    case = gaussian_entropic_case("1 + 0.5*t")
    basis = TestFunctionBasis.for_flow(case.flow, time_knots=5, space_knots=8)
    return case, basis


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """record(n, title, ok, detail) keeps one verdict line per acceptance criterion."""
    def record(n, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title} ({detail})"
        ACCEPTANCE_LINES[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 13):
        terminalreporter.write_line(ACCEPTANCE_LINES.get(n, f"[----] criterion {n:2d}: not run"))
