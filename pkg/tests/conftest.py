import numpy as np
import pytest

from refgroup.rng import Rng

_ACCEPTANCE = []


@pytest.fixture
def rng():
    return Rng(1234, "tests")


@pytest.fixture
def nrng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_lines():
    return _ACCEPTANCE


def assert_gradcheck(results, tol):
    worst = max(r.max_rel_error for r in results)
    assert worst < tol, {r.name: r.max_rel_error for r in results}


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
