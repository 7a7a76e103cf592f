import numpy as np
import pytest

from pdmp_reversal.reversal import derive_reversed
from pdmp_reversal.stationary import solve_stationary_grid
from pdmp_reversal.zoo import zoo_build

ZOO = ("tcp", "renewal_age", "reflected_mg1", "indep_jumps", "saturating")


class Solved:
    def __init__(self, name):
        self.name = name
        self.model = zoo_build(name)
        self.density = solve_stationary_grid(self.model)
        self._rev = None

    @property
    def rev(self):
        if self._rev is None:
            self._rev = derive_reversed(self.model, self.density)
        return self._rev


_cache = {}


def solved(name):
    if name not in _cache:
        _cache[name] = Solved(name)
    return _cache[name]


@pytest.fixture(params=ZOO)
def zoo_case(request):
    return solved(request.param)


@pytest.fixture
def tcp():
    return solved("tcp")


@pytest.fixture
def renewal():
    return solved("renewal_age")


@pytest.fixture
def mg1():
    return solved("reflected_mg1")


@pytest.fixture
def saturating():
    return solved("saturating")


@pytest.fixture
def indep():
    return solved("indep_jumps")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS, key=lambda k: int(k[1:])):
            terminalreporter.write_line(RESULTS[key])
