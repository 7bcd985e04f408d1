import numpy as np
import pytest

from mvadjoint import adjoint as adj
from mvadjoint.euler import FlowConfig, solve_primal
from mvadjoint.geometry import BladeParams, generate_profile
from mvadjoint.grid import channel_grid, generate_grid
from mvadjoint.morph import MorphOperator

SMALL = dict(ni=65, nj=21, n_surface=25)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running campaign checks")


@pytest.fixture(scope="session")
def flow():
    return FlowConfig()


@pytest.fixture(scope="session")
def small_grid():
    prof = generate_profile(BladeParams(), SMALL["n_surface"])
    return generate_grid(prof, SMALL["ni"], SMALL["nj"])


@pytest.fixture(scope="session")
def small_primal(small_grid, flow):
    return solve_primal(small_grid, flow, raise_on_fail=True)


@pytest.fixture(scope="session")
def small_operator(small_grid):
    return MorphOperator(small_grid)


@pytest.fixture(scope="session")
def small_adjoints(small_primal):
    return {o: adj.solve_adjoint(small_primal, o, "AD") for o in ("MassFlow", "PressureLossY")}


@pytest.fixture(scope="session")
def small_maps(small_primal, small_adjoints, small_grid, small_operator):
    return {o: adj.surface_sensitivities(adj.mesh_sensitivities(small_primal, a), small_grid, small_operator)
            for o, a in small_adjoints.items()}


@pytest.fixture(scope="session")
def tiny_bump():
    return channel_grid(8, 4, bump_height=0.05)


@pytest.fixture(scope="session")
def tiny_flat():
    return channel_grid(8, 4, bump_height=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
