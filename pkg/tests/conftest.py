import numpy as np
import pytest

from dotrom.fom import MeshConfig, Placement, assemble
from dotrom.pals import PalsModel, absorption_field, absorption_jacobian


def make_system(nx, n_src=4, n_det=4, frequencies=(0.0,), extent=10.0):
    mesh = MeshConfig(nx=nx, ny=nx, domain_extent=(extent, extent))
    return assemble(mesh, Placement.uniform("top", n_src), Placement.uniform("bottom", n_det), frequencies)


def make_pals(sys, n_bumps=4):
    return PalsModel(n_bumps=n_bumps, extent=tuple(sys.mesh.domain_extent))


def random_params(pals, rng):
    q = np.empty((pals.n_bumps, 4))
    q[:, 0] = rng.uniform(0.5, 1.5, pals.n_bumps)
    q[:, 1] = rng.uniform(3.0, 8.0, pals.n_bumps)
    q[:, 2:4] = rng.uniform(0.25, 0.75, (pals.n_bumps, 2))
    return q.ravel()


def field(sys, pals, p):
    return absorption_field(pals, p, sys.mesh.node_coordinates())


def field_and_jacobian(sys, pals, p):
    return absorption_jacobian(pals, p, sys.mesh.node_coordinates())


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
