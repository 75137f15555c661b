import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from speclab.fem import assemble_mass, assemble_stiffness, make_dofmap
from speclab.geometry import DomainSpec, MeshParams, Mode, build_mixed_domain, build_perturbed_domain

settings.register_profile("speclab", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("speclab")

LAMBDA_1 = 2 * math.pi ** 2
LAMBDA_2 = 5 * math.pi ** 2


@pytest.fixture(scope="session")
def square_mesh():
    """Dirichlet unit square (window of width zero), uniform h = 1/16."""
    return build_mixed_domain(DomainSpec(Mode.MIXED, 0.0), MeshParams(1 / 16, 0))


@pytest.fixture(scope="session")
def square_system(square_mesh):
    dm = make_dofmap(square_mesh)
    return square_mesh, dm, assemble_stiffness(square_mesh, dm), assemble_mass(square_mesh, dm)


@pytest.fixture(scope="session")
def tube_mesh():
    return build_perturbed_domain(DomainSpec(Mode.TUBE, 0.1), MeshParams(0.02, 4, h_far=0.05))


@pytest.fixture(scope="session")
def mixed_mesh():
    return build_mixed_domain(DomainSpec(Mode.MIXED, 0.2), MeshParams(0.025, 4, h_far=0.05))


def rng(seed=0):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_speclab_acceptance", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
