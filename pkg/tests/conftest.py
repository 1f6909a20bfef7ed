import numpy as np
import pytest

import acceptance_report
from meshsplat.synthetic import mini_biped, two_triangle_mesh, uv_sphere_mesh, zigzag_chain_mesh


def pytest_terminal_summary(terminalreporter):
    lines = acceptance_report.summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def biped():
    return mini_biped()


@pytest.fixture(scope="session")
def chain_mesh():
    return zigzag_chain_mesh()


@pytest.fixture(scope="session")
def sphere_mesh():
    return uv_sphere_mesh(rings=8, sectors=12)


@pytest.fixture
def tiny_mesh():
    return two_triangle_mesh()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
