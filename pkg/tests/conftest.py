import functools

import numpy as np
import pytest

from sthdg.benchmarks import manufactured, taylor_green
from sthdg.mesh import SpaceTimeLayout, build_face_topology, build_uniform_mesh
from sthdg.solver import SolverConfig, run_simulation
from sthdg.spaces import SlabSpace

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def make_space(n, k_s, k_t, **kw):
    mesh = build_uniform_mesh(n)
    return SlabSpace(mesh, build_face_topology(mesh), k_s, k_t, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@functools.lru_cache(maxsize=None)
def tg_run(n=8, N=8, k_s=2, k_t=1, nu=0.01, T=1.0, condense=True):
    """Taylor-Green run shared by several tests (cached per session)."""
    data = taylor_green(nu, T)
    run = run_simulation(data, SolverConfig(condense=condense), build_uniform_mesh(n),
                         SpaceTimeLayout.uniform(T, N), k_s, k_t)
    return data, run


@functools.lru_cache(maxsize=None)
def manufactured_study(k_s, k_t, levels=((2, 2), (4, 4), (8, 8), (16, 16))):
    from sthdg.verify import convergence_study
    data = manufactured(nu=0.01, T=1.0)
    return data, convergence_study(data, SolverConfig(condense=True), levels, k_s, k_t)
