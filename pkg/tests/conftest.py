import time

import numpy as np
import pytest

from thermoplast import scenarios
from thermoplast.stepper import SolverOptions, run

ACCEPTANCE_LINES = []


def record_acceptance(number: int, name: str, passed: bool, detail: str) -> str:
    line = f"criterion {number} {name}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def shear_trajectory(n=16, tau=1e-3, T=1.0, **kw):
    sc = scenarios.shear2d(n=n, tau=tau, T=T, **kw)
    return run(sc.layout, sc.material, sc.initial, sc.loads, sc.T, sc.tau, SolverOptions())


@pytest.fixture(scope="session")
def shear_run():
    """Coupled shear scenario of the acceptance suite (16x16, tau = 1e-3, T = 1)."""
    start = time.perf_counter()
    traj = shear_trajectory()
    traj.wall_time = time.perf_counter() - start
    return traj


@pytest.fixture(scope="session")
def small_shear_run():
    return shear_trajectory(n=4, tau=1e-2, T=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ode_reference():
    """Scalar ODE solution of the homogeneous shear ramp at T = 1 (RK4, step 1e-5)."""
    from oracles import shear_ode

    return shear_ode(T=1.0, n_steps=100_000)


def single_element_trajectory(tau, T=1.0, **kw):
    sc = scenarios.single_element(tau=tau, T=T)
    opts = SolverOptions(**kw)
    return run(sc.layout, sc.material, sc.initial, sc.loads, sc.T, sc.tau, opts)


def relative_errors(traj, ref):
    """Relative (e, p, theta) errors at the final node against an ODE reference."""
    e_ref, p_ref, th_ref = ref
    sq = np.sqrt(2.0)
    to_mandel = lambda m: np.array([m[0][0], m[1][1], sq * m[0][1]])
    out = []
    for got, want in ((traj.e[-1], to_mandel(e_ref)), (traj.p[-1], to_mandel(p_ref))):
        out.append(float(np.max(np.linalg.norm(got - want, axis=1)) / np.linalg.norm(want)))
    out.append(float(np.max(np.abs(traj.theta[-1] - th_ref)) / abs(th_ref)))
    return out
