import numpy as np
import pytest

from dnflow.discretization import Grid, VectorField
from dnflow.potentials import integrand_preset, potential_preset
from dnflow.scheme import SchemeConfig, Trajectory, run_scheme, sine_mode


def eigen_run(cells=64, T=0.2, N=200):
    g = Grid.unit(1, cells)
    return run_scheme(VectorField(g, sine_mode(g, 1)), SchemeConfig(T, N),
                      potential_preset("quadratic", 1), integrand_preset("quadratic", 1, 1))


def perturbed_run(N=100, T=0.1):
    g = Grid.unit(1, 64)
    v0 = 3.0 * sine_mode(g, 1) + sine_mode(g, 3)
    return run_scheme(VectorField(g, v0), SchemeConfig(T, N),
                      potential_preset("perturbed:0.1", 1), integrand_preset("perturbed:0.1", 1, 1))


def parabola(cells=512, times=None):
    """Time-constant v(y) = y^2 on [-1, 1]."""
    g = Grid((2.0,), (cells,), (-1.0,))
    times = np.linspace(-0.5, 0.5, 101) if times is None else times
    return Trajectory.from_function(g, lambda x, t: x[..., 0] ** 2, times)


@pytest.fixture(scope="session")
def eigen_tr():
    return eigen_run()


@pytest.fixture(scope="session")
def perturbed_tr():
    return perturbed_run()


@pytest.fixture(scope="session")
def parabola_tr():
    return parabola()


# acceptance criteria report -------------------------------------------------

ACCEPTANCE = {}
_START = {}


def pytest_sessionstart(session):
    import time

    _START["t"] = time.perf_counter()


def pytest_terminal_summary(terminalreporter):
    import time

    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        tr.write_line(f"{'PASS' if ok else 'FAIL'} criterion {key:2d}: {detail}")
    elapsed = time.perf_counter() - _START["t"]
    tr.write_line(f"{'PASS' if elapsed < 120 else 'FAIL'} suite runtime {elapsed:.1f} s (limit 120 s)")
