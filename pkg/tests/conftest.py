import numpy as np
import pytest

from usbp.grid import CoefficientSet, GridSpec, integrate
from usbp.kernel import build_step_kernels
from usbp.scenarios import DeadSupport, ScenarioKind, TargetPair
from usbp.schrodinger import reference_terminal

OU = ("-x", "1", "0.5 + 0.5*sin(x)^2")


def gaussian(grid, mean=0.0, std=1.0):
    d = np.exp(-0.5 * ((grid.x - mean) / std) ** 2)
    return d / integrate(d, grid)


def random_joint_target(sk, mu0, rng, spread=0.5, rho0=None):
    """Reference terminal law with log-normal noise on every cell, renormalized."""
    grid = sk.grid
    ref_a, ref_d = reference_terminal(sk, DeadSupport(ScenarioKind.JOINT, grid), mu0)
    act = ref_a * np.exp(spread * rng.standard_normal(ref_a.shape))
    dead = ref_d * np.exp(spread * rng.standard_normal(ref_d.shape))
    s = act.sum() + dead.sum()
    if rho0 is None:
        rho0 = mu0 * np.exp(spread * rng.standard_normal(grid.n_space))
        rho0 = rho0 / integrate(rho0, grid)
    return TargetPair.from_masses(grid.weights * rho0, act / s, dead / s, ScenarioKind.JOINT, grid)


@pytest.fixture(scope="session")
def ou_problem():
    grid = GridSpec(-4.0, 4.0, 48, 1.0, 24)
    sk = build_step_kernels(CoefficientSet.from_strings(*OU), grid)
    return sk, gaussian(grid)


@pytest.fixture(scope="session")
def killed_bm():
    """Brownian motion killed at rate 0.5 on a wide domain, T = 1."""
    grid = GridSpec(-8.0, 8.0, 128, 1.0, 64)
    return build_step_kernels(CoefficientSet.from_strings("0", "1", "0.5"), grid)


ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion (echoed in the terminal summary)."""

    def _report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
