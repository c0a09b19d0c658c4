"""Reference killed diffusion as an exact finite Markov chain.

Within step ``m`` a particle at node ``k`` is first killed with probability
``kappa[m, k] = 1 - exp(-V(t_m, x_k) dt)`` (recorded at kill-step ``m``,
location ``x_k``), otherwise it moves according to row ``k`` of the implicit
Euler resolvent ``P_m = (I - dt G_m)^{-1}`` of the discrete generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import solve_banded

from .grid import CoefficientSet, GridSpec


@dataclass(frozen=True, eq=False)
class StepKernels:
    """Per-step diffusion matrices ``diffusion[m]`` and kill probabilities ``kill_prob[m]``.

    ``b``, ``sigma`` and ``v`` hold the sampled coefficient fields, shape (M+1, N).
    ``gen_bands`` holds the generator diagonals (lower, main, upper) per step,
    shape (M, 3, N), when the kernels were built from coefficients.
    """

    diffusion: np.ndarray
    kill_prob: np.ndarray
    grid: GridSpec
    b: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    gen_bands: np.ndarray | None = None
    coeffs: CoefficientSet | None = field(default=None, repr=False)

    @property
    def n_space(self) -> int:
        return self.grid.n_space

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    def generator(self, m: int) -> np.ndarray:
        if self.gen_bands is None:
            raise ValueError("kernels were not built from a generator")
        lower, main, upper = self.gen_bands[m]
        return np.diag(main) + np.diag(lower[1:], -1) + np.diag(upper[:-1], 1)

    @cached_property
    def endpoint(self) -> tuple[np.ndarray, np.ndarray]:
        """``(Q_{0->M}, K)`` with ``K[k, l, m]`` the probability of dying at node l during step m."""
        n, steps = self.n_space, self.n_steps
        surv = np.eye(n)
        kill = np.empty((n, n, steps))
        for m in range(steps):
            kill[:, :, m] = surv * self.kill_prob[m]
            surv = (surv * (1.0 - self.kill_prob[m])) @ self.diffusion[m]
        surv.setflags(write=False)
        kill.setflags(write=False)
        return surv, kill


def generator_bands(b: np.ndarray, sigma: np.ndarray, dx: float) -> np.ndarray:
    """Tridiagonal generator of ``b d/dx + (sigma^2/2) d^2/dx^2`` with no-flux boundary rows.

    Returns an array (3, N): lower[k] couples k -> k-1, upper[k] couples k -> k+1.
    """
    n = b.size
    diff = 0.5 * sigma**2 / dx**2
    adv = 0.5 * b / dx
    lower = diff - adv
    upper = diff + adv
    lower[0] = 0.0
    upper[-1] = 0.0
    # reflecting ghost node: x_{-1} = x_1, so the first-order term cancels
    upper[0] = 2.0 * diff[0]
    lower[-1] = 2.0 * diff[-1]
    main = -(lower + upper)
    if n > 1 and (np.any(lower[1:] <= 0) or np.any(upper[:-1] <= 0)):
        k = int(np.argmin(np.minimum(np.r_[np.inf, lower[1:]], np.r_[upper[:-1], np.inf])))
        raise ValueError(
            f"central-difference generator is not an M-matrix at node {k}: "
            f"|b| dx must stay below sigma^2 (refine the grid)")
    return np.stack([lower, main, upper])


def _resolvent(bands: np.ndarray, dt: float) -> np.ndarray:
    lower, main, upper = bands
    n = main.size
    ab = np.zeros((3, n))
    ab[0, 1:] = -dt * upper[:-1]
    ab[1] = 1.0 - dt * main
    ab[2, :-1] = -dt * lower[1:]
    p = solve_banded((1, 1), ab, np.eye(n))
    # roundoff can leave entries of order -1e-20 far from the diagonal
    np.maximum(p, 0.0, out=p)
    return p


def build_step_kernels(coeffs: CoefficientSet, grid: GridSpec) -> StepKernels:
    b, sigma, v = coeffs.sample(grid)
    if np.any(v < 0):
        raise ValueError("killing rate must be nonnegative on the grid")
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive on the grid")
    steps, dt = grid.n_steps, grid.dt
    bands = np.empty((steps, 3, grid.n_space))
    diffusion = np.empty((steps, grid.n_space, grid.n_space))
    cache: dict[bytes, np.ndarray] = {}
    for m in range(steps):
        bands[m] = generator_bands(b[m], sigma[m], grid.dx)
        key = bands[m].tobytes()
        if key not in cache:
            cache[key] = _resolvent(bands[m], dt)
        diffusion[m] = cache[key]
    kill_prob = -np.expm1(-v[:steps] * dt)
    return StepKernels(diffusion, kill_prob, grid, b, sigma, v, bands, coeffs)


def _check_order(i: int, j: int, steps: int, strict: bool = True) -> None:
    ok = 0 <= i < j <= steps if strict else 0 <= i <= j < steps
    if not ok:
        raise IndexError(f"invalid step indices i={i}, j={j} for M={steps}")


def kernel_between(sk: StepKernels, i: int, j: int) -> np.ndarray:
    """Survival kernel ``Q_{i->j} = prod_{m=i}^{j-1} diag(1 - kappa_m) P_m``."""
    _check_order(i, j, sk.n_steps)
    q = np.eye(sk.n_space)
    for m in range(i, j):
        q = (q * (1.0 - sk.kill_prob[m])) @ sk.diffusion[m]
    return q


def cross_kill_weight(sk: StepKernels, i: int, m: int) -> np.ndarray:
    """``K_{i,m} = Q_{i->m} diag(kappa_m)``: killed during step m at each node."""
    _check_order(i, m, sk.n_steps, strict=False)
    q = np.eye(sk.n_space) if m == i else kernel_between(sk, i, m)
    return q * sk.kill_prob[m]


@dataclass(frozen=True)
class AnalyticBrownianParams:
    lam: float
    x0: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and nonnegative")


def analytic_brownian_kernel(p: AnalyticBrownianParams, t: float, x, s: float, y):
    """Transition density of standard Brownian motion killed at constant rate ``p.lam``."""
    if not s > t:
        raise ValueError("need s > t")
    tau = s - t
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return math.exp(-p.lam * tau) * np.exp(-((y - x) ** 2) / (2 * tau)) / math.sqrt(2 * math.pi * tau)
