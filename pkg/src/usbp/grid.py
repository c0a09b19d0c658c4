"""Space-time grid, trapezoidal quadrature and coefficient fields."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .expr import CoefficientExpr, parse_expr


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    n_space: int
    t_horizon: float
    n_steps: int

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError(f"x_min={self.x_min} must be < x_max={self.x_max}")
        if self.n_space < 2:
            raise ValueError("n_space must be at least 2")
        if not self.t_horizon > 0:
            raise ValueError("t_horizon must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_space - 1)

    @property
    def dt(self) -> float:
        return self.t_horizon / self.n_steps

    @cached_property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.n_space)

    @cached_property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoid weights; also the mass <-> density conversion for every spatial cell."""
        w = np.full(self.n_space, self.dx)
        w[0] = w[-1] = self.dx / 2
        return w


def integrate(values, grid: GridSpec) -> float:
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.n_space,):
        raise ValueError(f"expected {grid.n_space} values, got shape {values.shape}")
    return float(grid.weights @ values)


def sample_field(expr: CoefficientExpr, grid: GridSpec) -> np.ndarray:
    """Evaluate ``expr`` on all nodes; entry ``[m, k]`` is ``expr(t_m, x_k)``."""
    out = expr(grid.t[:, None], grid.x[None, :])
    bad = np.argwhere(~np.isfinite(out))
    if bad.size:
        m, k = bad[0]
        raise ValueError(f"expression {expr.source!r} is not finite at (m={m}, k={k}), "
                         f"t={grid.t[m]}, x={grid.x[k]}")
    return out


@dataclass(frozen=True)
class CoefficientSet:
    b: CoefficientExpr
    sigma: CoefficientExpr
    v: CoefficientExpr

    @classmethod
    def from_strings(cls, b: str, sigma: str, v: str) -> "CoefficientSet":
        return cls(parse_expr(b), parse_expr(sigma), parse_expr(v))

    def sample(self, grid: GridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return sample_field(self.b, grid), sample_field(self.sigma, grid), sample_field(self.v, grid)


def check_coefficients(coeffs: CoefficientSet, grid: GridSpec, sigma_min: float = 1e-8) -> list[str]:
    """Grid-level version of the regularity assumption on (b, sigma, V).

    Returns a list of human-readable violations (empty when admissible).
    """
    problems = []
    try:
        _, sigma, v = coeffs.sample(grid)
    except ValueError as exc:
        return [str(exc)]
    if sigma.min() < sigma_min:
        m, k = np.unravel_index(np.argmin(sigma), sigma.shape)
        problems.append(f"sigma is not uniformly elliptic: sigma(t={grid.t[m]:g}, x={grid.x[k]:g})"
                        f" = {sigma[m, k]:g} < {sigma_min:g}")
    if v.min() < 0:
        m, k = np.unravel_index(np.argmin(v), v.shape)
        problems.append(f"killing rate V is negative: V(t={grid.t[m]:g}, x={grid.x[k]:g}) = {v[m, k]:g}")
    if not np.any(v > 0):
        problems.append("killing rate V must be not identically 0 on the grid")
    return problems
