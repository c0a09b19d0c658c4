"""Static Schrodinger system and its Fortet-Sinkhorn solver.

Potentials are stored in density form: ``f`` is the ratio to the reference
initial law ``mu0`` and ``g`` the ratio to the reference terminal law, so the
bridge is ``f(X_0) g(X_T) R``.  Internally the solver works with cell masses
(density times trapezoid or dead-cell weight); the ratios are identical.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .kernel import StepKernels
from .scenarios import DeadSupport, ScenarioKind, TargetPair

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10_000


class AbsoluteContinuityError(ValueError):
    """A target puts mass where the reference (or the current iterate) has none."""


@dataclass(frozen=True, eq=False)
class Potentials:
    f_active: np.ndarray
    g_active: np.ndarray
    g_dead: np.ndarray
    scenario: ScenarioKind

    def scaled(self, s: float) -> "Potentials":
        """Gauge transform ``(f, g) -> (s f, g / s)``."""
        return Potentials(self.f_active * s, self.g_active / s, self.g_dead / s, self.scenario)


@dataclass
class SinkhornDiagnostics:
    iterations: int
    marginal_error: float
    converged: bool
    error_history: list[float] = field(default_factory=list)


def dead_kernel(sk: StepKernels, ds: DeadSupport) -> np.ndarray:
    """Reference kill kernel collapsed onto the scenario layout, shape (N, ds.size)."""
    _, kill = sk.endpoint
    n = sk.n_space
    if ds.kind in (ScenarioKind.JOINT, ScenarioKind.STAR):
        return kill.reshape(n, -1)
    if ds.kind is ScenarioKind.TIME_ONLY:
        return kill.sum(axis=1)
    if ds.kind is ScenarioKind.SPACE_ONLY:
        return kill.sum(axis=2)
    return kill.sum(axis=(1, 2))[:, None]


def reference_terminal(sk: StepKernels, ds: DeadSupport, mu0) -> tuple[np.ndarray, np.ndarray]:
    """Terminal law of the reference chain started from density ``mu0``, as cell masses."""
    a = sk.grid.weights * np.asarray(mu0, dtype=float)
    q, _ = sk.endpoint
    return a @ q, (a @ dead_kernel(sk, ds)).reshape(ds.shape)


def phi0_from_g(g_active, g_dead, sk: StepKernels, ds: DeadSupport) -> np.ndarray:
    """``phi(0, ., a) = Q_{0->M} g_active + sum_m K_{0,m} g_dead[psi(m, .)]``."""
    g_active = np.asarray(g_active, dtype=float)
    g_dead = np.asarray(g_dead, dtype=float)
    if g_active.shape != (sk.n_space,) or g_dead.shape != ds.shape:
        raise ValueError(f"potential shapes {g_active.shape}, {g_dead.shape} do not match "
                         f"({sk.n_space},), {ds.shape}")
    q, _ = sk.endpoint
    return q @ g_active + dead_kernel(sk, ds) @ g_dead.ravel()


def phihatT_from_f(f, mu0, sk: StepKernels, ds: DeadSupport) -> tuple[np.ndarray, np.ndarray]:
    """Forward transport of ``f mu0`` to time T, returned as densities ``(active, dead)``."""
    f = np.asarray(f, dtype=float)
    mu0 = np.asarray(mu0, dtype=float)
    if f.shape != (sk.n_space,) or mu0.shape != (sk.n_space,):
        raise ValueError("f and mu0 must have one entry per grid node")
    src = sk.grid.weights * mu0 * f
    q, _ = sk.endpoint
    active = (src @ q) / sk.grid.weights
    dead = (src @ dead_kernel(sk, ds)).reshape(ds.shape) / ds.weights
    return active, dead


def _ratio(num: np.ndarray, den: np.ndarray, what: str) -> np.ndarray:
    bad = (num > 0) & (den <= 0)
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise AbsoluteContinuityError(f"{what}: positive target at cell {idx} has zero reference mass")
    out = np.zeros_like(num)
    pos = num > 0
    out[pos] = num[pos] / den[pos]
    return out


def _rel_error(produced: np.ndarray, target: np.ndarray) -> float:
    pos = target > 0
    if not np.any(pos):
        return 0.0
    return float(np.max(np.abs(produced[pos] / target[pos] - 1.0)))


def sinkhorn_solve(sk: StepKernels, targets: TargetPair, mu0, tol: float = DEFAULT_TOL,
                   max_iter: int = DEFAULT_MAX_ITER, f_init=None) -> tuple[Potentials, SinkhornDiagnostics]:
    """Fortet-Sinkhorn iteration ``phihat(T) -> phi(T) -> phi(0) -> phihat(0) -> phihat(T)``.

    For the Star scenario the active terminal potential is pinned to 1 and only
    the dead terminal constraint is enforced.  Non-convergence is reported in the
    diagnostics, not raised.
    """
    ds = targets.support
    star = targets.scenario is ScenarioKind.STAR
    w = sk.grid.weights
    a = w * np.asarray(mu0, dtype=float)
    q, _ = sk.endpoint
    kd = dead_kernel(sk, ds)
    r0 = targets.rho0_mass
    r_dead = targets.dead_mass.ravel()
    r_active = None if star else targets.active_mass

    f = np.ones(sk.n_space) if f_init is None else np.array(f_init, dtype=float)
    _ratio(r0, a, "rho0 vs mu0")
    src = a * f
    h_active, h_dead = src @ q, src @ kd
    g_active = np.ones(sk.n_space)
    history: list[float] = []
    err = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        if not star:
            g_active = _ratio(r_active, h_active, "active terminal target")
        g_dead = _ratio(r_dead, h_dead, "dead terminal target")
        phi0 = q @ g_active + kd @ g_dead
        f = _ratio(r0, a * phi0, "initial target")
        src = a * f
        h_active, h_dead = src @ q, src @ kd
        err = _rel_error(g_dead * h_dead, r_dead)
        if not star:
            err = max(err, _rel_error(g_active * h_active, r_active))
        history.append(err)
        if err <= tol:
            break
    converged = bool(err <= tol)
    if not converged:
        log.warning("Sinkhorn did not converge: error %.3g after %d iterations", err, it)
    pot = Potentials(f, g_active, g_dead.reshape(ds.shape), targets.scenario)
    if not star:
        mass = float(src.sum())
        if mass > 0:
            pot = pot.scaled(1.0 / mass)
    return pot, SinkhornDiagnostics(it, float(err), converged, history)


def static_residuals(p: Potentials, targets: TargetPair, sk: StepKernels, mu0) -> dict[str, float]:
    """Cellwise relative residuals of the three static-system equations.

    Each equation reads ``potential * E_R[other potential | endpoint] = d rho / d R``.
    """
    ds = targets.support
    mu0 = np.asarray(mu0, dtype=float)
    a = sk.grid.weights * mu0
    q, _ = sk.endpoint
    kd = dead_kernel(sk, ds)
    out = {}

    phi0 = q @ p.g_active + kd @ p.g_dead.ravel()
    pos = a > 0
    lhs = p.f_active[pos] * phi0[pos]
    rhs = targets.rho0_mass[pos] / a[pos]
    out["initial"] = _max_rel(lhs, rhs)

    ref_active, ref_dead = a @ q, a @ kd
    fa_active, fa_dead = (a * p.f_active) @ q, (a * p.f_active) @ kd
    pos = ref_active > 0
    if targets.rhoT_active is not None:
        lhs = p.g_active[pos] * fa_active[pos] / ref_active[pos]
        rhs = targets.active_mass[pos] / ref_active[pos]
        out["terminal_active"] = _max_rel(lhs, rhs)
    pos = ref_dead > 0
    lhs = p.g_dead.ravel()[pos] * fa_dead[pos] / ref_dead[pos]
    rhs = targets.dead_mass.ravel()[pos] / ref_dead[pos]
    out["terminal_dead"] = _max_rel(lhs, rhs)
    return out


def _max_rel(lhs: np.ndarray, rhs: np.ndarray) -> float:
    if lhs.size == 0:
        return 0.0
    scale = np.maximum(np.abs(rhs), np.finfo(float).tiny)
    return float(np.max(np.abs(lhs - rhs) / scale))


def solve_star(sk: StepKernels, targets: TargetPair, mu0, tol: float = DEFAULT_TOL,
               max_iter: int = DEFAULT_MAX_ITER) -> tuple[Potentials, SinkhornDiagnostics]:
    """Solve the problem without a constraint on surviving particles (``g_active == 1``)."""
    if targets.scenario is not ScenarioKind.STAR:
        targets = TargetPair(targets.rho0, None, targets.rhoT_dead, ScenarioKind.STAR, targets.grid)
    return sinkhorn_solve(sk, targets, mu0, tol, max_iter)
