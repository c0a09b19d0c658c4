"""Time sweeps of the Schrodinger potentials and the bridge dynamics they induce."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import StepKernels, kernel_between
from .scenarios import DeadSupport, ScenarioKind
from .schrodinger import Potentials


class DegenerateSupportError(ValueError):
    """phi vanishes where a bridge quantity has to be divided by it."""


@dataclass(frozen=True, eq=False)
class PotentialSweep:
    """``phi[m]``/``phihat[m]`` are active-regime densities at ``t_m``; dead parts use the scenario layout.

    ``phihat_dead`` has shape ``(M+1, *support.shape)``; ``phi_dead`` equals ``g_dead``.
    """

    phi: np.ndarray
    phi_dead: np.ndarray
    phihat: np.ndarray
    phihat_dead: np.ndarray
    support: DeadSupport

    @property
    def n_steps(self) -> int:
        return self.phi.shape[0] - 1


def phi_sweep(p: Potentials, sk: StepKernels, ds: DeadSupport) -> tuple[np.ndarray, np.ndarray]:
    """Backward recursion ``phi[m] = (1-kappa_m) P_m phi[m+1] + kappa_m g_dead[psi(m, .)]``."""
    g_dead = np.asarray(p.g_dead, dtype=float)
    if p.g_active.shape != (sk.n_space,) or g_dead.shape != ds.shape:
        raise ValueError("potential shapes do not match the grid / dead support")
    steps = sk.n_steps
    g_joint = ds.expand(g_dead)
    phi = np.empty((steps + 1, sk.n_space))
    phi[steps] = p.g_active
    for m in range(steps - 1, -1, -1):
        kappa = sk.kill_prob[m]
        phi[m] = (1.0 - kappa) * (sk.diffusion[m] @ phi[m + 1]) + kappa * g_joint[:, m]
    return phi, g_dead.copy()


def _joint_kill_masses(f, mu0, sk: StepKernels) -> tuple[np.ndarray, np.ndarray]:
    """Active masses ``u[m]`` (M+1, N) and per-step killed masses ``killed[:, m]`` (N, M)."""
    steps = sk.n_steps
    u = np.empty((steps + 1, sk.n_space))
    killed = np.empty((sk.n_space, steps))
    u[0] = sk.grid.weights * np.asarray(mu0, dtype=float) * np.asarray(f, dtype=float)
    for m in range(steps):
        kappa = sk.kill_prob[m]
        killed[:, m] = u[m] * kappa
        u[m + 1] = (u[m] * (1.0 - kappa)) @ sk.diffusion[m]
    return u, killed


def _cumulative_dead(killed: np.ndarray, ds: DeadSupport) -> np.ndarray:
    """Dead densities at every time index from per-step joint kill masses."""
    n, steps = killed.shape
    out = np.zeros((steps + 1,) + ds.shape)
    acc = np.zeros((n, steps))
    for m in range(1, steps + 1):
        acc[:, m - 1] = killed[:, m - 1]
        out[m] = ds.collapse(acc) / ds.weights
    return out


def phihat_sweep(f, mu0, sk: StepKernels, ds: DeadSupport) -> tuple[np.ndarray, np.ndarray]:
    """Forward recursion of ``phihat`` from ``f mu0``; dead part accumulates killed flux."""
    f = np.asarray(f, dtype=float)
    mu0 = np.asarray(mu0, dtype=float)
    if f.shape != (sk.n_space,) or mu0.shape != (sk.n_space,):
        raise ValueError("f and mu0 must have one entry per grid node")
    u, killed = _joint_kill_masses(f, mu0, sk)
    return u / sk.grid.weights, _cumulative_dead(killed, ds)


def sweep(p: Potentials, mu0, sk: StepKernels) -> PotentialSweep:
    ds = DeadSupport(p.scenario, sk.grid)
    phi, phi_dead = phi_sweep(p, sk, ds)
    phihat, phihat_dead = phihat_sweep(p.f_active, mu0, sk, ds)
    return PotentialSweep(phi, phi_dead, phihat, phihat_dead, ds)


def marginals(ps: PotentialSweep, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Bridge densities at ``t_m``: active ``phi * phihat`` and dead ``g_dead * phihat_dead``."""
    if not 0 <= m <= ps.n_steps:
        raise IndexError(f"time index {m} out of range")
    return ps.phi[m] * ps.phihat[m], ps.phi_dead * ps.phihat_dead[m]


def _kill_ratio(ps: PotentialSweep, m: int) -> np.ndarray:
    """``g_dead[psi(m, k)] / phi[m, k]`` (zero where both vanish)."""
    g = ps.support.expand(ps.phi_dead)[:, m]
    phi = ps.phi[m]
    bad = (phi <= 0) & (g > 0)
    if np.any(bad):
        raise DegenerateSupportError(f"phi vanishes at node {int(np.argmax(bad))}, step {m}")
    out = np.zeros_like(phi)
    pos = phi > 0
    out[pos] = g[pos] / phi[pos]
    return out


def bridge_coefficients(ps: PotentialSweep, sk: StepKernels, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Bridge drift ``b + sigma^2 d/dx log phi`` and killing rate ``V g_dead(psi) / phi`` at ``t_m``."""
    if not 0 <= m < ps.n_steps:
        raise IndexError(f"bridge coefficients are defined for steps 0..{ps.n_steps - 1}")
    phi = ps.phi[m]
    if np.any(phi <= 0):
        raise DegenerateSupportError(f"phi vanishes at node {int(np.argmin(phi))}, step {m}")
    grad = np.gradient(np.log(phi), sk.grid.dx)
    drift = sk.b[m] + sk.sigma[m] ** 2 * grad
    return drift, sk.v[m] * _kill_ratio(ps, m)


def bridge_kernel(ps: PotentialSweep, sk: StepKernels, i: int, j: int) -> np.ndarray:
    """``Qhat_{i->j}[k, l] = phi[j, l] Q_{i->j}[k, l] / phi[i, k]``."""
    q = kernel_between(sk, i, j)
    phi_i = ps.phi[i]
    if np.any(phi_i <= 0):
        raise DegenerateSupportError(f"phi vanishes on a row at step {i}")
    return q * ps.phi[j][None, :] / phi_i[:, None]


@dataclass(frozen=True, eq=False)
class BridgeChain:
    """Exact reweighting of the reference chain: kill probabilities and survival moves per step."""

    kill_prob: np.ndarray
    diffusion: np.ndarray


def bridge_chain(ps: PotentialSweep, sk: StepKernels) -> BridgeChain:
    steps, n = sk.n_steps, sk.n_space
    kill = np.empty((steps, n))
    moves = np.empty((steps, n, n))
    for m in range(steps):
        kill[m] = sk.kill_prob[m] * _kill_ratio(ps, m)
        p = sk.diffusion[m] * ps.phi[m + 1][None, :]
        rows = p.sum(axis=1)
        # rows that carry no bridge mass keep the reference move
        dead_rows = rows <= 0
        p[~dead_rows] /= rows[~dead_rows, None]
        p[dead_rows] = sk.diffusion[m][dead_rows]
        moves[m] = p
    return BridgeChain(kill, moves)


def evolve_bridge(chain: BridgeChain, rho0, sk: StepKernels, ds: DeadSupport) -> tuple[np.ndarray, np.ndarray]:
    """Push ``rho0`` through the bridge chain; returns active and dead densities at every t_m."""
    steps = sk.n_steps
    v = np.empty((steps + 1, sk.n_space))
    killed = np.empty((sk.n_space, steps))
    v[0] = sk.grid.weights * np.asarray(rho0, dtype=float)
    for m in range(steps):
        killed[:, m] = v[m] * chain.kill_prob[m]
        v[m + 1] = (v[m] * (1.0 - chain.kill_prob[m])) @ chain.diffusion[m]
    return v / sk.grid.weights, _cumulative_dead(killed, ds)


def residuals(ps: PotentialSweep, sk: StepKernels, ds: DeadSupport | None = None) -> dict:
    """Discrete residuals of the dynamic system and of the forward equations.

    * ``backward``: phi against ``(I - dt G_m)`` after removing the kill term.
    * ``forward``: phihat masses against the adjoint step.
    * ``dead_forward``: space-/mass-only dead marginals, time difference minus
      ``(g_dead / phi) V`` times the active marginal; O(dt).
    * ``dead_identity``: joint/time-only dead marginals minus the indicator-masked
      terminal dead marginal; exactly zero.
    """
    ds = ds or ps.support
    steps, dt = sk.n_steps, sk.grid.dt
    w = sk.grid.weights
    g_joint = ds.expand(ps.phi_dead)
    report: dict[str, float | None] = {}

    back, fwd = 0.0, 0.0
    phi_scale = max(float(np.abs(ps.phi).max()), np.finfo(float).tiny)
    u = ps.phihat * w
    mass_scale = max(float(np.abs(u).sum(axis=1).max()), np.finfo(float).tiny)
    for m in range(steps):
        kappa = sk.kill_prob[m]
        gen = sk.generator(m)
        y = (ps.phi[m] - kappa * g_joint[:, m]) / (1.0 - kappa)
        r = y - dt * (gen @ y) - ps.phi[m + 1]
        back = max(back, float(np.abs(r).max()) / phi_scale)
        r = u[m + 1] - dt * (u[m + 1] @ gen) - u[m] * (1.0 - kappa)
        fwd = max(fwd, float(np.abs(r).max()) / mass_scale)
    report["backward"] = back
    report["forward"] = fwd

    dead = np.stack([ps.phi_dead * ps.phihat_dead[m] for m in range(steps + 1)])
    active = ps.phi * ps.phihat
    if ds.kind in (ScenarioKind.SPACE_ONLY, ScenarioKind.MASS_ONLY):
        worst = 0.0
        for m in range(steps):
            rhs_nodes = g_joint[:, m] / np.where(ps.phi[m] > 0, ps.phi[m], np.inf) * sk.v[m] * active[m]
            lhs = (dead[m + 1] - dead[m]) / dt
            rhs = rhs_nodes if ds.kind is ScenarioKind.SPACE_ONLY else np.array([w @ rhs_nodes])
            worst = max(worst, float(np.abs(lhs - rhs).max()))
        report["dead_forward"] = worst
        report["dead_identity"] = None
    else:
        worst = 0.0
        for m in range(steps + 1):
            mask = (np.arange(steps) < m).astype(float)
            expected = dead[steps] * (mask[None, :] if dead.ndim == 3 else mask)
            worst = max(worst, float(np.abs(dead[m] - expected).max()))
        report["dead_forward"] = None
        report["dead_identity"] = worst

    total = (active * w).sum(axis=1) + (dead * ds.weights).reshape(steps + 1, -1).sum(axis=1)
    report["mass_defect"] = float(np.abs(total - total[0]).max())
    return report


def control_bounds(ps: PotentialSweep, sk: StepKernels) -> dict[str, float]:
    """Grid sup of the optimal controls (finite version of the local boundedness condition)."""
    u_max, xi_max = 0.0, 0.0
    for m in range(ps.n_steps):
        if np.any(ps.phi[m] <= 0):
            return {"u_max": float("inf"), "xi_max": float("inf")}
        grad = np.gradient(np.log(ps.phi[m]), sk.grid.dx)
        u_max = max(u_max, float(np.abs(sk.sigma[m] * grad).max()))
        xi_max = max(xi_max, float(_kill_ratio(ps, m).max()))
    return {"u_max": u_max, "xi_max": xi_max}


def step_relative_entropy(ps: PotentialSweep, sk: StepKernels) -> np.ndarray:
    """Relative entropy of one bridge-chain step against the reference step, per start node.

    Entry ``[m, k]`` is ``KL(Bernoulli(kappa_hat) || Bernoulli(kappa))`` plus
    ``(1 - kappa_hat) KL(Phat_m[k] || P_m[k])``; for small ``dt`` it is
    ``dt (u^2 / 2 + V (xi log xi + 1 - xi))``.  Summed along the bridge chain it
    gives ``KL(Phat || P^0)`` exactly.
    """
    chain = bridge_chain(ps, sk)
    out = np.zeros((sk.n_steps, sk.n_space))
    for m in range(sk.n_steps):
        k, kh = sk.kill_prob[m], chain.kill_prob[m]
        p, ph = sk.diffusion[m], chain.diffusion[m]
        with np.errstate(divide="ignore", invalid="ignore"):
            kill = np.where(kh > 0, kh * np.log(kh / np.where(k > 0, k, 1.0)), 0.0)
            kill += (1.0 - kh) * np.log((1.0 - kh) / (1.0 - k))
            move = np.where(ph > 0, ph * np.log(ph / np.where(p > 0, p, 1.0)), 0.0).sum(axis=1)
        out[m] = kill + (1.0 - kh) * move
    return out
