"""Euler-Maruyama simulation of the reference and bridge processes with killing."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dynamics import PotentialSweep, bridge_coefficients
from .grid import GridSpec
from .kernel import StepKernels
from .scenarios import DeadSupport, ScenarioKind, TargetPair

BLOCK_SIZE = 4096


@dataclass(frozen=True)
class SimConfig:
    n_paths: int
    seed: int
    mode: str = "reference"
    workers: int = 1

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if self.mode not in ("reference", "bridge"):
            raise ValueError(f"unknown simulation mode {self.mode!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True, eq=False)
class SimFields:
    """Grid fields driving the SDE on step m: drift, sigma and killing rate, each (M, N)."""

    drift: np.ndarray
    sigma: np.ndarray
    kill_rate: np.ndarray


def reference_fields(sk: StepKernels) -> SimFields:
    steps = sk.n_steps
    return SimFields(sk.b[:steps], sk.sigma[:steps], sk.v[:steps])


def bridge_fields(ps: PotentialSweep, sk: StepKernels) -> SimFields:
    drift = np.empty((sk.n_steps, sk.n_space))
    rate = np.empty_like(drift)
    for m in range(sk.n_steps):
        drift[m], rate[m] = bridge_coefficients(ps, sk, m)
    return SimFields(drift, sk.sigma[:sk.n_steps], rate)


@dataclass(frozen=True)
class PathSample:
    positions: np.ndarray
    kill_step: int | None
    kill_location: float | None
    terminal_regime: str


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Trajectories stored column-wise; ``positions[i, m]`` is NaN once path i has been killed.

    ``kill_step[i] == -1`` marks a survivor.
    """

    positions: np.ndarray
    kill_step: np.ndarray
    kill_location: np.ndarray
    grid: GridSpec

    @property
    def n_paths(self) -> int:
        return self.positions.shape[0]

    def path(self, i: int) -> PathSample:
        m = int(self.kill_step[i])
        if m < 0:
            return PathSample(self.positions[i].copy(), None, None, "a")
        return PathSample(self.positions[i, :m + 1].copy(), m, float(self.kill_location[i]), "d")


def _interp_rows(field_row: np.ndarray, x: np.ndarray, grid: GridSpec) -> np.ndarray:
    return np.interp(x, grid.x, field_row)


def _reflect(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    x = np.where(x < lo, 2 * lo - x, x)
    x = np.where(x > hi, 2 * hi - x, x)
    return np.clip(x, lo, hi)


def _simulate_block(block: int, n: int, seed: int, fields: SimFields, grid: GridSpec,
                    rho0_mass: np.ndarray):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))
    steps, dt = grid.n_steps, grid.dt
    cdf = np.cumsum(rho0_mass)
    cdf /= cdf[-1]
    start = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), grid.n_space - 1)
    x = grid.x[start].copy()
    pos = np.full((n, steps + 1), np.nan)
    pos[:, 0] = x
    kill_step = np.full(n, -1, dtype=np.int64)
    kill_loc = np.full(n, np.nan)
    alive = np.ones(n, dtype=bool)
    sqdt = np.sqrt(dt)
    for m in range(steps):
        u = rng.random(n)
        z = rng.standard_normal(n)
        rate = np.maximum(_interp_rows(fields.kill_rate[m], x, grid), 0.0)
        dies = alive & (u < -np.expm1(-rate * dt))
        kill_step[dies] = m
        kill_loc[dies] = x[dies]
        alive &= ~dies
        drift = _interp_rows(fields.drift[m], x, grid)
        sig = _interp_rows(fields.sigma[m], x, grid)
        x = np.where(alive, _reflect(x + drift * dt + sig * sqdt * z, grid.x_min, grid.x_max), x)
        pos[alive, m + 1] = x[alive]
    return pos, kill_step, kill_loc


def simulate(cfg: SimConfig, fields: SimFields, grid: GridSpec, rho0) -> PathEnsemble:
    """Simulate ``cfg.n_paths`` paths started from the density ``rho0``.

    Paths are split into fixed blocks with independent Philox streams keyed by
    ``(seed, block)``, so the ensemble does not depend on ``cfg.workers``.
    """
    rho0_mass = grid.weights * np.asarray(rho0, dtype=float)
    sizes = [min(BLOCK_SIZE, cfg.n_paths - s) for s in range(0, cfg.n_paths, BLOCK_SIZE)]

    def run(item):
        block, n = item
        return _simulate_block(block, n, cfg.seed, fields, grid, rho0_mass)

    items = list(enumerate(sizes))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(run, items))
    else:
        parts = [run(item) for item in items]
    pos = np.concatenate([p[0] for p in parts])
    ks = np.concatenate([p[1] for p in parts])
    kl = np.concatenate([p[2] for p in parts])
    return PathEnsemble(pos, ks, kl, grid)


def _nearest(x: np.ndarray, grid: GridSpec) -> np.ndarray:
    idx = np.rint((x - grid.x_min) / grid.dx).astype(np.int64)
    return np.clip(idx, 0, grid.n_space - 1)


def empirical_initial(ens: PathEnsemble) -> np.ndarray:
    """Histogram density of starting positions."""
    grid = ens.grid
    counts = np.bincount(_nearest(ens.positions[:, 0], grid), minlength=grid.n_space)
    return counts / ens.n_paths / grid.weights


def empirical_terminal(ens: PathEnsemble, ds: DeadSupport) -> TargetPair:
    """Bin survivors on the grid and killed paths per the scenario layout (as densities)."""
    grid = ens.grid
    n = ens.n_paths
    surv = ens.kill_step < 0
    active = np.bincount(_nearest(ens.positions[surv, -1], grid), minlength=grid.n_space) / n
    joint = np.zeros((grid.n_space, grid.n_steps))
    dead = ~surv
    np.add.at(joint, (_nearest(ens.kill_location[dead], grid), ens.kill_step[dead]), 1.0 / n)
    rho0 = empirical_initial(ens) * grid.weights
    kind = ds.kind
    return TargetPair.from_masses(rho0, None if kind is ScenarioKind.STAR else active,
                                  ds.collapse(joint), kind, grid)


def total_variation(a: TargetPair, b: TargetPair) -> dict[str, float]:
    """Total variation distances of the initial and terminal laws (on cell masses)."""
    tv0 = 0.5 * float(np.abs(a.rho0_mass - b.rho0_mass).sum())
    tvT = 0.5 * float(np.abs(a.dead_mass - b.dead_mass).sum())
    if a.rhoT_active is not None and b.rhoT_active is not None:
        tvT += 0.5 * float(np.abs(a.active_mass - b.active_mass).sum())
    return {"initial": tv0, "terminal": tvT}


def running_cost(u, xi, v, dt: float) -> np.ndarray:
    """Per-step cost field ``dt (u^2 / 2 + V (xi log xi + 1 - xi))`` with ``0 log 0 = 0``."""
    u, xi, v = (np.asarray(a, dtype=float) for a in (u, xi, v))
    xi = np.maximum(xi, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        xlogx = np.where(xi > 0, xi * np.log(xi), 0.0)
    return dt * (0.5 * u**2 + v * (xlogx + 1.0 - xi))


def path_cost(ens: PathEnsemble, step_cost) -> tuple[float, float]:
    """Mean and standard error of ``sum_m step_cost[m](X_m)`` over the steps each path starts alive.

    ``step_cost`` is an (M, N) grid field, interpolated linearly in x.
    """
    grid = ens.grid
    step_cost = np.asarray(step_cost, dtype=float)
    cost = np.zeros(ens.n_paths)
    for m in range(grid.n_steps):
        x = ens.positions[:, m]
        live = ~np.isnan(x)
        cost[live] += np.interp(x[live], grid.x, step_cost[m])
    se = float(cost.std(ddof=1) / np.sqrt(ens.n_paths)) if ens.n_paths > 1 else 0.0
    return float(cost.mean()), se


def control_cost(ens: PathEnsemble, u, xi, v) -> tuple[float, float]:
    """Monte Carlo estimate (mean, standard error) of the drift and killing control cost.

    ``u``, ``xi``, ``v`` are (M, N) grid fields; left-point rule in time.
    """
    return path_cost(ens, running_cost(u, xi, v, ens.grid.dt))


def optimal_controls(ps: PotentialSweep, sk: StepKernels) -> tuple[np.ndarray, np.ndarray]:
    """Grid fields ``u* = sigma d/dx log phi`` and ``xi* = g_dead(psi) / phi`` for m < M."""
    fields = bridge_fields(ps, sk)
    steps = sk.n_steps
    u = (fields.drift - sk.b[:steps]) / sk.sigma[:steps]
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = np.where(sk.v[:steps] > 0, fields.kill_rate / sk.v[:steps], 1.0)
    return u, xi


def write_ensemble_csv(ens: PathEnsemble, path) -> None:
    """Export ``path_id,step,x,regime`` rows; a killed path's last row is its kill step."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("path_id,step,x,regime\n")
        for i in range(ens.n_paths):
            ks = int(ens.kill_step[i])
            last = ens.grid.n_steps if ks < 0 else ks
            for m in range(last + 1):
                regime = "d" if ks >= 0 and m == ks else "a"
                fh.write(f"{i},{m},{float(ens.positions[i, m])!r},{regime}\n")
