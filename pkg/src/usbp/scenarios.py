"""Observation scenarios: dead-state layouts, target pairs, and projections between them.

Dead arrays use natural shapes: joint/star ``(N, M)`` indexed ``[k, m]``
(kill location, kill step), time-only ``(M,)``, space-only ``(N,)`` and
mass-only ``(1,)``.  Killing during step ``m`` means killing in ``[t_m, t_{m+1})``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .grid import GridSpec


class ScenarioKind(enum.Enum):
    JOINT = "joint"
    TIME_ONLY = "time_only"
    SPACE_ONLY = "space_only"
    MASS_ONLY = "mass_only"
    STAR = "star"

    @classmethod
    def parse(cls, name: str) -> "ScenarioKind":
        aliases = {"1": cls.JOINT, "2": cls.TIME_ONLY, "3": cls.SPACE_ONLY, "4": cls.MASS_ONLY}
        key = str(name).strip().lower().replace("-", "_")
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown scenario {name!r}; expected one of "
                             f"{', '.join(k.value for k in cls)}") from None

    @property
    def observes_location(self) -> bool:
        return self in (ScenarioKind.JOINT, ScenarioKind.STAR, ScenarioKind.SPACE_ONLY)

    @property
    def observes_time(self) -> bool:
        return self in (ScenarioKind.JOINT, ScenarioKind.STAR, ScenarioKind.TIME_ONLY)


WEAKER = (ScenarioKind.TIME_ONLY, ScenarioKind.SPACE_ONLY, ScenarioKind.MASS_ONLY)


@dataclass(frozen=True)
class DeadSupport:
    kind: ScenarioKind
    grid: GridSpec

    @property
    def shape(self) -> tuple[int, ...]:
        n, m = self.grid.n_space, self.grid.n_steps
        return {
            ScenarioKind.JOINT: (n, m),
            ScenarioKind.STAR: (n, m),
            ScenarioKind.TIME_ONLY: (m,),
            ScenarioKind.SPACE_ONLY: (n,),
            ScenarioKind.MASS_ONLY: (1,),
        }[self.kind]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def weights(self) -> np.ndarray:
        """Reference measure of each dead cell (mass = weight * density)."""
        w, dt = self.grid.weights, self.grid.dt
        if self.kind.observes_location and self.kind.observes_time:
            return np.outer(w, np.full(self.grid.n_steps, dt))
        if self.kind is ScenarioKind.TIME_ONLY:
            return np.full(self.grid.n_steps, dt)
        if self.kind is ScenarioKind.SPACE_ONLY:
            return w.copy()
        return np.ones(1)

    def collapse(self, joint: np.ndarray) -> np.ndarray:
        """Push a joint ``(N, M)`` array of masses forward onto this layout (sums over fibers)."""
        joint = np.asarray(joint, dtype=float)
        if self.kind in (ScenarioKind.JOINT, ScenarioKind.STAR):
            return joint.copy()
        if self.kind is ScenarioKind.TIME_ONLY:
            return joint.sum(axis=0)
        if self.kind is ScenarioKind.SPACE_ONLY:
            return joint.sum(axis=1)
        return np.array([joint.sum()])

    def expand(self, dead: np.ndarray) -> np.ndarray:
        """Pull a function on this layout back to the joint ``(N, M)`` layout: ``dead[psi(m, k)]``."""
        n, m = self.grid.n_space, self.grid.n_steps
        dead = np.asarray(dead, dtype=float).reshape(self.shape)
        if self.kind in (ScenarioKind.JOINT, ScenarioKind.STAR):
            return dead.copy()
        if self.kind is ScenarioKind.TIME_ONLY:
            return np.broadcast_to(dead[None, :], (n, m)).copy()
        if self.kind is ScenarioKind.SPACE_ONLY:
            return np.broadcast_to(dead[:, None], (n, m)).copy()
        return np.full((n, m), dead[0])


def psi_index(kind: ScenarioKind, kill_step: int, space_index: int, grid: GridSpec):
    """Dead-cell index of a particle killed at node ``space_index`` during step ``kill_step``."""
    if not 0 <= kill_step < grid.n_steps:
        raise IndexError(f"kill step {kill_step} out of range 0..{grid.n_steps - 1}")
    if not 0 <= space_index < grid.n_space:
        raise IndexError(f"space index {space_index} out of range 0..{grid.n_space - 1}")
    if kind in (ScenarioKind.JOINT, ScenarioKind.STAR):
        return (space_index, kill_step)
    if kind is ScenarioKind.TIME_ONLY:
        return kill_step
    if kind is ScenarioKind.SPACE_ONLY:
        return space_index
    return 0


@dataclass(frozen=True, eq=False)
class TargetPair:
    """Initial density ``rho0`` and terminal densities; ``rhoT_active`` is ``None`` for Star."""

    rho0: np.ndarray
    rhoT_active: np.ndarray | None
    rhoT_dead: np.ndarray
    scenario: ScenarioKind
    grid: GridSpec

    @property
    def support(self) -> DeadSupport:
        return DeadSupport(self.scenario, self.grid)

    @property
    def rho0_mass(self) -> np.ndarray:
        return self.grid.weights * self.rho0

    @property
    def active_mass(self) -> np.ndarray | None:
        return None if self.rhoT_active is None else self.grid.weights * self.rhoT_active

    @property
    def dead_mass(self) -> np.ndarray:
        return self.support.weights * self.rhoT_dead

    @classmethod
    def from_masses(cls, rho0_mass, active_mass, dead_mass, scenario: ScenarioKind,
                    grid: GridSpec) -> "TargetPair":
        ds = DeadSupport(scenario, grid)
        w = grid.weights
        active = None if active_mass is None else np.asarray(active_mass, dtype=float) / w
        return cls(np.asarray(rho0_mass, dtype=float) / w, active,
                   np.asarray(dead_mass, dtype=float).reshape(ds.shape) / ds.weights, scenario, grid)


def project_target(src: TargetPair, dst_kind: ScenarioKind) -> TargetPair:
    """Marginalize a joint target onto a weaker observation scenario."""
    if src.scenario is not ScenarioKind.JOINT:
        raise ValueError(f"can only project from the joint scenario, not {src.scenario.value}")
    if dst_kind is ScenarioKind.STAR:
        return TargetPair(src.rho0.copy(), None, src.rhoT_dead.copy(), dst_kind, src.grid)
    dst = DeadSupport(dst_kind, src.grid)
    dead = dst.collapse(src.dead_mass) / dst.weights
    active = None if src.rhoT_active is None else src.rhoT_active.copy()
    return TargetPair(src.rho0.copy(), active, dead, dst_kind, src.grid)


@dataclass(frozen=True)
class Violation:
    check: str
    cell: str
    detail: str

    def __str__(self):
        return f"{self.check} [{self.cell}]: {self.detail}"


def validate_targets(t: TargetPair, reference=None, tol: float = 1e-10) -> list[Violation]:
    """Check nonnegativity, mass balance and absolute continuity w.r.t. ``reference``.

    ``reference`` is the reference terminal law as ``(active_mass, dead_mass)`` in
    the same layout (see :func:`usbp.schrodinger.reference_terminal`); the
    absolute-continuity check is skipped when it is omitted.
    """
    out: list[Violation] = []
    ds = t.support
    if t.rho0.shape != (t.grid.n_space,):
        out.append(Violation("shape", "rho0", f"expected ({t.grid.n_space},), got {t.rho0.shape}"))
        return out
    if t.rhoT_dead.shape != ds.shape:
        out.append(Violation("shape", "rhoT_dead", f"expected {ds.shape}, got {t.rhoT_dead.shape}"))
        return out
    if t.rhoT_active is None and t.scenario is not ScenarioKind.STAR:
        out.append(Violation("shape", "rhoT_active", "missing active terminal target"))
        return out
    arrays = [("rho0", t.rho0), ("rhoT_dead", t.rhoT_dead)]
    if t.rhoT_active is not None:
        arrays.append(("rhoT_active", t.rhoT_active))
    for name, arr in arrays:
        bad = np.argwhere(~(arr >= 0) | ~np.isfinite(arr))
        for idx in bad[:5]:
            out.append(Violation("nonnegativity", f"{name}{tuple(int(i) for i in idx)}",
                                 f"value {arr[tuple(idx)]!r}"))
    m0 = float(t.rho0_mass.sum())
    if abs(m0 - 1.0) > tol:
        out.append(Violation("mass balance", "rho0", f"initial mass {m0:.12g} != 1"))
    dead_total = float(t.dead_mass.sum())
    if t.rhoT_active is not None:
        total = float(t.active_mass.sum()) + dead_total
        if abs(total - 1.0) > tol:
            out.append(Violation("mass balance", "rhoT", f"terminal mass {total:.12g} != 1"))
    elif dead_total > 1.0 + tol:
        out.append(Violation("mass balance", "rhoT_dead", f"dead mass {dead_total:.12g} exceeds 1"))
    if reference is not None:
        ref_active, ref_dead = reference
        pairs = [("rhoT_dead", t.dead_mass, np.asarray(ref_dead).reshape(ds.shape))]
        if t.rhoT_active is not None:
            pairs.append(("rhoT_active", t.active_mass, np.asarray(ref_active)))
        for name, mass, ref in pairs:
            bad = np.argwhere((mass > 0) & (ref <= 0))
            for idx in bad[:5]:
                out.append(Violation("absolute continuity", f"{name}{tuple(int(i) for i in idx)}",
                                     f"target mass {mass[tuple(idx)]:.3g} on a reference-null cell"))
    return out
