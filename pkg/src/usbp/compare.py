"""Bridge KL divergences and the cross-scenario comparison.

Observing less about killed particles can only lower the optimal KL:
``KL1 >= KL2 >= KL4`` and ``KL1 >= KL3 >= KL4``, with equality exactly
when the stronger scenario's dead potential is flat along the coordinate the
weaker observer cannot see.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernel import StepKernels
from .scenarios import DeadSupport, ScenarioKind, TargetPair, project_target
from .schrodinger import (DEFAULT_MAX_ITER, DEFAULT_TOL, Potentials, SinkhornDiagnostics,
                          dead_kernel, sinkhorn_solve)

REFERENCE_FLOOR = 1e-14

ORDERING = (
    (ScenarioKind.JOINT, ScenarioKind.TIME_ONLY),
    (ScenarioKind.JOINT, ScenarioKind.SPACE_ONLY),
    (ScenarioKind.TIME_ONLY, ScenarioKind.MASS_ONLY),
    (ScenarioKind.SPACE_ONLY, ScenarioKind.MASS_ONLY),
)


class ScenarioSolveError(RuntimeError):
    def __init__(self, kind: ScenarioKind, diagnostics: SinkhornDiagnostics | None, cause: str = ""):
        self.kind = kind
        self.diagnostics = diagnostics
        msg = f"scenario {kind.value}: " + (cause or "Sinkhorn did not converge "
                                             f"(error {diagnostics.marginal_error:.3g})")
        super().__init__(msg)


def _xlogy_sum(mass: np.ndarray, ratio: np.ndarray, what: str) -> float:
    pos = mass > 0
    if np.any(ratio[pos] <= 0):
        raise ValueError(f"{what}: positive target mass where the potential vanishes")
    return float(np.sum(mass[pos] * np.log(ratio[pos])))


def kl_bridge(p: Potentials, t: TargetPair) -> float:
    """``KL(Phat || R) = int log f d rho0 + int log g d rhoT`` by the product form."""
    kl = _xlogy_sum(t.rho0_mass, p.f_active, "initial")
    if t.rhoT_active is not None:
        kl += _xlogy_sum(t.active_mass, p.g_active, "terminal active")
    kl += _xlogy_sum(t.dead_mass.ravel(), p.g_dead.ravel(), "terminal dead")
    return kl


def endpoint_coupling(p: Potentials, sk: StepKernels, mu0) -> tuple[np.ndarray, np.ndarray]:
    """Two-endpoint bridge law as masses: ``(active (N, N), dead (N, *layout))``."""
    ds = DeadSupport(p.scenario, sk.grid)
    src = sk.grid.weights * np.asarray(mu0, dtype=float) * p.f_active
    q, _ = sk.endpoint
    active = src[:, None] * q * p.g_active[None, :]
    dead = src[:, None] * dead_kernel(sk, ds) * p.g_dead.ravel()[None, :]
    return active, dead.reshape((sk.n_space,) + ds.shape)


def flatness(values: np.ndarray, reference: np.ndarray, axis: int) -> float:
    """Max over fibers of ``(max - min) / max`` along ``axis``, on cells with reference mass."""
    values = np.moveaxis(np.asarray(values, dtype=float), axis, -1)
    reference = np.moveaxis(np.asarray(reference, dtype=float), axis, -1)
    worst = 0.0
    for vals, ref in zip(values.reshape(-1, values.shape[-1]), reference.reshape(-1, reference.shape[-1])):
        sel = vals[ref >= REFERENCE_FLOOR]
        if sel.size < 2:
            continue
        top = float(np.max(np.abs(sel)))
        if top > 0:
            worst = max(worst, float((sel.max() - sel.min()) / top))
    return worst


@dataclass
class ComparisonReport:
    kl: dict[ScenarioKind, float]
    verdicts: dict[str, dict]
    flatness: dict[str, float]
    potentials: dict[ScenarioKind, Potentials] = field(repr=False, default_factory=dict)
    targets: dict[ScenarioKind, TargetPair] = field(repr=False, default_factory=dict)
    diagnostics: dict[ScenarioKind, SinkhornDiagnostics] = field(repr=False, default_factory=dict)

    @property
    def all_hold(self) -> bool:
        return all(v["holds"] for v in self.verdicts.values())

    def to_dict(self) -> dict:
        return {
            "kl": {k.value: v for k, v in self.kl.items()},
            "verdicts": self.verdicts,
            "flatness": self.flatness,
            "iterations": {k.value: d.iterations for k, d in self.diagnostics.items()},
        }


def solve_all(joint_targets: TargetPair, sk: StepKernels, mu0, tol: float = DEFAULT_TOL,
              max_iter: int = DEFAULT_MAX_ITER):
    pots, targs, diags = {}, {}, {}
    for kind in (ScenarioKind.JOINT,) + tuple(k for _, k in ORDERING[:2]) + (ScenarioKind.MASS_ONLY,):
        t = joint_targets if kind is ScenarioKind.JOINT else project_target(joint_targets, kind)
        try:
            p, d = sinkhorn_solve(sk, t, mu0, tol, max_iter)
        except ValueError as exc:
            raise ScenarioSolveError(kind, None, str(exc)) from exc
        if not d.converged:
            raise ScenarioSolveError(kind, d)
        pots[kind], targs[kind], diags[kind] = p, t, d
    return pots, targs, diags


def compare_scenarios(joint_targets: TargetPair, sk: StepKernels, mu0, tol: float | None = None,
                      sinkhorn_tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> ComparisonReport:
    """Solve all four scenarios on consistent targets and check the KL ordering."""
    if joint_targets.scenario is not ScenarioKind.JOINT:
        raise ValueError("comparison needs a joint target")
    tol = 10 * sinkhorn_tol if tol is None else tol
    pots, targs, diags = solve_all(joint_targets, sk, mu0, sinkhorn_tol, max_iter)
    kl = {k: kl_bridge(pots[k], targs[k]) for k in pots}
    verdicts = {}
    for strong, weak in ORDERING:
        slack = kl[strong] - kl[weak]
        verdicts[f"{strong.value}>={weak.value}"] = {"slack": slack, "holds": bool(slack >= -tol)}

    _, ref_joint = _reference_dead(sk, mu0)
    g1 = pots[ScenarioKind.JOINT].g_dead
    n, steps = sk.n_space, sk.n_steps
    flat = {
        "joint_g_dead_across_x": flatness(g1, ref_joint, axis=0),
        "joint_g_dead_across_tau": flatness(g1, ref_joint, axis=1),
        "time_only_g_dead": flatness(pots[ScenarioKind.TIME_ONLY].g_dead,
                                     ref_joint.sum(axis=0), axis=0),
        "space_only_g_dead": flatness(pots[ScenarioKind.SPACE_ONLY].g_dead,
                                      ref_joint.sum(axis=1), axis=0),
    }
    assert g1.shape == (n, steps)
    return ComparisonReport(kl, verdicts, flat, pots, targs, diags)


def _reference_dead(sk: StepKernels, mu0) -> tuple[np.ndarray, np.ndarray]:
    a = sk.grid.weights * np.asarray(mu0, dtype=float)
    q, kill = sk.endpoint
    return a @ q, np.einsum("k,klm->lm", a, kill)


def equality_target(weaker: Potentials, sk: StepKernels, mu0,
                    stronger: ScenarioKind = ScenarioKind.JOINT,
                    weaker_targets: TargetPair | None = None) -> TargetPair:
    """Dead target of a stronger scenario for which its optimal KL equals the weaker one's.

    Joint dead mass at ``(x, tau)`` is ``g_weaker(projected cell)`` times the
    reference kill mass weighted by ``f_weaker`` at the start, i.e. the weaker
    potentials evaluated on the finer layout.  The result is then collapsed to
    ``stronger`` (which must refine the weaker layout).
    """
    kind = weaker.scenario
    if kind not in (ScenarioKind.TIME_ONLY, ScenarioKind.SPACE_ONLY, ScenarioKind.MASS_ONLY):
        raise ValueError(f"{kind.value} is not a weaker scenario")
    refines = {
        ScenarioKind.JOINT: True,
        ScenarioKind.TIME_ONLY: kind is ScenarioKind.MASS_ONLY,
        ScenarioKind.SPACE_ONLY: kind is ScenarioKind.MASS_ONLY,
    }
    if not refines.get(stronger, False):
        raise ValueError(f"{stronger.value} does not refine {kind.value}")
    weak_ds = DeadSupport(kind, sk.grid)
    strong_ds = DeadSupport(stronger, sk.grid)
    src = sk.grid.weights * np.asarray(mu0, dtype=float) * weaker.f_active
    q, kill = sk.endpoint
    joint_mass = np.einsum("k,klm->lm", src, kill) * weak_ds.expand(weaker.g_dead)
    if weaker_targets is not None:
        rho0_mass, active_mass = weaker_targets.rho0_mass, weaker_targets.active_mass
    else:
        phi0 = q @ weaker.g_active + dead_kernel(sk, weak_ds) @ weaker.g_dead.ravel()
        rho0_mass = src * phi0
        active_mass = (src @ q) * weaker.g_active
    return TargetPair.from_masses(rho0_mass, active_mass, strong_ds.collapse(joint_mass),
                                  stronger, sk.grid)
