"""Command line entry point: ``usbp solve|simulate|compare|validate|run <config>``.

Exit codes: 0 success, 1 configuration error, 2 assumption/target validation
failure, 3 Sinkhorn non-convergence.  ``USBP_OUTPUT_DIR`` overrides the
configured output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import secrets
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .compare import ScenarioSolveError, compare_scenarios, kl_bridge
from .config import ConfigError, ExperimentConfig, build_targets, density_from_preset, load_config
from .dynamics import (DegenerateSupportError, bridge_coefficients, control_bounds, marginals, residuals,
                       step_relative_entropy, sweep)
from .grid import check_coefficients
from .kernel import build_step_kernels
from .montecarlo import (SimConfig, bridge_fields, control_cost, empirical_terminal, optimal_controls,
                         path_cost, reference_fields, simulate, total_variation, write_ensemble_csv)
from .scenarios import DeadSupport, ScenarioKind, TargetPair, validate_targets
from .schrodinger import AbsoluteContinuityError, reference_terminal, sinkhorn_solve, static_residuals

log = logging.getLogger("usbp")

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_NONCONVERGENCE = 0, 1, 2, 3
OUTPUT_ENV = "USBP_OUTPUT_DIR"


class ValidationFailure(RuntimeError):
    pass


class NonConvergence(RuntimeError):
    pass


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _dead_coords(ds: DeadSupport):
    """Yield ``(flat_index, x, tau)`` for every dead cell; absent coordinates are None."""
    grid = ds.grid
    for flat, idx in enumerate(np.ndindex(*ds.shape)):
        if ds.kind in (ScenarioKind.JOINT, ScenarioKind.STAR):
            yield flat, idx, grid.x[idx[0]], grid.t[idx[1]]
        elif ds.kind is ScenarioKind.TIME_ONLY:
            yield flat, idx, None, grid.t[idx[0]]
        elif ds.kind is ScenarioKind.SPACE_ONLY:
            yield flat, idx, grid.x[idx[0]], None
        else:
            yield flat, idx, None, None


def prepare(cfg: ExperimentConfig, scenario: ScenarioKind | None = None):
    """Validate the configuration and build kernels, mu0 and targets."""
    problems = check_coefficients(cfg.coefficients, cfg.grid)
    if problems:
        raise ValidationFailure("; ".join(problems))
    try:
        sk = build_step_kernels(cfg.coefficients, cfg.grid)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None
    try:
        mu0 = density_from_preset(cfg.mu0, cfg.grid, cfg.base_dir)
        targets = build_targets(cfg, sk, mu0, scenario)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("targets", str(exc)) from None
    ref = reference_terminal(sk, targets.support, mu0)
    violations = validate_targets(targets, ref)
    bad0 = np.argwhere((targets.rho0 > 0) & (mu0 <= 0))
    if bad0.size:
        violations.append(f"absolute continuity [rho0({int(bad0[0][0])})]: initial target outside mu0 support")
    if violations:
        raise ValidationFailure("; ".join(str(v) for v in violations))
    return sk, mu0, targets


def solve(cfg: ExperimentConfig, out: Path) -> dict:
    sk, mu0, targets = prepare(cfg)
    try:
        pot, diag = sinkhorn_solve(sk, targets, mu0, cfg.tol, cfg.max_iter)
    except AbsoluteContinuityError as exc:
        raise ValidationFailure(str(exc)) from None
    ps = sweep(pot, mu0, sk)
    ds = ps.support
    grid = cfg.grid

    _write_csv(out / "potentials.csv", ["regime", "x", "tau", "f", "g"], (
        [("a", _num(grid.x[k]), "", _num(pot.f_active[k]), _num(pot.g_active[k])) for k in range(grid.n_space)]
        + [("d", _num(x), _num(tau), "", _num(pot.g_dead[idx])) for _, idx, x, tau in _dead_coords(ds)]
    ))

    def marginal_rows():
        for m in range(grid.n_steps + 1):
            act, dead = marginals(ps, m)
            t = _num(grid.t[m])
            for k in range(grid.n_space):
                yield t, "a", _num(grid.x[k]), "", _num(act[k])
            for _, idx, x, tau in _dead_coords(ds):
                yield t, "d", _num(x), _num(tau), _num(dead[idx])

    _write_csv(out / "marginals.csv", ["t", "regime", "x", "tau", "density"], marginal_rows())

    field_rows = []
    degenerate = None
    for m in range(grid.n_steps):
        try:
            drift, rate = bridge_coefficients(ps, sk, m)
        except DegenerateSupportError as exc:
            degenerate = str(exc)
            break
        field_rows.extend((_num(grid.t[m]), _num(grid.x[k]), _num(drift[k]), _num(rate[k]))
                          for k in range(grid.n_space))
    _write_csv(out / "bridge_fields.csv", ["t", "x", "drift", "kill_rate"], field_rows)

    kl = kl_bridge(pot, targets)
    diagnostics = {
        "scenario": targets.scenario.value,
        "sinkhorn": {"iterations": diag.iterations, "marginal_error": diag.marginal_error,
                     "converged": diag.converged, "error_history": diag.error_history},
        "static_residuals": static_residuals(pot, targets, sk, mu0),
        "dynamic_residuals": residuals(ps, sk),
        "control_bounds": control_bounds(ps, sk) if degenerate is None else None,
        "degenerate_support": degenerate,
        "kl": kl,
    }
    _write_json(out / "diagnostics.json", diagnostics)
    if not diag.converged:
        raise NonConvergence(f"Sinkhorn did not converge: marginal error {diag.marginal_error:.3g} "
                             f"after {diag.iterations} iterations")
    return {"sk": sk, "mu0": mu0, "targets": targets, "potentials": pot, "sweep": ps, "kl": kl}


def run_simulation(cfg: ExperimentConfig, out: Path, solved: dict, seed: int) -> None:
    sim = cfg.simulate or {}
    sk, mu0, targets, ps = solved["sk"], solved["mu0"], solved["targets"], solved["sweep"]
    n = int(sim.get("n_paths", 100_000))
    workers = int(sim.get("workers", 1))
    grid = cfg.grid
    ds = ps.support

    ens = simulate(SimConfig(n, seed, "bridge", workers), bridge_fields(ps, sk), grid, targets.rho0)
    tv_bridge = total_variation(empirical_terminal(ens, ds), targets)
    ref_ens = simulate(SimConfig(n, seed, "reference", workers), reference_fields(sk), grid, mu0)
    ref_a, ref_d = reference_terminal(sk, ds, mu0)
    ref_law = TargetPair.from_masses(grid.weights * mu0,
                                     None if ds.kind is ScenarioKind.STAR else ref_a, ref_d, ds.kind, grid)
    tv_ref = total_variation(empirical_terminal(ref_ens, ds), ref_law)

    u, xi = optimal_controls(ps, sk)
    cost, cost_se = control_cost(ens, u, xi, sk.v[:grid.n_steps])
    chain_cost, chain_se = path_cost(ens, step_relative_entropy(ps, sk))
    pos = targets.rho0 > 0
    kl_initial = float(np.sum(targets.rho0_mass[pos] * np.log(targets.rho0[pos] / mu0[pos])))
    kl_dynamic = solved["kl"] - kl_initial

    def z(est, se):
        return None if se == 0 else (est - kl_dynamic) / se

    payload = {
        "n_paths": n, "seed": seed,
        "tv_bridge": tv_bridge, "tv_reference": tv_ref,
        "killed_fraction_bridge": float(np.mean(ens.kill_step >= 0)),
        "killed_fraction_reference": float(np.mean(ref_ens.kill_step >= 0)),
        "kl_bridge_vs_reference": solved["kl"],
        "kl_initial": kl_initial,
        "kl_bridge_vs_uncontrolled": kl_dynamic,
        "control_cost": {"mean": cost, "stderr": cost_se, "z": z(cost, cost_se)},
        "chain_control_cost": {"mean": chain_cost, "stderr": chain_se, "z": z(chain_cost, chain_se)},
    }
    _write_json(out / "simulation.json", payload)
    if sim.get("export_paths", False):
        write_ensemble_csv(ens, out / "paths.csv")


def run_compare(cfg: ExperimentConfig, out: Path) -> None:
    sk, mu0, joint = prepare(cfg, ScenarioKind.JOINT)
    try:
        report = compare_scenarios(joint, sk, mu0, sinkhorn_tol=cfg.tol, max_iter=cfg.max_iter)
    except ScenarioSolveError as exc:
        if exc.diagnostics is None:
            raise ValidationFailure(str(exc)) from None
        raise NonConvergence(str(exc)) from None
    _write_json(out / "comparison.json", report.to_dict())
    rows = []
    for kind, t in report.targets.items():
        for _, idx, x, tau in _dead_coords(t.support):
            rows.append((kind.value, _num(x), _num(tau), _num(t.rhoT_dead[idx]),
                         _num(report.potentials[kind].g_dead[idx])))
    _write_csv(out / "dead_targets.csv", ["scenario", "x", "tau", "density", "g"], rows)


def _manifest(cfg: ExperimentConfig, command: str, seed: int | None) -> dict:
    raw = json.loads(json.dumps(cfg.raw, default=str))
    if seed is not None:
        raw.setdefault("simulate", {})["seed"] = seed
    return {
        "command": command,
        "config": raw,
        "seed": seed,
        "versions": {"usbp": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }


def execute(command: str, config_path: str) -> int:
    try:
        cfg = load_config(config_path, os.environ.get(OUTPUT_ENV) or None)
        if command == "validate":
            prepare(cfg)
            if cfg.compare:
                prepare(cfg, ScenarioKind.JOINT)
            print("configuration and assumptions OK")
            return EXIT_OK
        out = cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
        seed = None
        do_sim = command == "simulate" or (command == "run" and cfg.simulate is not None)
        if do_sim:
            sim = cfg.simulate or {}
            seed = int(sim["seed"]) if "seed" in sim else secrets.randbits(63)
        _write_json(out / "manifest.json", _manifest(cfg, command, seed))
        if command != "compare":
            solved = solve(cfg, out)
            if do_sim:
                run_simulation(cfg, out, solved, seed)
        if command == "compare" or (command == "run" and cfg.compare):
            run_compare(cfg, out)
        print(f"wrote results to {out}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationFailure as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NonConvergence as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="usbp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("solve", "solve the Schrodinger system and write potentials, marginals, bridge fields"),
        ("simulate", "solve, then validate by Monte Carlo"),
        ("compare", "solve all four scenarios and check the KL ordering"),
        ("validate", "check the configuration and the model assumptions only"),
        ("run", "solve, plus simulation/comparison when enabled in the config"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="TOML or JSON experiment file")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return execute(args.command, args.config)


if __name__ == "__main__":
    sys.exit(main())
