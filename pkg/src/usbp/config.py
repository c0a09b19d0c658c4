"""Experiment configuration: loading (TOML or JSON), presets for mu0 and targets, CSV readers."""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .expr import ExprError
from .grid import CoefficientSet, GridSpec
from .kernel import StepKernels
from .scenarios import DeadSupport, ScenarioKind, TargetPair, project_target
from .schrodinger import DEFAULT_MAX_ITER, DEFAULT_TOL, reference_terminal

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass
class ExperimentConfig:
    grid: GridSpec
    coefficients: CoefficientSet
    coefficient_sources: dict[str, str]
    mu0: dict[str, Any]
    scenario: ScenarioKind
    targets: dict[str, Any]
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    simulate: dict[str, Any] | None = None
    compare: bool = False
    output_dir: Path = Path("output")
    base_dir: Path = Path(".")
    raw: dict[str, Any] = field(default_factory=dict)


def _section(raw: dict, key: str, required: bool = True) -> dict:
    val = raw.get(key)
    if val is None:
        if required:
            raise ConfigError(key, "missing section")
        return {}
    if not isinstance(val, dict):
        raise ConfigError(key, "must be a table/object")
    return val


def _get(sec: dict, prefix: str, key: str, typ, default=None, required: bool = False):
    if key not in sec:
        if required:
            raise ConfigError(f"{prefix}.{key}", "missing value")
        return default
    try:
        return typ(sec[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix}.{key}", f"invalid value {sec[key]!r} ({exc})") from None


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return tomllib.loads(text.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from None


def load_config(path: str | Path, output_override: str | None = None) -> ExperimentConfig:
    path = Path(path)
    raw = read_config_file(path)
    base = path.resolve().parent

    g = _section(raw, "grid")
    try:
        grid = GridSpec(
            _get(g, "grid", "x_min", float, required=True),
            _get(g, "grid", "x_max", float, required=True),
            _get(g, "grid", "n_space", int, required=True),
            _get(g, "grid", "t_horizon", float, required=True),
            _get(g, "grid", "n_steps", int, required=True),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("grid", str(exc)) from None

    c = _section(raw, "coefficients")
    sources = {name: _get(c, "coefficients", name, str, required=True) for name in ("b", "sigma", "v")}
    try:
        coeffs = CoefficientSet.from_strings(**sources)
    except ExprError as exc:
        bad = next(n for n, s in sources.items() if _parses_badly(s))
        raise ConfigError(f"coefficients.{bad}", str(exc)) from None

    mu0 = _section(raw, "mu0", required=False) or {"kind": "uniform"}
    _check_density_preset(mu0, "mu0", base)

    try:
        scenario = ScenarioKind.parse(raw.get("scenario", "joint"))
    except ValueError as exc:
        raise ConfigError("scenario", str(exc)) from None

    t = _section(raw, "targets")
    kind = _get(t, "targets", "kind", str, "reference_kill_law")
    if kind not in ("reference_kill_law", "gaussian_mixture", "csv"):
        raise ConfigError("targets.kind", f"unknown preset {kind!r}")
    if "dead_mass" in t:
        dm = _get(t, "targets", "dead_mass", float)
        if not 0 < dm < 1:
            raise ConfigError("targets.dead_mass", "mass split must lie in (0, 1)")
    elif kind == "gaussian_mixture":
        raise ConfigError("targets.dead_mass", "required for gaussian_mixture targets")
    if kind == "gaussian_mixture":
        for part in ("active", "dead"):
            comps = t.get(part)
            if comps is None and part == "dead":
                continue
            _check_mixture(comps, f"targets.{part}")
    if kind == "csv":
        for key in ("active_path", "dead_path"):
            if key == "active_path" and scenario is ScenarioKind.STAR:
                continue
            p = _get(t, "targets", key, str, required=True)
            if not (base / p).is_file():
                raise ConfigError(f"targets.{key}", f"file not found: {p}")
    if "rho0" in t:
        if not isinstance(t["rho0"], dict):
            raise ConfigError("targets.rho0", "must be a table/object")
        _check_density_preset(t["rho0"], "targets.rho0", base)

    s = _section(raw, "solver", required=False)
    tol = _get(s, "solver", "tol", float, DEFAULT_TOL)
    max_iter = _get(s, "solver", "max_iter", int, DEFAULT_MAX_ITER)
    if not tol > 0 or max_iter < 1:
        raise ConfigError("solver", "tol must be positive and max_iter at least 1")

    sim = raw.get("simulate")
    if sim is not None:
        if not isinstance(sim, dict):
            raise ConfigError("simulate", "must be a table/object")
        n = _get(sim, "simulate", "n_paths", int, 100_000)
        if n < 1:
            raise ConfigError("simulate.n_paths", "must be at least 1")
        if "seed" in sim:
            seed = _get(sim, "simulate", "seed", int)
            if not 0 <= seed < 2**64:
                raise ConfigError("simulate.seed", "must be a 64-bit unsigned integer")
        if _get(sim, "simulate", "workers", int, 1) < 1:
            raise ConfigError("simulate.workers", "must be at least 1")

    cmp_sec = _section(raw, "compare", required=False)
    compare = bool(cmp_sec.get("enabled", False))

    out = output_override or raw.get("output_dir", "output")
    out_path = Path(out)
    if not out_path.is_absolute():
        out_path = (base / out_path).resolve() if output_override is None else out_path.resolve()
    return ExperimentConfig(grid, coeffs, sources, mu0, scenario, t, tol, max_iter, sim, compare,
                            out_path, base, raw)


def _parses_badly(source: str) -> bool:
    from .expr import parse_expr
    try:
        parse_expr(source)
    except ExprError:
        return True
    return False


def _check_mixture(comps, key: str) -> None:
    if not isinstance(comps, list) or not comps:
        raise ConfigError(key, "expected a non-empty list of [weight, mean, std] components")
    for c in comps:
        if not (isinstance(c, (list, tuple)) and len(c) == 3):
            raise ConfigError(key, f"component {c!r} is not [weight, mean, std]")
        w, _, sd = (float(v) for v in c)
        if w <= 0 or sd <= 0:
            raise ConfigError(key, f"component {c!r} needs positive weight and std")


def _check_density_preset(spec: dict, key: str, base: Path) -> None:
    kind = spec.get("kind", "uniform")
    if kind == "uniform":
        return
    if kind == "gaussian":
        if float(spec.get("std", 1.0)) <= 0:
            raise ConfigError(f"{key}.std", "must be positive")
        return
    if kind == "point":
        if "x" not in spec:
            raise ConfigError(f"{key}.x", "missing value")
        return
    if kind == "csv":
        p = spec.get("path")
        if p is None:
            raise ConfigError(f"{key}.path", "missing value")
        if not (base / p).is_file():
            raise ConfigError(f"{key}.path", f"file not found: {p}")
        return
    raise ConfigError(f"{key}.kind", f"unknown preset {kind!r}")


def read_cell_csv(path: Path, n_index: int, shape: tuple[int, ...]) -> np.ndarray:
    """Read ``index..., value`` rows (header optional) into a dense array; missing cells are 0."""
    out = np.zeros(shape)
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                vals = [float(v) for v in row]
            except ValueError:
                if lineno == 1:
                    continue
                raise ValueError(f"{path}:{lineno}: non-numeric row {row!r}") from None
            if len(vals) != n_index + 1:
                raise ValueError(f"{path}:{lineno}: expected {n_index + 1} columns")
            idx = tuple(int(v) for v in vals[:n_index])
            if any(not 0 <= i < s for i, s in zip(idx, shape)):
                raise ValueError(f"{path}:{lineno}: cell {idx} outside {shape}")
            out[idx if idx else 0] = vals[-1]
    return out


def density_from_preset(spec: dict, grid: GridSpec, base: Path) -> np.ndarray:
    """Normalized density on the grid from a ``uniform | gaussian | point | csv`` preset."""
    kind = spec.get("kind", "uniform")
    x = grid.x
    if kind == "uniform":
        d = np.ones(grid.n_space)
    elif kind == "gaussian":
        mean, std = float(spec.get("mean", 0.0)), float(spec.get("std", 1.0))
        d = np.exp(-0.5 * ((x - mean) / std) ** 2)
    elif kind == "point":
        d = np.zeros(grid.n_space)
        d[int(np.argmin(np.abs(x - float(spec["x"]))))] = 1.0
    else:
        d = read_cell_csv(base / spec["path"], 1, (grid.n_space,))
    total = grid.weights @ d
    if not total > 0:
        raise ConfigError(str(spec.get("kind")), "density has no mass on the grid")
    return d / total


def _mixture(comps, x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for w, mean, std in comps:
        out += float(w) * np.exp(-0.5 * ((x - float(mean)) / float(std)) ** 2) / float(std)
    return out


def build_targets(cfg: ExperimentConfig, sk: StepKernels, mu0: np.ndarray,
                  scenario: ScenarioKind | None = None) -> TargetPair:
    """Targets in ``scenario`` (default: the configured one).

    Presets are built on the joint layout and projected; CSV targets are read in
    the configured scenario's layout.
    """
    grid = cfg.grid
    scenario = scenario or cfg.scenario
    t = cfg.targets
    rho0 = density_from_preset(t["rho0"], grid, cfg.base_dir) if "rho0" in t else mu0.copy()
    kind = t.get("kind", "reference_kill_law")
    joint_ds = DeadSupport(ScenarioKind.JOINT, grid)
    if kind == "csv":
        own = cfg.scenario
        if scenario is not own and own is not ScenarioKind.JOINT:
            raise ConfigError("targets.dead_path", f"CSV targets for {own.value} cannot be "
                              f"turned into {scenario.value} targets")
        ds = DeadSupport(own, grid)
        n_index = {1: 0 if ds.shape == (1,) else 1, 2: 2}[len(ds.shape)]
        dead = read_cell_csv(cfg.base_dir / t["dead_path"], n_index, ds.shape)
        active = None
        if own is not ScenarioKind.STAR:
            active = read_cell_csv(cfg.base_dir / t["active_path"], 1, (grid.n_space,))
        pair = TargetPair(rho0, active, dead, own, grid)
        return pair if scenario is own else project_target(pair, scenario)

    ref_active, ref_dead = reference_terminal(sk, joint_ds, mu0)
    if kind == "reference_kill_law":
        active_mass, dead_mass = ref_active, ref_dead
        if "dead_mass" in t:
            dm = float(t["dead_mass"])
            active_mass = ref_active * (1 - dm) / ref_active.sum()
            dead_mass = ref_dead * dm / ref_dead.sum()
    else:
        dm = float(t["dead_mass"])
        active_mass = grid.weights * _mixture(t["active"], grid.x)
        active_mass *= (1 - dm) / active_mass.sum()
        tilt = _mixture(t["dead"], grid.x) if t.get("dead") else np.ones(grid.n_space)
        dead_mass = ref_dead * tilt[:, None]
        dead_mass *= dm / dead_mass.sum()
    joint = TargetPair.from_masses(grid.weights * rho0, active_mass, dead_mass, ScenarioKind.JOINT, grid)
    return joint if scenario is ScenarioKind.JOINT else project_target(joint, scenario)
