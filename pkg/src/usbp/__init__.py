"""Unbalanced Schrodinger bridges for diffusions with killing, on a finite grid."""

__version__ = "0.1.0"

from .compare import compare_scenarios, equality_target, kl_bridge
from .dynamics import bridge_coefficients, bridge_kernel, marginals, residuals, sweep
from .expr import ExprError, parse_expr
from .grid import CoefficientSet, GridSpec, integrate, sample_field
from .kernel import (AnalyticBrownianParams, analytic_brownian_kernel, build_step_kernels,
                     cross_kill_weight, kernel_between)
from .scenarios import DeadSupport, ScenarioKind, TargetPair, project_target, psi_index, validate_targets
from .schrodinger import Potentials, sinkhorn_solve, solve_star

__all__ = [
    "AnalyticBrownianParams", "CoefficientSet", "DeadSupport", "ExprError", "GridSpec", "Potentials",
    "ScenarioKind", "TargetPair", "analytic_brownian_kernel", "bridge_coefficients", "bridge_kernel",
    "build_step_kernels", "compare_scenarios", "cross_kill_weight", "equality_target", "integrate",
    "kernel_between", "kl_bridge", "marginals", "parse_expr", "project_target", "psi_index", "residuals",
    "sample_field", "sinkhorn_solve", "solve_star", "sweep", "validate_targets",
]
