"""Sparse functional concurrent log-contrast regression.

Estimates time-varying effects of compositional covariates on a functional
response with zero-sum-constrained group-lasso penalization, plus the
simulation and tuning machinery around it.
"""

from .basis import BasisSpec, eval_basis, expand_basis, make_basis
from .design import (
    ConstraintSet,
    FunctionalPanel,
    build_constraints,
    build_controls,
    close,
    log_transform,
    no_constraints,
    zero_replace,
)
from .quadrature import GramSystem, build_gram, recover_control, trapezoid_weights
from .solver import (
    FitResult,
    SolverConfig,
    alr_design,
    augmented_lagrangian,
    choose_references,
    fit_bgl,
    group_soft_threshold,
    inner_group_lasso,
    kkt_residual,
    lambda_grid,
    lambda_max,
    map_alr_coefficients,
    predict,
    solve_path,
)

__all__ = [
    "BasisSpec", "make_basis", "eval_basis", "expand_basis",
    "FunctionalPanel", "ConstraintSet", "zero_replace", "close",
    "log_transform", "build_controls", "build_constraints", "no_constraints",
    "GramSystem", "trapezoid_weights", "build_gram", "recover_control",
    "SolverConfig", "FitResult", "group_soft_threshold", "inner_group_lasso",
    "augmented_lagrangian", "lambda_max", "lambda_grid", "solve_path",
    "kkt_residual", "predict", "choose_references", "alr_design",
    "map_alr_coefficients", "fit_bgl",
]

__version__ = "0.1.0"
