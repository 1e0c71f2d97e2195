"""Controlled diffusions with prescribed marginal flows: dual solver, primal recovery, catalog, MFG."""

__version__ = "0.1.0"

from .cost import CostFunction, ValidationReport, validate_assumption_C
from .diffusion import DiffusionSpec, InitialLaw, PathEnsemble, girsanov_weight, simulate
from .marginals import (EmpiricalFlow, GaussianFlow, GridDensityFlow, MarginalFlow, MeasureSlice,
                        MixtureFlow, spacetime_quadrature, w1_slice_distance)
from .basis import DualSolution, TestFunctionBasis, luxemburg_norm
from .dual import DualSolverError, SolverOptions, dual_gradient, dual_objective, maximize_dual
from .primal import duality_gap_report, markov_statistic, primal_cost_mc, recover_drift, verify_marginals
from .config import ConfigError, RunConfig, parse_config

__all__ = [
    "CostFunction", "ValidationReport", "validate_assumption_C",
    "DiffusionSpec", "InitialLaw", "PathEnsemble", "girsanov_weight", "simulate",
    "EmpiricalFlow", "GaussianFlow", "GridDensityFlow", "MarginalFlow", "MeasureSlice", "MixtureFlow",
    "spacetime_quadrature", "w1_slice_distance",
    "DualSolution", "TestFunctionBasis", "luxemburg_norm",
    "DualSolverError", "SolverOptions", "dual_gradient", "dual_objective", "maximize_dual",
    "duality_gap_report", "markov_statistic", "primal_cost_mc", "recover_drift", "verify_marginals",
    "ConfigError", "RunConfig", "parse_config",
]
