"""Experiment driver: estimators, experiments, configuration, outputs and the CLI."""

from .experiments import (AuditReport, BarrierResult, FitUnstable, HorizonDominated, RateReport, TailResult,
                          UEstimate, barrier_experiment, discrete_representation_audit, estimate_u_eps, fit_rate,
                          query_grid, rate_experiment, tail_experiment)
from .registry import REGISTRY, NamedFunction, get_function

__all__ = [
    "AuditReport", "BarrierResult", "FitUnstable", "HorizonDominated", "RateReport", "TailResult", "UEstimate",
    "barrier_experiment", "discrete_representation_audit", "estimate_u_eps", "fit_rate", "query_grid",
    "rate_experiment", "tail_experiment", "REGISTRY", "NamedFunction", "get_function",
]
