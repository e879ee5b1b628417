"""Propensity and outcome models, ATE estimators, exact binomial test, diagnostics."""

from .binomial import BinomialTestResult, binomial_response_test
from .bootstrap import bootstrap_ci, bootstrap_replicates
from .diagnostics import IdentifiabilityReport, identifiability_diagnostics, standardized_mean_differences
from .effects import EffectEstimate, TmleState, g_computation, ipw, naive_difference, tmle
from .glm import GlmFit, fit_linear, fit_logistic
from .models import (
    DEFAULT_TRUNCATION,
    OutcomeModel,
    OutcomeSpec,
    PropensityModel,
    fit_outcome,
    fit_propensity,
)

__all__ = [
    "BinomialTestResult",
    "DEFAULT_TRUNCATION",
    "EffectEstimate",
    "GlmFit",
    "IdentifiabilityReport",
    "OutcomeModel",
    "OutcomeSpec",
    "PropensityModel",
    "TmleState",
    "binomial_response_test",
    "bootstrap_ci",
    "bootstrap_replicates",
    "fit_linear",
    "fit_logistic",
    "fit_outcome",
    "fit_propensity",
    "g_computation",
    "identifiability_diagnostics",
    "ipw",
    "naive_difference",
    "standardized_mean_differences",
    "tmle",
]
