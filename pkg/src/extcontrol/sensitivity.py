"""Robustness of a conclusion to violated identifiability assumptions.

Two tools: an additive causal-gap sweep on the difference scale, and the
E-value on the risk-ratio scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import EmptyGrid, GridMissingZero, NonpositiveRatio, ZeroControlRate

__all__ = [
    "BIAS_ANALYSIS_ORDER",
    "CausalGapGrid",
    "EvalueResult",
    "RiskRatio",
    "causal_gap_sweep",
    "e_value",
    "risk_ratio_from_arms",
]

# biases are modelled in reverse order of occurrence
BIAS_ANALYSIS_ORDER = ("confounding", "selection", "information")


@dataclass(frozen=True)
class CausalGapGrid:
    eta: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    tipping_eta: float | None
    null: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "eta": self.eta.tolist(),
            "estimate": self.estimate.tolist(),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "tipping_eta": self.tipping_eta if self.tipping_eta is not None else "none in range",
            "null": self.null,
            "bias_analysis_order": list(BIAS_ANALYSIS_ORDER),
        }

    def summary(self) -> str:
        if self.tipping_eta is None:
            return "conclusion unchanged over the supplied causal-gap range"
        return f"conclusion flips at causal gap eta = {self.tipping_eta:g}"


def _estimate_parts(est) -> tuple[float, float, float]:
    if hasattr(est, "psi_hat"):
        if est.ci is None:
            raise ValueError("causal-gap sweep needs an estimate with a confidence interval")
        return float(est.psi_hat), float(est.ci[0]), float(est.ci[1])
    psi, (lo, hi) = est
    return float(psi), float(lo), float(hi)


def causal_gap_sweep(est, grid: Sequence[float]) -> CausalGapGrid:
    """Shift the estimate and its CI by each gap eta (psi_causal = psi_stat + eta read as a bias correction).

    ``est`` is an :class:`~extcontrol.estimators.EffectEstimate` or a
    ``(psi_hat, (lo, hi))`` pair. ``tipping_eta`` is the grid value of
    smallest magnitude at which the conclusion flips (ties go to the
    positive side); ``None`` if no grid value
    flips the conclusion. A flip is any change in whether the shifted CI
    covers 0 relative to the unshifted CI.
    """
    eta = np.asarray(list(grid), dtype=float)
    if eta.size == 0:
        raise EmptyGrid("causal-gap grid is empty")
    if not np.any(eta == 0.0):
        raise GridMissingZero("causal-gap grid must contain 0")
    order = np.argsort(eta, kind="stable")
    eta = eta[order]
    psi, lo, hi = _estimate_parts(est)
    shifted, lower, upper = psi - eta, lo - eta, hi - eta
    covers = (lower <= 0.0) & (upper >= 0.0)
    base = lo <= 0.0 <= hi
    flips = np.flatnonzero(covers != base)
    tipping = None
    if flips.size:
        mags = np.abs(eta[flips])
        tipping = float(eta[flips[mags == mags.min()]].max())
    return CausalGapGrid(eta, shifted, lower, upper, tipping)


@dataclass(frozen=True)
class EvalueResult:
    rr_input: float
    evalue_point: float
    evalue_ci: float | None

    def to_dict(self) -> dict[str, Any]:
        return {"rr": self.rr_input, "evalue_point": self.evalue_point, "evalue_ci": self.evalue_ci}


def _evalue_at_least_one(rr: float) -> float:
    return rr + math.sqrt(rr * (rr - 1.0))


def _evalue(rr: float) -> float:
    # protective ratios go through the same code path as their reciprocal, so
    # e_value(1 / r) == e_value(r) bit for bit whenever 1 / (1 / r) == r
    return _evalue_at_least_one(rr if rr >= 1.0 else 1.0 / rr)


def e_value(rr: float, ci: tuple[float, float] | None = None) -> EvalueResult:
    """E-value for a risk ratio (protective ratios use the reciprocal).

    When ``ci`` is given, the CI E-value uses the bound closer to 1 and is
    1 if the interval contains 1.
    """
    if not rr > 0:
        raise NonpositiveRatio(f"risk ratio must be positive, got {rr}")
    point = _evalue(rr)
    rr_used = rr if rr >= 1.0 else 1.0 / rr
    ev_ci = None
    if ci is not None:
        lo, hi = ci
        if lo <= 0:
            raise NonpositiveRatio(f"risk-ratio CI bounds must be positive, got {ci}")
        if lo <= 1.0 <= hi:
            ev_ci = 1.0
        else:
            ev_ci = _evalue(lo if rr >= 1.0 else hi)
    return EvalueResult(rr_used, point, ev_ci)


@dataclass(frozen=True)
class RiskRatio:
    rr: float
    ci: tuple[float, float] | None
    level: float


def risk_ratio_from_arms(treated: tuple[int, int], control: tuple[int, int], level: float = 0.95) -> RiskRatio:
    """Crude risk ratio with a log-scale Wald interval."""
    from scipy.stats import norm

    x1, n1 = treated
    x0, n0 = control
    if n1 <= 0 or n0 <= 0:
        raise ValueError("both arms need n > 0")
    if x0 <= 0:
        raise ZeroControlRate("control arm has no events")
    rr = (x1 / n1) / (x0 / n0)
    ci = None
    if x1 > 0:
        se = math.sqrt(1 / x1 - 1 / n1 + 1 / x0 - 1 / n0)
        z = norm.ppf(0.5 + level / 2)
        ci = (math.exp(math.log(rr) - z * se), math.exp(math.log(rr) + z * se))
    return RiskRatio(rr, ci, level)
