"""Checks of the three identifiability conditions on an analysis sample."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from ..data import Dataset
from .models import PropensityModel

__all__ = ["IdentifiabilityReport", "identifiability_diagnostics", "standardized_mean_differences"]


def standardized_mean_differences(X: np.ndarray, A: np.ndarray) -> np.ndarray:
    t, c = A == 1, A == 0
    m1, m0 = np.nanmean(X[t], axis=0), np.nanmean(X[c], axis=0)
    v1, v0 = np.nanvar(X[t], axis=0, ddof=1), np.nanvar(X[c], axis=0, ddof=1)
    pooled = np.sqrt((v1 + v0) / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        smd = np.where(pooled > 0, (m1 - m0) / pooled, np.where(m1 == m0, 0.0, np.inf))
    return smd


@dataclass(frozen=True)
class IdentifiabilityReport:
    positivity: dict[str, Any]
    exchangeability: dict[str, Any]
    consistency: dict[str, Any]
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "positivity": self.positivity,
            "exchangeability": self.exchangeability,
            "consistency": self.consistency,
            "flags": self.flags,
        }


def identifiability_diagnostics(
    ds: Dataset,
    ps: PropensityModel,
    *,
    strata: Sequence[str] | None = None,
    smd_threshold: float = 0.1,
) -> IdentifiabilityReport:
    """Positivity, exchangeability (SMD) and consistency (ascertainment) checks.

    ``strata`` names the discrete covariates whose joint levels are checked
    for single-arm cells; by default all binary covariates are used.
    """
    lo, hi = ps.truncation
    raw = ps.raw_scores
    A = ds.treatment[ps.rows]
    flags: list[str] = []

    if strata is None:
        strata = tuple(c.name for c in ds.schema.columns if c.kind == "binary")
    cells = []
    if strata:
        S = ds.covariates(strata)[ps.rows]
        levels = [np.unique(S[:, j][~np.isnan(S[:, j])]) for j in range(S.shape[1])]
        for combo in itertools.product(*levels):
            mask = np.all(S == np.asarray(combo), axis=1)
            if not mask.any():
                continue
            n1, n0 = int(A[mask].sum()), int((1 - A[mask]).sum())
            cells.append({
                "stratum": dict(zip(strata, (float(v) for v in combo))),
                "n_treated": n1,
                "n_control": n0,
                "single_arm": n1 == 0 or n0 == 0,
            })
    single = [c for c in cells if c["single_arm"]]
    below, above = int(np.sum(raw < lo)), int(np.sum(raw > hi))
    positivity = {
        "min_score": float(raw.min()),
        "max_score": float(raw.max()),
        "n_below": below,
        "n_above": above,
        "truncation": [lo, hi],
        "strata": cells,
        "single_arm_strata": len(single),
    }
    if below or above:
        flags.append("positivity:extreme-scores")
    if single:
        flags.append("positivity:single-arm-stratum")

    names = ds.covariate_names
    smd = standardized_mean_differences(ds.X[ps.rows], A) if names else np.zeros(0)
    imbalanced = [nm for nm, v in zip(names, smd) if abs(v) > smd_threshold]
    exchangeability = {
        "smd": {nm: float(v) for nm, v in zip(names, smd)},
        "threshold": smd_threshold,
        "imbalanced": imbalanced,
    }
    if imbalanced:
        flags.append("exchangeability:imbalance")

    used = set(np.unique(ds.source[ps.rows]).tolist())
    labels = {s.name: s.ascertainment for s in ds.provenance if s.name in used}
    distinct = sorted(set(labels.values()))
    consistency = {"ascertainment": labels, "differs": len(distinct) > 1}
    if len(distinct) > 1:
        flags.append("consistency:ascertainment-differs")
    return IdentifiabilityReport(positivity, exchangeability, consistency, flags)
