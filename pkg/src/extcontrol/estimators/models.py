"""Nuisance models: the propensity score g(1, c) and the outcome regression Q(a, c)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..data import Dataset
from ..errors import ModelFitError, SingleArmSample
from .glm import GlmFit, fit_linear, fit_logistic

__all__ = [
    "DEFAULT_TRUNCATION",
    "OutcomeModel",
    "OutcomeSpec",
    "PropensityModel",
    "fit_outcome",
    "fit_propensity",
    "fit_propensity_arrays",
]

DEFAULT_TRUNCATION = (0.01, 0.99)


def _with_intercept(C: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(len(C)), C])


@dataclass(frozen=True)
class PropensityModel:
    """Fitted P(A = 1 | C) with truncated scores aligned to ``rows`` of the dataset."""

    covariates: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    raw_scores: np.ndarray
    scores: np.ndarray
    truncation: tuple[float, float]
    rows: np.ndarray
    iterations: int
    grad_norm: float

    @property
    def n_truncated(self) -> int:
        return int(np.sum(self.raw_scores != self.scores))

    @property
    def truncated(self) -> np.ndarray:
        return self.raw_scores != self.scores

    def predict(self, C: np.ndarray) -> np.ndarray:
        from scipy.special import expit

        lo, hi = self.truncation
        return np.clip(expit(_with_intercept(C) @ self.coef), lo, hi)

    def scores_for(self, rows: np.ndarray, raw: bool = False) -> np.ndarray:
        """Scores for dataset ``rows``; every row must have been used in the fit."""
        src = self.raw_scores if raw else self.scores
        pos = {int(r): i for i, r in enumerate(self.rows)}
        try:
            return src[[pos[int(r)] for r in rows]]
        except KeyError:
            raise ValueError("propensity model was not fitted on every row of this sample") from None


def _check_truncation(trunc):
    lo, hi = trunc
    if not 0.0 <= lo < hi <= 1.0:
        raise ValueError(f"truncation bounds must satisfy 0 <= lo < hi <= 1, got {trunc}")
    return float(lo), float(hi)


def fit_propensity_arrays(C, A, weights=None, trunc=DEFAULT_TRUNCATION) -> tuple[GlmFit, np.ndarray, np.ndarray]:
    """Logistic fit of A on C; returns (fit, raw scores, truncated scores)."""
    A = np.asarray(A, dtype=float)
    if A.min() == A.max():
        raise SingleArmSample("propensity model needs at least one treated and one control subject")
    lo, hi = _check_truncation(trunc)
    fit = fit_logistic(_with_intercept(C), A, weights=weights)
    raw = fit.predict(_with_intercept(C))
    return fit, raw, np.clip(raw, lo, hi)


def fit_propensity(
    ds: Dataset,
    covariates: Sequence[str] | None = None,
    trunc: tuple[float, float] = DEFAULT_TRUNCATION,
    weights: np.ndarray | None = None,
    rows: np.ndarray | None = None,
) -> PropensityModel:
    """Propensity score by logistic MLE on complete cases.

    ``rows`` restricts the fit to a subset of the dataset (indices); missing
    covariate rows are always dropped.
    """
    names = tuple(ds.covariate_names if covariates is None else covariates)
    C_all = ds.covariates(names)
    if rows is None:
        rows = np.arange(len(ds))
    rows = np.asarray(rows)
    rows = rows[~np.isnan(C_all[rows]).any(axis=1)] if C_all.shape[1] else rows
    w = None if weights is None else np.asarray(weights, dtype=float)[rows]
    fit, raw, scores = fit_propensity_arrays(C_all[rows], ds.treatment[rows], w, trunc)
    return PropensityModel(
        covariates=names,
        coef=fit.coef,
        se=fit.se,
        raw_scores=raw,
        scores=scores,
        truncation=_check_truncation(trunc),
        rows=rows,
        iterations=fit.iterations,
        grad_norm=fit.grad_norm,
    )


@dataclass(frozen=True)
class OutcomeSpec:
    """Outcome regression E(Y | A, C).

    ``covariates=None`` uses every numeric covariate; ``treatment=False``
    drops A from the model (so Q(1, c) == Q(0, c)); ``interactions`` adds
    A x C terms for all (``True``) or the named covariates.
    """

    covariates: tuple[str, ...] | None = None
    family: str | None = None
    treatment: bool = True
    interactions: bool | tuple[str, ...] = False

    def __post_init__(self):
        if self.family not in (None, "logistic", "linear"):
            raise ValueError(f"family must be 'logistic' or 'linear', got {self.family!r}")
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))
        if isinstance(self.interactions, (list, tuple)):
            object.__setattr__(self, "interactions", tuple(self.interactions))

    @classmethod
    def intercept_only(cls, family: str | None = None) -> OutcomeSpec:
        return cls(covariates=(), family=family, treatment=False)

    def resolve(self, ds: Dataset) -> tuple[tuple[str, ...], str, tuple[int, ...]]:
        names = tuple(ds.covariate_names if self.covariates is None else self.covariates)
        family = self.family or ("logistic" if ds.endpoint == "binary" else "linear")
        if self.interactions is True:
            inter = tuple(range(len(names)))
        elif self.interactions:
            inter = tuple(names.index(nm) for nm in self.interactions)
        else:
            inter = ()
        return names, family, inter


@dataclass(frozen=True)
class OutcomeModel:
    family: str
    covariates: tuple[str, ...]
    treatment: bool
    interactions: tuple[int, ...]
    fit: GlmFit | None
    constant: float | None = None
    extra: dict = field(default_factory=dict)

    def design(self, A: np.ndarray | float, C: np.ndarray) -> np.ndarray:
        n = len(C)
        A = np.broadcast_to(np.asarray(A, dtype=float), (n,))
        cols = [np.ones(n)]
        if self.treatment:
            cols.append(A)
        cols.extend(C.T)
        cols.extend(A * C[:, j] for j in self.interactions)
        return np.column_stack(cols)

    def predict(self, A: np.ndarray | float, C: np.ndarray) -> np.ndarray:
        if self.constant is not None:
            return np.full(len(C), self.constant)
        return self.fit.predict(self.design(A, C))


def fit_outcome(
    C: np.ndarray,
    A: np.ndarray,
    Y: np.ndarray,
    *,
    family: str,
    covariates: tuple[str, ...] = (),
    treatment: bool = True,
    interactions: tuple[int, ...] = (),
    weights: np.ndarray | None = None,
) -> OutcomeModel:
    """Fit Q on observed rows. A constant outcome gives a constant model (no fit)."""
    Y = np.asarray(Y, dtype=float)
    if len(Y) == 0:
        raise ModelFitError("no observed outcomes to fit the outcome model")
    model = OutcomeModel(family, covariates, treatment, interactions, None)
    if np.all(Y == Y[0]):
        return OutcomeModel(family, covariates, treatment, interactions, None, constant=float(Y[0]))
    X = model.design(A, C)
    fit = fit_logistic(X, Y, weights=weights) if family == "logistic" else fit_linear(X, Y, weights=weights)
    return OutcomeModel(family, covariates, treatment, interactions, fit)
