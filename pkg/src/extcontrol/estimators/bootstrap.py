"""Arm-stratified nonparametric bootstrap."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

from ..data import Dataset
from ..errors import ExtControlError, ModelFitError
from ..rng import make_rng

__all__ = ["bootstrap_ci", "bootstrap_replicates"]

MIN_REPLICATES = 100


def _resample(ds: Dataset, rng: np.random.Generator) -> np.ndarray:
    parts = []
    for arm in (0, 1):
        idx = np.flatnonzero(ds.treatment == arm)
        if len(idx):
            parts.append(rng.choice(idx, size=len(idx), replace=True))
    return np.sort(np.concatenate(parts))


def bootstrap_replicates(
    estimator: Callable[..., float],
    ds: Dataset,
    B: int = 1000,
    seed: int = 0,
    weights: np.ndarray | None = None,
    threads: int = 1,
) -> np.ndarray:
    """B estimates on resamples drawn within each treatment arm.

    ``estimator`` is called as ``estimator(ds_b)`` or, when ``weights`` is
    given, ``estimator(ds_b, w_b)``. Replicate ``b`` draws from the stream
    ``(seed, b, attempt)``, so results do not depend on ``threads``. A
    replicate whose estimator raises a model error is redrawn; more than
    ``10 * B`` attempts in total is an error.
    """
    if B < MIN_REPLICATES:
        raise ValueError(f"bootstrap needs B >= {MIN_REPLICATES}, got {B}")
    cap = 10 * B

    def one(b: int) -> tuple[float, int]:
        for attempt in range(cap):
            rows = _resample(ds, make_rng(seed, b, attempt))
            try:
                if weights is None:
                    val = estimator(ds.subset(rows))
                else:
                    val = estimator(ds.subset(rows), np.asarray(weights)[rows])
            except (ExtControlError, np.linalg.LinAlgError):
                continue
            return float(val), attempt + 1
        return float("nan"), cap

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(B)))
    else:
        results = [one(b) for b in range(B)]
    attempts = sum(a for _, a in results)
    values = np.array([v for v, _ in results])
    if attempts > cap or np.isnan(values).any():
        raise ModelFitError(f"bootstrap exceeded {cap} attempts for {B} replicates")
    return values


def bootstrap_ci(
    estimator: Callable[..., float],
    ds: Dataset,
    B: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    weights: np.ndarray | None = None,
    threads: int = 1,
) -> tuple[float, float]:
    """Percentile interval from :func:`bootstrap_replicates`."""
    reps = bootstrap_replicates(estimator, ds, B, seed, weights, threads)
    alpha = 1.0 - level
    lo, hi = np.quantile(reps, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)
