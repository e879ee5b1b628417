"""Exact one-sided binomial test of H0: p <= p0 for a single-arm response rate."""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.special import logsumexp

from ..errors import InvalidCounts

__all__ = ["BinomialTestResult", "binomial_response_test", "binomial_upper_tail"]


def binomial_upper_tail(x: int, n: int, p0: float) -> float:
    """P(X >= x) for X ~ Bin(n, p0), summed in log space."""
    if x <= 0:
        return 1.0
    if x > n:
        return 0.0
    lp, lq = math.log(p0), math.log1p(-p0)
    lgn = math.lgamma(n + 1)
    terms = [lgn - math.lgamma(k + 1) - math.lgamma(n - k + 1) + k * lp + (n - k) * lq for k in range(x, n + 1)]
    return min(1.0, math.exp(logsumexp(terms)))


@dataclass(frozen=True)
class BinomialTestResult:
    x: int
    n: int
    p0: float
    p_value: float
    alpha: float
    reject: bool
    p_hat: float
    p1: float | None = None

    @property
    def meets_p1(self) -> bool | None:
        return None if self.p1 is None else self.p_hat >= self.p1


def binomial_response_test(x: int, n: int, p0: float, alpha: float = 0.05, p1: float | None = None) -> BinomialTestResult:
    if not (isinstance(x, int) and isinstance(n, int)) or n < 1 or not 0 <= x <= n:
        raise InvalidCounts(f"need integers 0 <= x <= n with n >= 1, got x={x!r}, n={n!r}")
    if not 0.0 < p0 < 1.0:
        raise ValueError(f"p0 must lie in (0, 1), got {p0}")
    p = binomial_upper_tail(x, n, p0)
    return BinomialTestResult(x, n, p0, p, alpha, p <= alpha, x / n, p1)
