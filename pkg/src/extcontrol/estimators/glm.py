"""Maximum-likelihood fits for the two parametric families used everywhere:
logistic regression (damped Newton-Raphson) and weighted least squares.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..errors import ModelFitError, PerfectSeparation

__all__ = ["GlmFit", "fit_linear", "fit_logistic", "log_likelihood", "score"]

SEPARATION_NORM = 1e3


@dataclass(frozen=True)
class GlmFit:
    family: str
    coef: np.ndarray
    se: np.ndarray
    iterations: int
    grad_norm: float
    loglik: float

    def linear_predictor(self, X: np.ndarray, offset: np.ndarray | float = 0.0) -> np.ndarray:
        return X @ self.coef + offset

    def predict(self, X: np.ndarray, offset: np.ndarray | float = 0.0) -> np.ndarray:
        eta = self.linear_predictor(X, offset)
        return expit(eta) if self.family == "logistic" else eta


def _weights(w, n):
    if w is None:
        return np.ones(n)
    w = np.asarray(w, dtype=float)
    if w.shape != (n,) or (w < 0).any():
        raise ValueError("weights must be a non-negative vector of length n")
    return w


def log_likelihood(beta, X, y, w=None, offset=0.0) -> float:
    """Mean (weighted) Bernoulli log-likelihood; y may be fractional in [0, 1]."""
    w = _weights(w, len(y))
    eta = X @ beta + offset
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))) / w.sum())


def score(beta, X, y, w=None, offset=0.0) -> np.ndarray:
    """Gradient of :func:`log_likelihood` with respect to ``beta``."""
    w = _weights(w, len(y))
    p = expit(X @ beta + offset)
    return X.T @ (w * (y - p)) / w.sum()


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    offset: np.ndarray | float = 0.0,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> GlmFit:
    """Logistic MLE by Newton-Raphson with step halving.

    Convergence is declared when the infinity norm of the mean score is at
    most ``tol``. Diverging coefficients (norm above 1e3) are reported as
    :class:`PerfectSeparation`.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = _weights(weights, n)
    wsum = w.sum()
    if wsum <= 0:
        raise ModelFitError("no observations with positive weight")
    if np.linalg.matrix_rank(X[w > 0]) < p:
        raise ModelFitError("design matrix is rank deficient")

    beta = np.zeros(p)
    ll = log_likelihood(beta, X, y, w, offset)
    step = np.zeros(p)
    for it in range(1, max_iter + 1):
        eta = X @ beta + offset
        mu = expit(eta)
        grad = X.T @ (w * (y - mu)) / wsum
        gnorm = float(np.max(np.abs(grad))) if p else 0.0
        hess = (X * (w * mu * (1.0 - mu))[:, None]).T @ X / wsum
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        # a vanishing score with non-shrinking Newton steps means no finite maximiser
        if gnorm <= tol and (not p or np.max(np.abs(step)) <= 1e-6 * max(1.0, np.max(np.abs(beta)))):
            if p and np.linalg.cond(hess) > 1e14:
                raise PerfectSeparation(
                    f"information matrix is singular at the optimum (coefficient norm {np.linalg.norm(beta):.3g}); "
                    "outcome is (quasi-)separated by the covariates"
                )
            # one extra Newton step: free at quadratic convergence, removes the last ~tol of error
            beta = beta + step
            mu = expit(X @ beta + offset)
            gnorm = float(np.max(np.abs(X.T @ (w * (y - mu)) / wsum))) if p else 0.0
            return _finish("logistic", X, w, beta, mu, it, gnorm, log_likelihood(beta, X, y, w, offset))
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            ll_new = log_likelihood(cand, X, y, w, offset)
            if ll_new >= ll - 1e-14 * max(1.0, abs(ll)):
                break
            t *= 0.5
        beta, ll = cand, ll_new
        if np.linalg.norm(beta) > SEPARATION_NORM:
            raise PerfectSeparation(
                f"coefficients diverged (norm {np.linalg.norm(beta):.3g}); outcome is separated by the covariates"
            )
    mu = expit(X @ beta + offset)
    grad = X.T @ (w * (y - mu)) / wsum
    gnorm = float(np.max(np.abs(grad))) if p else 0.0
    if gnorm <= 1e-6 and np.max(np.abs(step)) > 1e-2:
        raise PerfectSeparation(
            f"coefficients diverging after {max_iter} Newton steps (norm {np.linalg.norm(beta):.3g}); "
            "outcome is (quasi-)separated by the covariates"
        )
    raise ModelFitError(f"Newton-Raphson did not converge in {max_iter} iterations (score norm {gnorm:.3g})")


def _finish(family, X, w, beta, mu, iters, gnorm, ll) -> GlmFit:
    info = (X * (w * mu * (1.0 - mu))[:, None]).T @ X
    try:
        cov = np.linalg.inv(info)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.full(len(beta), np.nan)
    return GlmFit(family, beta, se, iters, gnorm, ll)


def fit_linear(X: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None) -> GlmFit:
    """Weighted least squares with classical standard errors."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = _weights(weights, n)
    if np.linalg.matrix_rank(X[w > 0]) < p:
        raise ModelFitError("design matrix is rank deficient")
    sw = np.sqrt(w)
    beta, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    resid = y - X @ beta
    dof = max(int((w > 0).sum()) - p, 1)
    sigma2 = float(np.sum(w * resid**2) / dof)
    try:
        cov = sigma2 * np.linalg.inv((X * w[:, None]).T @ X)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.full(p, np.nan)
    grad = X.T @ (w * resid) / w.sum()
    gnorm = float(np.max(np.abs(grad))) if p else 0.0
    return GlmFit("linear", beta, se, 1, gnorm, -0.5 * float(np.sum(w * resid**2)))
