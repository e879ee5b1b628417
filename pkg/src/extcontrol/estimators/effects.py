"""Average-treatment-effect estimators on the risk/mean-difference scale.

All estimators target

    psi = E_C[ E(Y | A=1, Delta=1, C) - E(Y | A=0, Delta=1, C) ]

By default (``observation="complete-case"``) subjects with Delta = 0 or
missing covariates are dropped and counted in ``n_dropped``. With
``observation="weighted"`` they are kept: Q is fitted on observed rows and
IPW/TMLE additionally weight by the inverse probability of observation
P(Delta = 1 | A, C).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from ..data import Dataset
from ..errors import PositivityViolation, SingleArmSample
from .bootstrap import bootstrap_replicates
from .glm import fit_logistic
from .models import (
    DEFAULT_TRUNCATION,
    OutcomeModel,
    OutcomeSpec,
    PropensityModel,
    fit_outcome,
    fit_propensity,
    fit_propensity_arrays,
)

__all__ = [
    "EffectEstimate",
    "TmleState",
    "g_computation",
    "ipw",
    "naive_difference",
    "tmle",
]

OBSERVATION_MODES = ("complete-case", "weighted")
CONTINUOUS_BOUND = 5e-4


@dataclass(frozen=True)
class EffectEstimate:
    method: str
    psi_hat: float
    variance: float | None
    ci: tuple[float, float] | None
    level: float
    n_used: int
    n_dropped: int
    arm_means: tuple[float, float] | None = None
    influence: np.ndarray | None = field(default=None, repr=False)
    ids: np.ndarray | None = field(default=None, repr=False)
    rr_ci: tuple[float, float] | None = None
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def se(self) -> float | None:
        return None if self.variance is None else float(np.sqrt(self.variance))

    @property
    def risk_ratio(self) -> float | None:
        if self.arm_means is None or self.arm_means[1] <= 0:
            return None
        return self.arm_means[0] / self.arm_means[1]

    def to_dict(self, include_influence: bool = False) -> dict[str, Any]:
        out = {
            "method": self.method,
            "psi_hat": self.psi_hat,
            "variance": self.variance,
            "se": self.se,
            "ci": None if self.ci is None else {"lo": self.ci[0], "hi": self.ci[1], "level": self.level},
            "n_used": self.n_used,
            "n_dropped": self.n_dropped,
            "arm_means": None if self.arm_means is None else {"treated": self.arm_means[0], "control": self.arm_means[1]},
            "risk_ratio": self.risk_ratio,
            "rr_ci": None if self.rr_ci is None else list(self.rr_ci),
            "diagnostics": self.diagnostics,
        }
        if include_influence and self.influence is not None:
            out["influence"] = {"ids": self.ids.tolist(), "values": self.influence.tolist()}
        return out


@dataclass
class _Sample:
    rows: np.ndarray
    C: np.ndarray
    A: np.ndarray
    D: np.ndarray
    Y: np.ndarray
    w: np.ndarray
    ids: np.ndarray
    n_dropped: int

    @property
    def observed(self) -> np.ndarray:
        return self.D == 1


def _prepare(ds: Dataset, covariates: Sequence[str], observation: str, weights) -> _Sample:
    if observation not in OBSERVATION_MODES:
        raise ValueError(f"observation must be one of {OBSERVATION_MODES}, got {observation!r}")
    keep = ds.complete_cases(covariates)
    if observation == "complete-case":
        keep &= ds.delta == 1
    rows = np.flatnonzero(keep)
    w = np.ones(len(ds)) if weights is None else np.asarray(weights, dtype=float)
    A = ds.treatment[rows].astype(float)
    if A.size == 0 or A.min() == A.max():
        raise SingleArmSample("estimation needs treated and control subjects")
    return _Sample(
        rows=rows,
        C=ds.covariates(covariates)[rows],
        A=A,
        D=ds.delta[rows].astype(int),
        Y=ds.outcome[rows],
        w=w[rows],
        ids=ds.ids[rows],
        n_dropped=len(ds) - len(rows),
    )


def _wmean(x, w) -> float:
    return float(np.sum(w * x) / np.sum(w))


def _ic_variance(ic, w) -> float:
    return float(np.sum((w * ic) ** 2) / np.sum(w) ** 2)


def _wald(psi, var, level) -> tuple[float, float]:
    z = norm.ppf(0.5 + level / 2)
    half = z * np.sqrt(var)
    return float(psi - half), float(psi + half)


def _log_rr_ci(mu1, mu0, ic1, ic0, w, level):
    if mu1 <= 0 or mu0 <= 0:
        return None
    var = _ic_variance(ic1 / mu1 - ic0 / mu0, w)
    lo, hi = _wald(np.log(mu1 / mu0), var, level)
    return float(np.exp(lo)), float(np.exp(hi))


def _observation_weights(s: _Sample, trunc) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """P(Delta = 1 | A, C) at observed A, at A=1 and at A=0."""
    if s.observed.all():
        one = np.ones(len(s.A))
        return one, one, one
    X = np.column_stack([np.ones(len(s.A)), s.A, s.C])
    fit = fit_logistic(X, s.D.astype(float), weights=s.w)
    lo = trunc[0]

    def at(a):
        Xa = X.copy()
        Xa[:, 1] = a
        return np.clip(fit.predict(Xa), lo, 1.0)

    return np.clip(fit.predict(X), lo, 1.0), at(1.0), at(0.0)


# ---------------------------------------------------------------------------
# naive comparison
# ---------------------------------------------------------------------------


def naive_difference(ds: Dataset, *, weights=None, level: float = 0.95) -> EffectEstimate:
    """Unadjusted difference in (weighted) arm means among observed outcomes."""
    s = _prepare(ds, (), "complete-case", weights)
    t, c = s.A == 1, s.A == 0
    mu1, mu0 = _wmean(s.Y[t], s.w[t]), _wmean(s.Y[c], s.w[c])
    ic1 = np.where(t, (s.Y - mu1) / (np.sum(s.w * t) / np.sum(s.w)), 0.0)
    ic0 = np.where(c, (s.Y - mu0) / (np.sum(s.w * c) / np.sum(s.w)), 0.0)
    ic = ic1 - ic0
    psi = mu1 - mu0
    var = _ic_variance(ic, s.w)
    return EffectEstimate(
        method="naive",
        psi_hat=psi,
        variance=var,
        ci=_wald(psi, var, level),
        level=level,
        n_used=len(s.rows),
        n_dropped=s.n_dropped,
        arm_means=(mu1, mu0),
        influence=ic,
        ids=s.ids,
        rr_ci=_log_rr_ci(mu1, mu0, ic1, ic0, s.w, level) if ds.endpoint == "binary" else None,
    )


# ---------------------------------------------------------------------------
# G-computation
# ---------------------------------------------------------------------------


def _fit_q(s: _Sample, spec: OutcomeSpec, ds: Dataset) -> OutcomeModel:
    names, family, inter = spec.resolve(ds)
    obs = s.observed
    return fit_outcome(
        s.C[obs], s.A[obs], s.Y[obs],
        family=family, covariates=names, treatment=spec.treatment, interactions=inter, weights=s.w[obs],
    )


def _gcomp_point(ds, spec, weights, observation) -> tuple[float, float, float, _Sample]:
    names, _, _ = spec.resolve(ds)
    s = _prepare(ds, names, observation, weights)
    q = _fit_q(s, spec, ds)
    mu1 = _wmean(q.predict(1.0, s.C), s.w)
    mu0 = _wmean(q.predict(0.0, s.C), s.w)
    return mu1 - mu0, mu1, mu0, s


def g_computation(
    ds: Dataset,
    model_spec: OutcomeSpec | None = None,
    *,
    weights=None,
    n_boot: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    observation: str = "complete-case",
    threads: int = 1,
) -> EffectEstimate:
    """Parametric G-computation: average of Q(1, C_i) - Q(0, C_i) over the sample.

    The confidence interval is the arm-stratified bootstrap percentile
    interval with ``n_boot`` replicates; ``n_boot=0`` skips it.
    """
    spec = model_spec or OutcomeSpec()
    psi, mu1, mu0, s = _gcomp_point(ds, spec, weights, observation)
    var = ci = None
    if n_boot:
        def stat(d, w=None):
            return _gcomp_point(d, spec, w, observation)[0]

        reps = bootstrap_replicates(stat, ds, n_boot, seed, weights, threads)
        alpha = 1.0 - level
        lo, hi = np.quantile(reps, [alpha / 2, 1 - alpha / 2])
        var, ci = float(np.var(reps, ddof=1)), (float(lo), float(hi))
    return EffectEstimate(
        method="gcomp",
        psi_hat=psi,
        variance=var,
        ci=ci,
        level=level,
        n_used=len(s.rows),
        n_dropped=s.n_dropped,
        arm_means=(mu1, mu0),
        diagnostics={"n_boot": n_boot, "observation": observation},
    )


# ---------------------------------------------------------------------------
# IPW
# ---------------------------------------------------------------------------


def ipw(
    ds: Dataset,
    ps: PropensityModel | None = None,
    weighting: str = "hajek",
    *,
    covariates: Sequence[str] | None = None,
    trunc: tuple[float, float] = DEFAULT_TRUNCATION,
    weights=None,
    level: float = 0.95,
    observation: str = "complete-case",
) -> EffectEstimate:
    """Inverse probability weighting (Hajek by default, or Horvitz-Thompson).

    Variance is the sample variance of the influence curve over n, treating
    the propensity score as known.
    """
    if weighting not in ("hajek", "horvitz-thompson"):
        raise ValueError(f"unknown weighting {weighting!r}")
    names = tuple(ds.covariate_names if covariates is None else covariates) if ps is None else ps.covariates
    s = _prepare(ds, names, observation, weights)
    if ps is None:
        _, raw, g1 = fit_propensity_arrays(s.C, s.A, s.w, trunc)
        n_trunc = int(np.sum(raw != g1))
    else:
        raw, g1 = ps.scores_for(s.rows, raw=True), ps.scores_for(s.rows)
        n_trunc = int(np.sum(raw != g1))
    if np.any((raw == 0.0) | (raw == 1.0)):
        raise PositivityViolation("a propensity score is exactly 0 or 1 before truncation")
    pi_obs, _, _ = _observation_weights(s, trunc) if observation == "weighted" else (np.ones(len(s.A)),) * 3
    obs = s.observed
    y = np.where(obs, s.Y, 0.0)
    a1 = obs * s.A / (g1 * pi_obs)
    a0 = obs * (1.0 - s.A) / ((1.0 - g1) * pi_obs)
    w = s.w
    if weighting == "hajek":
        mu1 = np.sum(w * a1 * y) / np.sum(w * a1)
        mu0 = np.sum(w * a0 * y) / np.sum(w * a0)
        ic1 = a1 * (y - mu1) / (np.sum(w * a1) / np.sum(w))
        ic0 = a0 * (y - mu0) / (np.sum(w * a0) / np.sum(w))
    else:
        mu1 = _wmean(a1 * y, w)
        mu0 = _wmean(a0 * y, w)
        ic1 = a1 * y - mu1
        ic0 = a0 * y - mu0
    psi = float(mu1 - mu0)
    ic = ic1 - ic0
    var = _ic_variance(ic, w)
    return EffectEstimate(
        method="ipw" if weighting == "hajek" else "ipw-ht",
        psi_hat=psi,
        variance=var,
        ci=_wald(psi, var, level),
        level=level,
        n_used=len(s.rows),
        n_dropped=s.n_dropped,
        arm_means=(float(mu1), float(mu0)),
        influence=ic,
        ids=s.ids,
        rr_ci=_log_rr_ci(mu1, mu0, ic1, ic0, w, level) if ds.endpoint == "binary" else None,
        diagnostics={
            "weighting": weighting,
            "n_truncated": n_trunc,
            "truncated_ids": s.ids[raw != g1].tolist(),
            "truncation": list(trunc),
            "observation": observation,
        },
    )


# ---------------------------------------------------------------------------
# TMLE
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TmleState:
    """Intermediate quantities of one targeting step (on the [0, 1] outcome scale)."""

    q0: np.ndarray  # Q_n^0(A_i, C_i)
    q0_1: np.ndarray
    q0_0: np.ndarray
    clever: np.ndarray  # h(A_i, C_i), zero where Delta = 0
    epsilon: float
    qstar: np.ndarray
    qstar_1: np.ndarray
    qstar_0: np.ndarray
    g1: np.ndarray
    score: float  # weighted mean of h * (Y - Q*) after targeting
    scale: tuple[float, float]


def tmle(
    ds: Dataset,
    q_spec: OutcomeSpec | None = None,
    g_spec: Sequence[str] | None = None,
    *,
    trunc: tuple[float, float] = DEFAULT_TRUNCATION,
    weights=None,
    level: float = 0.95,
    observation: str = "complete-case",
    bound: float = CONTINUOUS_BOUND,
) -> tuple[EffectEstimate, TmleState]:
    """Targeted maximum likelihood estimate of the ATE.

    One logistic fluctuation ``logit Q1 = logit Q0 + eps * h`` with the
    clever covariate ``h = A/g(1,C) - (1-A)/g(0,C)``; ``eps`` is the MLE
    (Newton, score tolerance 1e-10). Continuous outcomes are mapped to
    [0, 1] by the observed range, and the estimate and variance are mapped
    back. ``g_spec`` lists the propensity covariates (``()`` for an
    intercept-only model; ``None`` for all covariates).
    """
    q_spec = q_spec or OutcomeSpec()
    q_names, family, _ = q_spec.resolve(ds)
    g_names = tuple(ds.covariate_names if g_spec is None else g_spec)
    union = tuple(dict.fromkeys(q_names + g_names))
    s = _prepare(ds, union, observation, weights)
    Cq = s.C[:, [union.index(nm) for nm in q_names]]
    Cg = s.C[:, [union.index(nm) for nm in g_names]]
    obs = s.observed
    w = s.w

    _, raw, g1 = fit_propensity_arrays(Cg, s.A, w, trunc)
    pi_obs, pi1, pi0 = _observation_weights(s, trunc) if observation == "weighted" else (np.ones(len(s.A)),) * 3
    H1 = 1.0 / (g1 * pi1)
    H0 = -1.0 / ((1.0 - g1) * pi0)
    h = np.where(obs, np.where(s.A == 1, H1, H0), 0.0)

    yo = s.Y[obs]
    lo_y, hi_y = (0.0, 1.0) if ds.endpoint == "binary" else (float(yo.min()), float(yo.max()))
    span = hi_y - lo_y
    names, _, inter = q_spec.resolve(ds)
    q = fit_outcome(Cq[obs], s.A[obs], yo, family=family, covariates=names,
                    treatment=q_spec.treatment, interactions=inter, weights=w[obs])

    def scaled(a):
        return (q.predict(a, Cq) - lo_y) / span if span > 0 else np.zeros(len(s.A))

    q0_1, q0_0 = scaled(1.0), scaled(0.0)
    if ds.endpoint != "binary":
        q0_1, q0_0 = np.clip(q0_1, bound, 1 - bound), np.clip(q0_0, bound, 1 - bound)
    q0 = np.where(s.A == 1, q0_1, q0_0)
    ystar = np.where(obs, (s.Y - lo_y) / span if span > 0 else 0.0, 0.0)

    degenerate = q.constant is not None
    if degenerate:
        eps = 0.0
        qs_1, qs_0 = q0_1, q0_0
    else:
        fluct = fit_logistic(h[obs][:, None], ystar[obs], weights=w[obs], offset=logit(q0[obs]), tol=1e-10)
        eps = float(fluct.coef[0])
        qs_1 = expit(logit(q0_1) + eps * H1)
        qs_0 = expit(logit(q0_0) + eps * H0)
    qs = np.where(s.A == 1, qs_1, qs_0)
    resid = np.where(obs, ystar - qs, 0.0)
    score = _wmean(h * resid, w)

    mu1, mu0 = _wmean(qs_1, w), _wmean(qs_0, w)
    psi_star = mu1 - mu0
    ic1 = np.where(s.A == 1, h, 0.0) * resid + qs_1 - mu1
    ic0 = -np.where(s.A == 0, h, 0.0) * resid + qs_0 - mu0
    ic = h * resid + qs_1 - qs_0 - psi_star
    var = _ic_variance(ic, w) * span**2
    psi = psi_star * span
    est = EffectEstimate(
        method="tmle",
        psi_hat=float(psi),
        variance=var,
        ci=_wald(psi, var, level),
        level=level,
        n_used=len(s.rows),
        n_dropped=s.n_dropped,
        arm_means=(lo_y + span * mu1, lo_y + span * mu0),
        influence=ic * span,
        ids=s.ids,
        rr_ci=_log_rr_ci(mu1, mu0, ic1, ic0, w, level) if ds.endpoint == "binary" else None,
        diagnostics={
            "epsilon": eps,
            "score": score,
            "n_truncated": int(np.sum(raw != g1)),
            "truncation": list(trunc),
            "observation": observation,
        },
    )
    state = TmleState(q0, q0_1, q0_0, h, eps, qs, qs_1, qs_0, g1, score, (lo_y, hi_y))
    return est, state
