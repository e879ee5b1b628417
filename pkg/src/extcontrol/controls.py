"""Comparator-arm construction: historical selection, synthetic source weighting,
hybrid augmentation of internal controls, and virtual (predicted) controls.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.special import betaincinv

from .data import NAT, Dataset, Predicate
from .errors import (
    DimensionMismatch,
    EmptyTreatedArm,
    InsufficientData,
    InvalidCounts,
    MissingIndexDate,
    ModelFitError,
    NoSources,
    SchemaMismatch,
)
from .estimand import IndexWindow
from .estimators.glm import fit_logistic
from .estimators.models import OutcomeSpec, fit_outcome
from .rng import make_rng

__all__ = [
    "ControlArm",
    "ControlMethod",
    "EligibilityCriteria",
    "MatchConfig",
    "PowerPriorPosterior",
    "SyntheticWeights",
    "VirtualControlResult",
    "hybrid_match",
    "power_prior_arm",
    "power_prior_borrow",
    "select_historical",
    "select_historical_records",
    "synthetic_control_arm",
    "synthetic_weights",
    "test_and_pool",
    "virtual_control",
]


class ControlMethod(str, Enum):
    HISTORICAL = "Historical"
    SYNTHETIC = "Synthetic"
    HYBRID_TEST_AND_POOL = "HybridTestAndPool"
    HYBRID_POWER_PRIOR = "HybridPowerPrior"
    HYBRID_MATCHED = "HybridMatched"
    VIRTUAL = "Virtual"


@dataclass(frozen=True)
class ControlArm:
    method: ControlMethod
    members: tuple[tuple[str, float], ...]
    diagnostics: dict[str, Any] = field(default_factory=dict)
    excluded: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "method", ControlMethod(self.method))
        members = tuple((str(i), float(w)) for i, w in self.members)
        excluded = tuple((str(i), str(r)) for i, r in self.excluded)
        if any(w < 0 or math.isnan(w) for _, w in members):
            raise ValueError("control-arm weights must be non-negative")
        ids = [i for i, _ in members]
        if len(set(ids)) != len(ids):
            raise ValueError("a subject appears twice among control-arm members")
        if set(ids) & {i for i, _ in excluded}:
            raise ValueError("a subject is both a member and excluded")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "excluded", excluded)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(i for i, _ in self.members)

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.members], dtype=float)

    def __len__(self) -> int:
        return len(self.members)

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method.value,
            "members": [{"id": i, "weight": w} for i, w in self.members],
            "excluded": [{"id": i, "reason": r} for i, r in self.excluded],
            "diagnostics": _jsonable(self.diagnostics),
        }


def _jsonable(x):
    if isinstance(x, Mapping):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, (dt.date, Enum)):
        return x.isoformat() if isinstance(x, dt.date) else x.value
    return x


# ---------------------------------------------------------------------------
# historical selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EligibilityCriteria:
    predicates: tuple[Predicate, ...]
    index_window: IndexWindow
    coding_change_dates: tuple[dt.date, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "predicates", tuple(self.predicates))
        w = self.index_window
        if not isinstance(w, IndexWindow):
            w = IndexWindow(w["start"], w["end"]) if isinstance(w, Mapping) else IndexWindow(*w)
            object.__setattr__(self, "index_window", w)
        object.__setattr__(self, "coding_change_dates", tuple(
            d if isinstance(d, dt.date) else dt.date.fromisoformat(str(d)) for d in self.coding_change_dates))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EligibilityCriteria:
        return cls(
            predicates=tuple(Predicate.from_dict(p) for p in d.get("predicates", ())),
            index_window=d["index_window"],
            coding_change_dates=tuple(d.get("coding_change_dates", ())),
        )


def _coding_warnings(crit: EligibilityCriteria) -> list[str]:
    inside = [d for d in crit.coding_change_dates if crit.index_window.contains(d)]
    return ["coding-change-in-window"] if inside else []


def _as_of_index(ds: Dataset) -> Dataset:
    """Event dates after each subject's own index date are hidden."""

    def hide(col):
        out = col.copy()
        out[out > ds.index_date] = NAT
        return out

    return replace(ds, eligibility_date=hide(ds.eligibility_date), death_date=hide(ds.death_date))


def select_historical(ds: Dataset, crit: EligibilityCriteria) -> ControlArm:
    """Members: index date inside the window and every predicate true at the index date.

    Predicates see the record as known on the index date, so events after
    it (death in particular) can never affect membership.
    """
    missing = np.isnat(ds.index_date)
    if missing.any():
        raise MissingIndexDate(str(ds.ids[np.flatnonzero(missing)[0]]))
    start = np.datetime64(crit.index_window.start, "D")
    end = np.datetime64(crit.index_window.end, "D")
    reason = np.full(len(ds), "", dtype=object)
    reason[(ds.index_date < start) | (ds.index_date > end)] = "index_window"
    view = _as_of_index(ds)
    for pred in crit.predicates:
        ok, _ = pred.evaluate(view)
        reason[(reason == "") & ~ok] = pred.name
    keep = reason == ""
    return ControlArm(
        ControlMethod.HISTORICAL,
        tuple((i, 1.0) for i in ds.ids[keep]),
        diagnostics={"warnings": _coding_warnings(crit), "n_candidates": len(ds), "n_selected": int(keep.sum())},
        excluded=tuple(zip(ds.ids[~keep], reason[~keep])),
    )


def select_historical_records(ds: Dataset, crit: EligibilityCriteria) -> ControlArm:
    """Record-at-a-time form of :func:`select_historical` (same result, slower)."""
    members, excluded = [], []
    for rec in ds:
        if rec.index_date is None:
            raise MissingIndexDate(rec.id)
        if not crit.index_window.contains(rec.index_date):
            excluded.append((rec.id, "index_window"))
            continue
        seen = rec.as_of(rec.index_date)
        failed = next((p.name for p in crit.predicates if not p(seen)), None)
        if failed is None:
            members.append((rec.id, 1.0))
        else:
            excluded.append((rec.id, failed))
    return ControlArm(
        ControlMethod.HISTORICAL,
        tuple(members),
        diagnostics={"warnings": _coding_warnings(crit), "n_candidates": len(ds), "n_selected": len(members)},
        excluded=tuple(excluded),
    )


# ---------------------------------------------------------------------------
# synthetic control: source weights on the simplex
# ---------------------------------------------------------------------------

FW_TOL = 1e-10
FW_MAX_ITER = 10_000


@dataclass(frozen=True)
class SyntheticWeights:
    weights: np.ndarray
    residual: float
    V: np.ndarray
    gap: float
    iterations: int

    @property
    def objective(self) -> float:
        return self.residual**2

    def to_dict(self) -> dict[str, Any]:
        return {"weights": self.weights.tolist(), "residual": self.residual, "V": self.V.tolist(),
                "gap": self.gap, "iterations": self.iterations}


def _simplex_objective(w, M, t, V) -> float:
    r = t - M @ w
    return float(r @ (V * r))


def _polish_on_support(w, G, b, M, t, V) -> np.ndarray:
    """Solve the equality-constrained KKT system on the support of w; keep it if feasible and no worse."""
    S = np.flatnonzero(w > 0)
    k = len(S)
    if k < 2:
        return w
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = 2.0 * G[np.ix_(S, S)]
    kkt[:k, k] = kkt[k, :k] = 1.0
    rhs = np.r_[2.0 * b[S], 1.0]
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
    if (sol < 0).any():
        return w
    cand = np.zeros_like(w)
    cand[S] = sol / sol.sum()
    return cand if _simplex_objective(cand, M, t, V) <= _simplex_objective(w, M, t, V) else w


def synthetic_weights(sources, target_means, V=None) -> SyntheticWeights:
    """Simplex weights w minimising (t - sum_k w_k m_k)' V (t - sum_k w_k m_k).

    ``sources`` is a list of ``(covariate means, count)`` pairs (a bare mean
    vector is also accepted). Solved by away-step Frank-Wolfe with exact line
    search until the duality gap is at most 1e-10.
    """
    if len(sources) == 0:
        raise NoSources("synthetic control needs at least one source")
    means = [np.atleast_1d(np.asarray(s[0] if isinstance(s, tuple) else s, dtype=float)) for s in sources]
    t = np.atleast_1d(np.asarray(target_means, dtype=float))
    d = t.size
    if any(m.shape != (d,) for m in means):
        raise DimensionMismatch(f"every source needs {d} covariate means")
    V = np.ones(d) if V is None else np.atleast_1d(np.asarray(V, dtype=float))
    if V.shape != (d,):
        raise DimensionMismatch(f"metric V needs {d} diagonal entries")
    if not (V > 0).all():
        raise ValueError("metric V must be positive")
    M = np.column_stack(means)
    K = M.shape[1]
    G = M.T @ (V[:, None] * M)  # Hessian / 2
    b = M.T @ (V * t)
    # start at the best vertex
    vert = np.array([_simplex_objective(np.eye(K)[k], M, t, V) for k in range(K)])
    w = np.zeros(K)
    w[int(np.argmin(vert))] = 1.0
    gap = np.inf
    it = 0
    for it in range(1, FW_MAX_ITER + 1):
        grad = 2.0 * (G @ w - b)
        s = int(np.argmin(grad))
        gap = float(grad @ w - grad[s])
        if gap <= FW_TOL:
            break
        active = np.flatnonzero(w > 0)
        a = int(active[np.argmax(grad[active])])
        away_gap = float(grad[a] - grad @ w)
        if gap >= away_gap or w[a] >= 1.0:
            direction = -w.copy()
            direction[s] += 1.0
            gmax = 1.0
        else:
            direction = w.copy()
            direction[a] -= 1.0
            gmax = w[a] / (1.0 - w[a])
        curv = 2.0 * float(direction @ G @ direction)
        slope = float(grad @ direction)
        step = gmax if curv <= 0 else min(max(-slope / curv, 0.0), gmax)
        if step == 0.0:
            break
        w = w + step * direction
        w[np.abs(w) < 1e-16] = 0.0
    w = np.clip(w, 0.0, None)
    w /= w.sum()
    w = _polish_on_support(w, G, b, M, t, V)
    grad = 2.0 * (G @ w - b)
    gap = float(grad @ w - grad.min())
    return SyntheticWeights(w, math.sqrt(max(_simplex_objective(w, M, t, V), 0.0)), V, gap, it)


def synthetic_control_arm(
    controls: Dataset,
    target: Dataset,
    covariates: Sequence[str] | None = None,
    V=None,
) -> ControlArm:
    """Source-level synthetic control: each source's subjects share w_k / n_k.

    Sources are the distinct ``source`` labels of ``controls``. The default
    metric is the inverse of the pooled per-covariate variance of the control
    subjects.
    """
    names = tuple(controls.covariate_names if covariates is None else covariates)
    src_names = [s.name for s in controls.provenance if (controls.source == s.name).any()]
    if not src_names:
        raise NoSources("no control sources")
    Xc = controls.covariates(names)
    cc = ~np.isnan(Xc).any(axis=1)
    Xt = target.covariates(names)
    target_means = np.nanmean(Xt[~np.isnan(Xt).any(axis=1)], axis=0)
    sources, counts = [], []
    for s in src_names:
        rows = (controls.source == s) & cc
        if not rows.any():
            raise DimensionMismatch(f"source {s!r} has no complete-case subjects")
        sources.append((Xc[rows].mean(axis=0), int(rows.sum())))
        counts.append(int(rows.sum()))
    if V is None:
        var = Xc[cc].var(axis=0, ddof=1) if cc.sum() > 1 else np.ones(len(names))
        V = np.where(var > 0, 1.0 / np.where(var > 0, var, 1.0), 1.0)
    sw = synthetic_weights(sources, target_means, V)
    members, excluded = [], []
    for s, wk, nk in zip(src_names, sw.weights, counts):
        for i, ok in zip(controls.ids[controls.source == s], cc[controls.source == s]):
            if ok:
                members.append((i, float(wk) / nk))
            else:
                excluded.append((i, "missing-covariate"))
    return ControlArm(
        ControlMethod.SYNTHETIC,
        tuple(members),
        diagnostics={
            "source_weights": dict(zip(src_names, sw.weights.tolist())),
            "residual": sw.residual,
            "duality_gap": sw.gap,
            "iterations": sw.iterations,
            "covariates": list(names),
            "target_means": target_means.tolist(),
        },
        excluded=tuple(excluded),
    )


# ---------------------------------------------------------------------------
# hybrid: test-and-pool, power prior, two-stage matching
# ---------------------------------------------------------------------------


def _control_outcomes(ds: Dataset, label: str) -> np.ndarray:
    if len(ds) == 0:
        raise InsufficientData(f"{label} control slice is empty")
    if (ds.treatment != 0).any() or (ds.delta != 1).any():
        raise ValueError(f"{label} slice must contain only control subjects with observed outcomes")
    return ds.outcome


def homogeneity_test(y_int: np.ndarray, y_ext: np.ndarray, binary: bool) -> tuple[float, float, str]:
    """(statistic, two-sided p-value, test name) comparing two control samples."""
    if binary:
        n1, n2 = len(y_int), len(y_ext)
        p1, p2 = y_int.mean(), y_ext.mean()
        pbar = (y_int.sum() + y_ext.sum()) / (n1 + n2)
        se = math.sqrt(pbar * (1 - pbar) * (1 / n1 + 1 / n2))
        if se == 0.0:
            return 0.0, 1.0, "two-proportion-z"
        z = (p1 - p2) / se
        return float(z), float(2 * stats.norm.sf(abs(z))), "two-proportion-z"
    if len(y_int) < 2 or len(y_ext) < 2:
        raise InsufficientData("two-sample t test needs at least two subjects per slice")
    if np.ptp(y_int) == 0 and np.ptp(y_ext) == 0:
        same = y_int[0] == y_ext[0]
        return 0.0 if same else math.inf, 1.0 if same else 0.0, "two-sample-t"
    res = stats.ttest_ind(y_int, y_ext, equal_var=True)
    return float(res.statistic), float(res.pvalue), "two-sample-t"


def test_and_pool(internal: Dataset, external: Dataset, alpha: float = 0.10) -> ControlArm:
    """Pool external controls with internal ones iff the homogeneity test has p > alpha."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    y_int = _control_outcomes(internal, "internal")
    y_ext = _control_outcomes(external, "external")
    binary = internal.endpoint == "binary" and external.endpoint == "binary"
    stat, p, test = homogeneity_test(y_int, y_ext, binary)
    pooled = p > alpha
    members = [(i, 1.0) for i in internal.ids]
    excluded = []
    if pooled:
        members += [(i, 1.0) for i in external.ids]
    else:
        excluded = [(i, "not-pooled") for i in external.ids]
    return ControlArm(
        ControlMethod.HYBRID_TEST_AND_POOL,
        tuple(members),
        diagnostics={"test": test, "statistic": stat, "p_value": p, "alpha": alpha,
                     "decision": "pool" if pooled else "internal-only",
                     "n_internal": len(internal), "n_external": len(external)},
        excluded=tuple(excluded),
    )


test_and_pool.__test__ = False  # not a pytest test despite the name


@dataclass(frozen=True)
class PowerPriorPosterior:
    alpha: float
    beta: float
    mean: float
    ci: tuple[float, float]
    level: float
    a0: float

    def to_dict(self) -> dict[str, Any]:
        return {"alpha": self.alpha, "beta": self.beta, "mean": self.mean, "ci": list(self.ci),
                "level": self.level, "a0": self.a0}


def power_prior_borrow(
    internal: tuple[int, int],
    external: tuple[int, int],
    a0: float,
    prior: tuple[float, float] = (1.0, 1.0),
    level: float = 0.95,
) -> PowerPriorPosterior:
    """Conjugate Beta posterior for a response rate with external data discounted by a0."""
    x, n = internal
    x0, n0 = external
    for xi, ni in ((x, n), (x0, n0)):
        if not (0 <= xi <= ni) or int(xi) != xi or int(ni) != ni:
            raise InvalidCounts(f"counts must satisfy 0 <= x <= n, got ({xi}, {ni})")
    if not 0.0 <= a0 <= 1.0:
        raise ValueError("a0 must lie in [0, 1]")
    a, b = prior
    if not (a > 0 and b > 0):
        raise ValueError("Beta prior parameters must be positive")
    ap = a + x + a0 * x0
    bp = b + (n - x) + a0 * (n0 - x0)
    tail = (1.0 - level) / 2
    ci = (float(betaincinv(ap, bp, tail)), float(betaincinv(ap, bp, 1.0 - tail)))
    return PowerPriorPosterior(float(ap), float(bp), float(ap / (ap + bp)), ci, level, float(a0))


def power_prior_arm(
    internal: Dataset,
    external: Dataset,
    a0: float,
    prior: tuple[float, float] = (1.0, 1.0),
    level: float = 0.95,
) -> ControlArm:
    """Hybrid arm with external controls down-weighted to a0.

    Weighting each external likelihood contribution by a0 is the power prior;
    for a binary endpoint the conjugate posterior of the control rate is
    reported in the diagnostics.
    """
    y_int = _control_outcomes(internal, "internal")
    y_ext = _control_outcomes(external, "external")
    diagnostics: dict[str, Any] = {"a0": float(a0), "prior": list(prior)}
    if internal.endpoint == "binary":
        post = power_prior_borrow((int(y_int.sum()), len(y_int)), (int(y_ext.sum()), len(y_ext)), a0, prior, level)
        diagnostics["posterior"] = post.to_dict()
    elif not 0.0 <= a0 <= 1.0:
        raise ValueError("a0 must lie in [0, 1]")
    members = [(i, 1.0) for i in internal.ids] + [(i, float(a0)) for i in external.ids]
    return ControlArm(ControlMethod.HYBRID_POWER_PRIOR, tuple(members), diagnostics=diagnostics)


@dataclass(frozen=True)
class MatchConfig:
    ratio: int = 1
    caliper: float = 0.2
    score: str = "propensity"
    seed: int = 0
    covariates: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.ratio < 1 or int(self.ratio) != self.ratio:
            raise ValueError("ratio must be a positive integer")
        if self.caliper < 0:
            raise ValueError("caliper must be non-negative")
        if self.score not in ("propensity", "prognostic"):
            raise ValueError(f"score must be 'propensity' or 'prognostic', got {self.score!r}")
        if self.seed is None:
            raise ValueError("matching needs a seed")


def _match_scores(treated: Dataset, external: Dataset, cfg: MatchConfig, names) -> tuple[np.ndarray, np.ndarray]:
    Ct, Ce = treated.covariates(names), external.covariates(names)
    if cfg.score == "propensity":
        X = np.column_stack([np.ones(len(Ct) + len(Ce)), np.vstack([Ct, Ce])])
        y = np.r_[np.ones(len(Ct)), np.zeros(len(Ce))]
        fit = fit_logistic(X, y)
        lp = X @ fit.coef
        return lp[: len(Ct)], lp[len(Ct):]
    obs = external.delta == 1
    family = "logistic" if external.endpoint == "binary" else "linear"
    model = fit_outcome(Ce[obs], np.zeros(int(obs.sum())), external.outcome[obs],
                        family=family, covariates=tuple(names), treatment=False)
    if model.constant is not None:
        raise ModelFitError("prognostic score is constant: external outcomes do not vary")
    return model.fit.linear_predictor(model.design(0.0, Ct)), model.fit.linear_predictor(model.design(0.0, Ce))


def hybrid_match(treated: Dataset, internal_cc: Dataset, external: Dataset,
                 cfg: MatchConfig | None = None) -> ControlArm:
    """Two-stage hybrid matching.

    Stage 1 matches a seeded random subset of treated subjects to internal
    concurrent controls without scores, ``ratio`` controls each, until the
    internal controls are exhausted. Stage 2 matches each remaining treated
    subject (ascending id) greedily to the nearest unused external control(s)
    on the logit score, within ``caliper`` standard deviations of the score;
    ties go to the smaller external id.
    """
    cfg = cfg or MatchConfig()
    if len(treated) == 0:
        raise EmptyTreatedArm("no treated subjects to match")
    r = int(cfg.ratio)
    rng = make_rng(cfg.seed, 0)
    n_t, n_cc = len(treated), len(internal_cc)
    n1 = min(n_t, n_cc // r)
    order_t = rng.permutation(n_t)
    order_cc = rng.permutation(n_cc)
    stage1_t = order_t[:n1]
    stage1 = [(str(treated.ids[t]), [str(internal_cc.ids[c]) for c in order_cc[k * r:(k + 1) * r]])
              for k, t in enumerate(stage1_t)]
    used_cc = order_cc[: n1 * r]
    rest = np.setdiff1d(np.arange(n_t), stage1_t)
    rest = rest[np.argsort(treated.ids[rest], kind="stable")]

    stage2: list[tuple[str, list[str]]] = []
    unmatched: list[str] = []
    width = None
    used_ext = np.zeros(len(external), dtype=bool)
    if len(rest):
        names = tuple(external.covariate_names if cfg.covariates is None else cfg.covariates)
        if len(external) == 0:
            unmatched = [str(i) for i in treated.ids[rest]]
        else:
            s_t, s_e = _match_scores(treated, external, cfg, names)
            pooled = np.r_[s_t, s_e]
            width = float(cfg.caliper * pooled.std(ddof=1)) if len(pooled) > 1 else 0.0
            ext_order = np.argsort(external.ids, kind="stable")
            s_e_sorted = s_e[ext_order]
            for t in rest:
                got = []
                for _ in range(r):
                    dist = np.abs(s_e_sorted - s_t[t])
                    dist[used_ext[ext_order]] = np.inf
                    k = int(np.argmin(dist))  # first minimum = smallest id
                    if not dist[k] <= width:
                        break
                    used_ext[ext_order[k]] = True
                    got.append(str(external.ids[ext_order[k]]))
                if got:
                    stage2.append((str(treated.ids[t]), got))
                if len(got) < r:
                    unmatched.append(str(treated.ids[t]))
    members = [(str(internal_cc.ids[c]), 1.0) for c in used_cc]
    members += [(str(i), 1.0) for i in external.ids[used_ext]]
    excluded = [(str(internal_cc.ids[c]), "not-selected") for c in order_cc[n1 * r:]]
    excluded += [(str(i), "unmatched") for i in external.ids[~used_ext]]
    return ControlArm(
        ControlMethod.HYBRID_MATCHED,
        tuple(members),
        diagnostics={
            "score": cfg.score,
            "ratio": r,
            "caliper": cfg.caliper,
            "caliper_width": width,
            "seed": cfg.seed,
            "stage1_pairs": [{"treated": t, "controls": c} for t, c in stage1],
            "stage2_pairs": [{"treated": t, "controls": c} for t, c in stage2],
            "unmatched_treated": unmatched,
            "n_internal_used": int(n1 * r),
            "n_external_used": int(used_ext.sum()),
        },
        excluded=tuple(excluded),
    )


# ---------------------------------------------------------------------------
# virtual control
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VirtualControlResult:
    predictions: np.ndarray
    arm: ControlArm
    effect: float
    observed_mean: float
    predicted_mean: float


def _performance(y, pred, binary) -> dict[str, float]:
    out = {"n": int(len(y)), "mean_observed": float(np.mean(y)), "mean_predicted": float(np.mean(pred))}
    if binary:
        out["brier"] = float(np.mean((pred - y) ** 2))
        pos, neg = pred[y == 1], pred[y == 0]
        if len(pos) and len(neg):
            # Mann-Whitney form of the c-statistic
            ranks = stats.rankdata(np.r_[pos, neg])
            out["auc"] = float((ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))
    else:
        out["rmse"] = float(np.sqrt(np.mean((pred - y) ** 2)))
        ss = float(np.sum((y - y.mean()) ** 2))
        out["r2"] = float(1.0 - np.sum((pred - y) ** 2) / ss) if ss > 0 else float("nan")
    return out


def virtual_control(
    external_naive: Dataset,
    treated: Dataset,
    model_spec: OutcomeSpec | None = None,
    *,
    seed: int = 0,
    validation_fraction: float = 0.2,
) -> VirtualControlResult:
    """Predict each treated subject's control outcome from a model fitted on untreated external data."""
    if (external_naive.treatment != 0).any():
        raise ValueError("external_naive must contain only untreated subjects")
    spec = model_spec or OutcomeSpec()
    names = tuple(external_naive.covariate_names if spec.covariates is None else spec.covariates)
    for nm in names:
        if nm not in external_naive.covariate_names:
            raise SchemaMismatch(nm, "model covariate absent from the external data")
        if nm not in treated.covariate_names:
            raise SchemaMismatch(nm, "covariate absent from the treated data")
    family = spec.family or ("logistic" if external_naive.endpoint == "binary" else "linear")
    binary = family == "logistic"
    Ce = external_naive.covariates(names)
    obs = (external_naive.delta == 1) & ~np.isnan(Ce).any(axis=1)
    Ce, ye = Ce[obs], external_naive.outcome[obs]

    def fit(C, y):
        return fit_outcome(C, np.zeros(len(y)), y, family=family, covariates=names, treatment=False)

    perm = make_rng(seed, 0).permutation(len(ye))
    n_val = int(round(validation_fraction * len(ye)))
    val, train = perm[:n_val], perm[n_val:]
    diagnostics: dict[str, Any] = {"family": family, "covariates": list(names), "seed": seed,
                                   "n_train": int(len(train)), "n_validation": int(len(val))}
    try:
        m = fit(Ce[train], ye[train])
        diagnostics["train"] = _performance(ye[train], m.predict(0.0, Ce[train]), binary)
        if n_val:
            diagnostics["validation"] = _performance(ye[val], m.predict(0.0, Ce[val]), binary)
    except ModelFitError as exc:
        diagnostics["validation_error"] = str(exc)
    model = fit(Ce, ye)

    Ct = treated.covariates(names)
    ok = ~np.isnan(Ct).any(axis=1)
    pred = np.full(len(treated), np.nan)
    pred[ok] = model.predict(0.0, Ct[ok])
    has_y = ok & (treated.delta == 1)
    obs_mean = float(treated.outcome[has_y].mean()) if has_y.any() else float("nan")
    pred_mean = float(pred[has_y].mean()) if has_y.any() else float("nan")
    arm = ControlArm(
        ControlMethod.VIRTUAL,
        tuple((i, 1.0) for i in treated.ids[ok]),
        diagnostics=diagnostics,
        excluded=tuple((i, "missing-covariate") for i in treated.ids[~ok]),
    )
    return VirtualControlResult(pred, arm, obs_mean - pred_mean, obs_mean, pred_mean)
