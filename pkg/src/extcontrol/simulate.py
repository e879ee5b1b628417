"""Structural-causal-model data generator with known counterfactual truth.

Subjects are drawn ancestrally, C -> A -> Delta -> Y, from

    C = f_c(U_c),  A = f_a(C, U_a),  Delta = f_d(C, A, U_d),  Y = f_y(C, A, U_y)

with every exogenous term drawn from its own random stream. Binary
mechanisms threshold a standard uniform at the mechanism's probability;
continuous mechanisms add standard-normal noise. Both potential outcomes
reuse the same U_y, so the observed Y equals y1 or y0 exactly.

Two optional extensions drive the bias scenarios:

* calendar drift: an exogenous enrolment period (early/late) adds a trend to
  the outcome; by default the experimental arm is open only in the late
  period, so early controls are non-concurrent;
* sources: subjects are spread over named sources; a source may be external,
  forced to control, and may shift the outcome mean.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset, SourceInfo
from .errors import InvalidConfig, NonBinaryOutcome
from .estimand import IndexWindow
from .rng import make_rng

__all__ = [
    "CounterfactualPair",
    "CovariateSpec",
    "DriftSpec",
    "MeasurementErrorSpec",
    "ObservationSpec",
    "OutcomeMechanism",
    "ScmConfig",
    "SourceSpec",
    "TreatmentSpec",
    "TrueEffect",
    "generate",
    "inject_measurement_error",
    "scenario_library",
    "true_ate",
]

# stream ids for the exogenous terms
U_C, U_A, U_D, U_Y, U_SOURCE, U_PERIOD, U_DATE, U_FLIP = range(8)
GENERATE_TAG, TRUTH_TAG, ERROR_TAG = 0, 1, 2
TRUTH_CHUNK = 250_000


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    dist: str = "normal"
    mean: float = 0.0
    sd: float = 1.0
    p: float = 0.5

    def __post_init__(self):
        if self.dist not in ("normal", "bernoulli"):
            raise InvalidConfig(f"covariate {self.name!r}: unknown distribution {self.dist!r}")
        if self.dist == "normal" and not self.sd > 0:
            raise InvalidConfig(f"covariate {self.name!r}: sd must be positive")
        if self.dist == "bernoulli" and not 0.0 <= self.p <= 1.0:
            raise InvalidConfig(f"covariate {self.name!r}: p must lie in [0, 1]")

    @property
    def kind(self) -> str:
        return "binary" if self.dist == "bernoulli" else "real"

    @property
    def expectation(self) -> float:
        return self.p if self.dist == "bernoulli" else self.mean


@dataclass(frozen=True)
class TreatmentSpec:
    """P(A = 1 | C) = expit(intercept + coef . C)."""

    intercept: float = 0.0
    coef: tuple[float, ...] = ()


@dataclass(frozen=True)
class ObservationSpec:
    """P(Delta = 1 | C, A) = expit(intercept + coef . C + a_coef * A)."""

    intercept: float = 5.0
    coef: tuple[float, ...] = ()
    a_coef: float = 0.0


@dataclass(frozen=True)
class OutcomeMechanism:
    """Linear predictor intercept + a_effect*A + coef . C + A * (interactions . C).

    ``logistic``: Y = 1{U_y < expit(predictor)}. ``linear``: Y = predictor +
    noise_sd * U_y with U_y standard normal.
    """

    family: str = "logistic"
    intercept: float = 0.0
    a_effect: float = 0.0
    coef: tuple[float, ...] = ()
    interactions: tuple[float, ...] = ()
    noise_sd: float = 1.0

    def __post_init__(self):
        if self.family not in ("logistic", "linear"):
            raise InvalidConfig(f"outcome family must be 'logistic' or 'linear', got {self.family!r}")
        if self.noise_sd < 0:
            raise InvalidConfig("outcome noise_sd must be non-negative")


@dataclass(frozen=True)
class DriftSpec:
    """Two enrolment periods with an additive outcome trend per period.

    ``trend`` is added to the outcome predictor of late-period subjects
    (the mean for linear outcomes, the logit otherwise). Treatment is only
    available in the late period unless ``early_treatment_open``.
    """

    trend: float = 0.0
    late_share: float = 0.5
    early_period: tuple[str, str] = ("2019-01-01", "2019-12-31")
    late_period: tuple[str, str] = ("2020-01-01", "2020-12-31")
    early_treatment_open: bool = False

    def __post_init__(self):
        if not 0.0 < self.late_share <= 1.0:
            raise InvalidConfig("drift late_share must lie in (0, 1]")


@dataclass(frozen=True)
class SourceSpec:
    """A data source; ``outcome_shift`` moves the outcome mean (probability for binary Y)."""

    name: str
    share: float
    internal: bool = True
    force_control: bool = False
    outcome_shift: float = 0.0
    period: tuple[str, str] = ("2022-01-01", "2022-12-31")


@dataclass(frozen=True)
class MeasurementErrorSpec:
    flip_prob_treated: float = 0.0
    flip_prob_control: float = 0.0

    def __post_init__(self):
        for p in (self.flip_prob_treated, self.flip_prob_control):
            if not 0.0 <= p <= 1.0:
                raise InvalidConfig("flip probabilities must lie in [0, 1]")


def _tuple(x) -> tuple[float, ...]:
    return tuple(float(v) for v in x)


@dataclass(frozen=True)
class ScmConfig:
    covariates: tuple[CovariateSpec, ...]
    treatment: TreatmentSpec
    outcome: OutcomeMechanism
    observation: ObservationSpec | None = None
    drift: DriftSpec | None = None
    sources: tuple[SourceSpec, ...] = ()
    measurement_error: MeasurementErrorSpec | None = None
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        p = len(self.covariates)
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "sources", tuple(self.sources))
        names = [c.name for c in self.covariates]
        if len(set(names)) != p:
            raise InvalidConfig("covariate names must be unique")
        checks = [("treatment coef", self.treatment.coef, True), ("outcome coef", self.outcome.coef, True),
                  ("outcome interactions", self.outcome.interactions, False)]
        if self.observation is not None:
            checks.append(("observation coef", self.observation.coef, False))
        for label, vec, required in checks:
            if (required or len(vec)) and len(vec) not in (0, p):
                raise InvalidConfig(f"{label} has length {len(vec)}, expected {p}")
        if self.sources:
            shares = np.array([s.share for s in self.sources])
            if (shares < 0).any() or abs(shares.sum() - 1.0) > 1e-9:
                raise InvalidConfig("source shares must be non-negative and sum to 1")
            if len({s.name for s in self.sources}) != len(self.sources):
                raise InvalidConfig("source names must be unique")
        if self.seed is None:
            raise InvalidConfig("seed is required")

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    @property
    def endpoint(self) -> str:
        return "binary" if self.outcome.family == "logistic" else "continuous"

    def with_seed(self, seed: int) -> ScmConfig:
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ScmConfig:
        try:
            covs = tuple(CovariateSpec(**c) for c in d["covariates"])
            tr = dict(d.get("treatment", {}))
            out = dict(d["outcome"])
            for k in ("coef", "interactions"):
                if k in out:
                    out[k] = _tuple(out[k])
            if "coef" in tr:
                tr["coef"] = _tuple(tr["coef"])
            obs = d.get("observation")
            if obs is not None:
                obs = dict(obs)
                obs["coef"] = _tuple(obs.get("coef", ()))
                obs = ObservationSpec(**obs)
            drift = d.get("drift")
            if drift is not None:
                drift = dict(drift)
                for k in ("early_period", "late_period"):
                    if k in drift:
                        drift[k] = tuple(drift[k])
                drift = DriftSpec(**drift)
            sources = []
            for s in d.get("sources", ()):
                s = dict(s)
                if "period" in s:
                    s["period"] = tuple(s["period"])
                sources.append(SourceSpec(**s))
            me = d.get("measurement_error")
            return cls(
                covariates=covs,
                treatment=TreatmentSpec(**tr),
                outcome=OutcomeMechanism(**out),
                observation=obs,
                drift=drift,
                sources=tuple(sources),
                measurement_error=MeasurementErrorSpec(**me) if me is not None else None,
                seed=int(d.get("seed", 0)),
                name=str(d.get("name", "")),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidConfig(f"malformed simulation config: {exc}") from exc


@dataclass(frozen=True)
class CounterfactualPair:
    """Both potential outcomes for each simulated subject; kept apart from the Dataset."""

    ids: np.ndarray
    y1: np.ndarray
    y0: np.ndarray

    @property
    def individual_effects(self) -> np.ndarray:
        return self.y1 - self.y0


@dataclass(frozen=True)
class TrueEffect:
    psi_true: float
    mc_standard_error: float
    draws: int
    mc_estimate: float
    closed_form: bool = False

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _coef(vec, p) -> np.ndarray:
    return np.asarray(vec, dtype=float) if len(vec) else np.zeros(p)


def _draw_covariates(cfg: ScmConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    C = np.empty((n, len(cfg.covariates)))
    for j, spec in enumerate(cfg.covariates):
        if spec.dist == "normal":
            C[:, j] = spec.mean + spec.sd * rng.standard_normal(n)
        else:
            C[:, j] = (rng.random(n) < spec.p).astype(float)
    return C


def _simulate(cfg: ScmConfig, n: int, keys: tuple[int, ...]) -> dict[str, np.ndarray]:
    """One block of n subjects; every exogenous term uses its own stream."""
    if n < 1:
        raise InvalidConfig(f"sample size must be at least 1, got {n}")
    p = len(cfg.covariates)

    def stream(term):
        return make_rng(cfg.seed, *keys, term)

    C = _draw_covariates(cfg, n, stream(U_C))

    if cfg.sources:
        shares = np.cumsum([s.share for s in cfg.sources])
        shares[-1] = 1.0
        src = np.searchsorted(shares, stream(U_SOURCE).random(n), side="right")
    else:
        src = np.zeros(n, dtype=int)
    forced = np.array([s.force_control for s in cfg.sources] or [False])[src]
    shift = np.array([s.outcome_shift for s in cfg.sources] or [0.0])[src]

    if cfg.drift is not None:
        late = stream(U_PERIOD).random(n) < cfg.drift.late_share
        closed = np.zeros(n, dtype=bool) if cfg.drift.early_treatment_open else ~late
    else:
        late = np.zeros(n, dtype=bool)
        closed = np.zeros(n, dtype=bool)

    g = expit(cfg.treatment.intercept + C @ _coef(cfg.treatment.coef, p))
    A = (stream(U_A).random(n) < g) & ~forced & ~closed
    A = A.astype(np.int8)

    if cfg.observation is not None:
        ob = cfg.observation
        pd = expit(ob.intercept + C @ _coef(ob.coef, p) + ob.a_coef * A)
        delta = (stream(U_D).random(n) < pd).astype(np.int8)
    else:
        delta = np.ones(n, dtype=np.int8)

    om = cfg.outcome
    base = om.intercept + C @ _coef(om.coef, p)
    if cfg.drift is not None:
        base = base + cfg.drift.trend * late
    lin1 = base + om.a_effect + C @ _coef(om.interactions, p)
    lin0 = base
    if om.family == "logistic":
        u = stream(U_Y).random(n)
        p1 = np.clip(expit(lin1) + shift, 0.0, 1.0)
        p0 = np.clip(expit(lin0) + shift, 0.0, 1.0)
        y1 = (u < p1).astype(float)
        y0 = (u < p0).astype(float)
        effect = y1 - y0
    else:
        e = om.noise_sd * stream(U_Y).standard_normal(n)
        y0 = lin0 + shift + e
        effect = lin1 - lin0
        y1 = y0 + effect
    return {"C": C, "A": A, "delta": delta, "y1": y1, "y0": y0, "effect": effect,
            "source": src, "late": late}


def _index_dates(cfg: ScmConfig, src: np.ndarray, late: np.ndarray, u: np.ndarray) -> np.ndarray:
    starts = np.empty(len(src), dtype="datetime64[D]")
    lengths = np.empty(len(src), dtype=np.int64)
    if cfg.drift is not None:
        windows = [IndexWindow(*cfg.drift.early_period), IndexWindow(*cfg.drift.late_period)]
        which = late.astype(int)
    else:
        windows = [IndexWindow(*s.period) for s in cfg.sources] or [IndexWindow(*SourceSpec("trial", 1.0).period)]
        which = src
    for k, w in enumerate(windows):
        m = which == k
        starts[m] = np.datetime64(w.start, "D")
        lengths[m] = (w.end - w.start).days + 1
    return starts + np.floor(u * lengths).astype(np.int64).astype("timedelta64[D]")


def generate(cfg: ScmConfig, n: int, seed: int | None = None,
             stream: Sequence[int] = ()) -> tuple[Dataset, CounterfactualPair]:
    """Draw n subjects; returns the observed Dataset and the sealed counterfactual table.

    ``seed`` overrides ``cfg.seed``; ``stream`` selects an independent
    sub-stream (e.g. a replicate index). The same (cfg, n, seed, stream)
    always gives bit-identical output.
    """
    if seed is not None:
        cfg = cfg.with_seed(seed)
    keys = (GENERATE_TAG, *(int(k) for k in stream))
    sim = _simulate(cfg, int(n), keys)
    A, y1, y0 = sim["A"], sim["y1"], sim["y0"]
    y = np.where(A == 1, y1, y0)
    ids = np.array([f"S{i:06d}" for i in range(n)])
    index_date = _index_dates(cfg, sim["source"], sim["late"], make_rng(cfg.seed, *keys, U_DATE).random(n))

    if cfg.sources:
        names = np.array([s.name for s in cfg.sources])[sim["source"]]
        internal = np.array([s.internal for s in cfg.sources])[sim["source"]]
        provenance = tuple(SourceInfo(s.name, internal=s.internal, period=IndexWindow(*s.period))
                           for s in cfg.sources if (names == s.name).any())
    else:
        names = np.full(n, "trial")
        internal = np.ones(n, dtype=bool)
        provenance = (SourceInfo("trial", internal=True),)

    ds = Dataset.from_arrays(
        sim["C"], A, y,
        delta=sim["delta"],
        covariate_names=cfg.covariate_names,
        kinds=[c.kind for c in cfg.covariates],
        ids=ids,
        source=names,
        internal=internal,
        index_date=index_date,
        provenance=provenance,
        endpoint=cfg.endpoint,
    )
    pair = CounterfactualPair(ids, y1, y0)
    for arr in (pair.ids, pair.y1, pair.y0):
        arr.setflags(write=False)
    if cfg.measurement_error is not None:
        ds = inject_measurement_error(ds, cfg.measurement_error, seed=cfg.seed, stream=stream)
    return ds, pair


def _closed_form_effect(cfg: ScmConfig) -> float | None:
    if cfg.outcome.family != "linear":
        return None
    p = len(cfg.covariates)
    means = np.array([c.expectation for c in cfg.covariates])
    return float(cfg.outcome.a_effect + means @ _coef(cfg.outcome.interactions, p)) if p else float(cfg.outcome.a_effect)


def true_ate(cfg: ScmConfig, M: int = 1_000_000, seed: int | None = None) -> TrueEffect:
    """Monte Carlo E(Y1 - Y0) over M fresh subjects (streams disjoint from :func:`generate`).

    For linear outcome mechanisms the closed form is reported as
    ``psi_true``; the Monte Carlo mean is kept in ``mc_estimate``.
    """
    if M < 10_000:
        raise InvalidConfig(f"true_ate needs M >= 10^4 draws, got {M}")
    if seed is not None:
        cfg = cfg.with_seed(seed)
    total = 0.0
    total_sq = 0.0
    done = 0
    chunk = 0
    while done < M:
        m = min(TRUTH_CHUNK, M - done)
        eff = _simulate(cfg, m, (TRUTH_TAG, chunk))["effect"]
        total += float(eff.sum())
        total_sq += float(np.sum(eff * eff))
        done += m
        chunk += 1
    mean = total / M
    var = max(total_sq / M - mean * mean, 0.0) * M / (M - 1)
    se = float(np.sqrt(var / M))
    closed = _closed_form_effect(cfg)
    if closed is not None:
        return TrueEffect(closed, se, M, mean, closed_form=True)
    return TrueEffect(mean, se, M, mean)


def inject_measurement_error(ds: Dataset, spec: MeasurementErrorSpec | Mapping[str, float],
                             seed: int = 0, stream: Sequence[int] = ()) -> Dataset:
    """Flip each observed binary outcome with its arm's probability; returns a new Dataset."""
    if isinstance(spec, Mapping):
        spec = MeasurementErrorSpec(**spec)
    if ds.endpoint != "binary":
        raise NonBinaryOutcome("measurement-error injection needs a binary outcome")
    u = make_rng(seed, ERROR_TAG, *(int(k) for k in stream), U_FLIP).random(len(ds))
    prob = np.where(ds.treatment == 1, spec.flip_prob_treated, spec.flip_prob_control)
    flip = (u < prob) & (ds.delta == 1)
    y = ds.outcome.copy()
    y[flip] = 1.0 - y[flip]
    return ds.with_outcome(y)


def scenario_library() -> dict[str, ScmConfig]:
    """Named reference configurations used by the tests and the CLI."""
    c2 = (CovariateSpec("C1", "normal"), CovariateSpec("C2", "bernoulli", p=0.5))
    y_logit = OutcomeMechanism("logistic", intercept=-0.6, a_effect=0.7, coef=(1.0, -0.5))
    hybrid_cov = (CovariateSpec("C1", "normal"),)
    hybrid_y = OutcomeMechanism("logistic", intercept=float(np.log(0.3 / 0.7)), a_effect=0.0, coef=(0.0,))
    trial_share, ext_share = 0.4, 0.6
    hybrid_tr = TreatmentSpec(intercept=float(np.log(2.0)), coef=(0.0,))

    def hybrid(name, shift):
        return ScmConfig(
            covariates=hybrid_cov,
            treatment=hybrid_tr,
            outcome=hybrid_y,
            sources=(
                SourceSpec("trial", trial_share, internal=True, period=("2022-01-01", "2022-12-31")),
                SourceSpec("external", ext_share, internal=False, force_control=True, outcome_shift=shift,
                           period=("2018-01-01", "2019-12-31")),
            ),
            name=name,
        )

    return {
        "RCT": ScmConfig(c2, TreatmentSpec(0.0, (0.0, 0.0)), y_logit, name="RCT"),
        "G1": ScmConfig(c2, TreatmentSpec(-0.3, (0.9, 0.6)), y_logit, name="G1"),
        "POSITIVITY": ScmConfig(c2, TreatmentSpec(-1.0, (3.5, 2.0)), y_logit, name="POSITIVITY"),
        "LINEAR": ScmConfig(
            (CovariateSpec("C1", "normal"),), TreatmentSpec(0.0, (0.5,)),
            OutcomeMechanism("linear", intercept=0.0, a_effect=0.3, coef=(1.0,), noise_sd=1.0),
            name="LINEAR",
        ),
        "DRIFT": ScmConfig(
            (CovariateSpec("C1", "normal"),), TreatmentSpec(0.0, (0.0,)),
            OutcomeMechanism("linear", intercept=0.0, a_effect=0.3, coef=(1.0,), noise_sd=1.0),
            drift=DriftSpec(trend=0.5, late_share=0.5),
            name="DRIFT",
        ),
        "HYBRID-OK": hybrid("HYBRID-OK", 0.0),
        "HYBRID-DRIFT": hybrid("HYBRID-DRIFT", 0.15),
    }
