"""Seeded Monte Carlo replication: generate -> construct comparator -> estimate.

Replicate r draws its data from the sub-stream (seed, r), so the table is
identical for any thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .controls import test_and_pool
from .data import Dataset
from .errors import ExtControlError, InvalidConfig
from .estimators import EffectEstimate, OutcomeSpec, g_computation, ipw, naive_difference, tmle
from .simulate import ScmConfig, generate, true_ate

__all__ = [
    "DESIGNS",
    "ESTIMATORS",
    "EstimatorSummary",
    "ReplicateTable",
    "apply_design",
    "run_estimator",
    "run_replicates",
]

ESTIMATORS = ("naive", "g-computation", "ipw", "tmle")
DESIGNS = ("all", "concurrent", "non-concurrent", "internal-only", "always-pool", "test-and-pool")
MIN_REPLICATES = 100


def run_estimator(
    name: str,
    ds: Dataset,
    *,
    weights: np.ndarray | None = None,
    covariates: Sequence[str] | None = None,
    level: float = 0.95,
    n_boot: int = 0,
    seed: int = 0,
    trunc: tuple[float, float] = (0.01, 0.99),
    threads: int = 1,
) -> EffectEstimate:
    """Dispatch one of :data:`ESTIMATORS` with a common set of options."""
    spec = OutcomeSpec(covariates=None if covariates is None else tuple(covariates))
    if name == "naive":
        return naive_difference(ds, weights=weights, level=level)
    if name == "g-computation":
        return g_computation(ds, spec, weights=weights, n_boot=n_boot, level=level, seed=seed, threads=threads)
    if name == "ipw":
        return ipw(ds, covariates=covariates, trunc=trunc, weights=weights, level=level)
    if name == "tmle":
        return tmle(ds, spec, covariates, trunc=trunc, weights=weights, level=level)[0]
    raise InvalidConfig(f"unknown estimator {name!r}; known: {', '.join(ESTIMATORS)}")


def _treated_window(ds: Dataset) -> tuple[np.datetime64, np.datetime64]:
    d = ds.index_date[ds.treatment == 1]
    d = d[~np.isnat(d)]
    if d.size == 0:
        raise InvalidConfig("concurrency designs need index dates on treated subjects")
    return d.min(), d.max()


def apply_design(ds: Dataset, design: str) -> tuple[Dataset, dict[str, Any]]:
    """Analysis set for a comparator design: the treated arm plus the chosen controls.

    ``concurrent`` keeps controls whose index date falls in the treated
    enrolment window; ``non-concurrent`` keeps those outside it.
    ``internal-only``/``always-pool``/``test-and-pool`` combine internal and
    external control sources.
    """
    treated = ds.treatment == 1
    control = ~treated
    info: dict[str, Any] = {}
    if design == "all":
        keep = np.ones(len(ds), dtype=bool)
    elif design in ("concurrent", "non-concurrent"):
        lo, hi = _treated_window(ds)
        inside = (ds.index_date >= lo) & (ds.index_date <= hi)
        keep = treated | (control & (inside if design == "concurrent" else ~inside))
    elif design == "internal-only":
        keep = treated | (control & ds.internal)
    elif design == "always-pool":
        keep = np.ones(len(ds), dtype=bool)
    elif design == "test-and-pool":
        obs = ds.delta == 1
        internal = ds.subset(control & ds.internal & obs)
        external = ds.subset(control & ~ds.internal & obs)
        arm = test_and_pool(internal, external)
        info = {"pooled": arm.diagnostics["decision"] == "pool", "p_value": arm.diagnostics["p_value"]}
        keep = treated | (control & ds.internal)
        if info["pooled"]:
            keep = keep | (control & ~ds.internal)
    else:
        raise InvalidConfig(f"unknown design {design!r}; known: {', '.join(DESIGNS)}")
    return ds.subset(keep), info


@dataclass(frozen=True)
class EstimatorSummary:
    estimator: str
    replicates: int
    failures: int
    mean_estimate: float
    bias: float
    mc_se_bias: float
    empirical_se: float
    coverage: float | None
    rejection_rate: float | None

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ReplicateTable:
    scenario: str
    n: int
    R: int
    seed: int
    design: str
    truth: float
    truth_se: float
    level: float
    summaries: tuple[EstimatorSummary, ...]
    estimates: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    ci: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    design_info: tuple[dict[str, Any], ...] = field(repr=False, default=())

    def summary(self, estimator: str) -> EstimatorSummary:
        for s in self.summaries:
            if s.estimator == estimator:
                return s
        raise KeyError(estimator)

    @property
    def null(self) -> bool:
        return self.truth == 0.0

    def to_dict(self) -> dict[str, Any]:
        out = {
            "scenario": self.scenario,
            "n": self.n,
            "R": self.R,
            "seed": self.seed,
            "design": self.design,
            "truth": self.truth,
            "truth_se": self.truth_se,
            "level": self.level,
            "null_scenario": self.null,
            "estimators": [s.to_dict() for s in self.summaries],
        }
        pooled = [d["pooled"] for d in self.design_info if "pooled" in d]
        if pooled:
            out["pool_rate"] = float(np.mean(pooled))
        return out

    def format(self) -> str:
        head = f"{'estimator':<14}{'bias':>10}{'mc_se':>10}{'emp_se':>10}{'coverage':>10}{'reject':>10}{'fail':>6}"
        lines = [f"scenario {self.scenario}  design {self.design}  n={self.n}  R={self.R}  truth={self.truth:.6g}",
                 head]
        for s in self.summaries:
            cov = "-" if s.coverage is None else f"{s.coverage:.3f}"
            rej = "-" if s.rejection_rate is None else f"{s.rejection_rate:.3f}"
            lines.append(f"{s.estimator:<14}{s.bias:>10.4f}{s.mc_se_bias:>10.4f}{s.empirical_se:>10.4f}"
                         f"{cov:>10}{rej:>10}{s.failures:>6}")
        return "\n".join(lines)


def _summarise(name, est, ci, truth) -> EstimatorSummary:
    ok = ~np.isnan(est)
    e = est[ok]
    k = int(ok.sum())
    sd = float(e.std(ddof=1)) if k > 1 else float("nan")
    has_ci = ok & ~np.isnan(ci).any(axis=1)
    cov = rej = None
    if has_ci.any():
        lo, hi = ci[has_ci, 0], ci[has_ci, 1]
        cov = float(np.mean((lo <= truth) & (truth <= hi)))
        rej = float(np.mean((lo > 0) | (hi < 0)))
    return EstimatorSummary(
        estimator=name,
        replicates=k,
        failures=int((~ok).sum()),
        mean_estimate=float(e.mean()) if k else float("nan"),
        bias=float(e.mean() - truth) if k else float("nan"),
        mc_se_bias=sd / np.sqrt(k) if k > 1 else float("nan"),
        empirical_se=sd,
        coverage=cov,
        rejection_rate=rej,
    )


def run_replicates(
    cfg: ScmConfig,
    n: int,
    R: int,
    estimators: Sequence[str] = ESTIMATORS,
    *,
    design: str = "all",
    seed: int = 0,
    threads: int = 1,
    truth: float | None = None,
    truth_draws: int = 1_000_000,
    level: float = 0.95,
    n_boot: int = 0,
    covariates: Sequence[str] | None = None,
    estimator_options: dict[str, dict[str, Any]] | None = None,
) -> ReplicateTable:
    """Operating characteristics of each estimator over R seeded replicates.

    ``truth`` defaults to :func:`true_ate` of ``cfg`` (seeded by ``seed``).
    A replicate whose estimator raises a package error counts as a failure
    for that estimator and is left out of its summary.
    """
    if R < MIN_REPLICATES:
        raise InvalidConfig(f"replication needs R >= {MIN_REPLICATES}, got {R}")
    for name in estimators:
        if name not in ESTIMATORS:
            raise InvalidConfig(f"unknown estimator {name!r}; known: {', '.join(ESTIMATORS)}")
    if design not in DESIGNS:
        raise InvalidConfig(f"unknown design {design!r}; known: {', '.join(DESIGNS)}")
    cfg = cfg.with_seed(seed)
    truth_se = 0.0
    if truth is None:
        te = true_ate(cfg, truth_draws)
        truth, truth_se = te.psi_true, (0.0 if te.closed_form else te.mc_standard_error)
    options = estimator_options or {}

    def one(r: int):
        ds, _ = generate(cfg, n, stream=(r,))
        analysis, info = apply_design(ds, design)
        row = []
        for name in estimators:
            try:
                est = run_estimator(name, analysis, covariates=covariates, level=level, n_boot=n_boot,
                                    seed=seed + r, **options.get(name, {}))
                ci = est.ci if est.ci is not None else (np.nan, np.nan)
                row.append((est.psi_hat, ci))
            except (ExtControlError, np.linalg.LinAlgError):
                row.append((np.nan, (np.nan, np.nan)))
        return row, info

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(R)))
    else:
        results = [one(r) for r in range(R)]
    estimates, cis, summaries = {}, {}, []
    for j, name in enumerate(estimators):
        est = np.array([row[j][0] for row, _ in results], dtype=float)
        ci = np.array([row[j][1] for row, _ in results], dtype=float)
        estimates[name], cis[name] = est, ci
        summaries.append(_summarise(name, est, ci, truth))
    return ReplicateTable(
        scenario=cfg.name,
        n=n,
        R=R,
        seed=seed,
        design=design,
        truth=float(truth),
        truth_se=float(truth_se),
        level=level,
        summaries=tuple(summaries),
        estimates=estimates,
        ci=cis,
        design_info=tuple(info for _, info in results),
    )
