"""Fit-for-use scoring of an external data source.

Three cell-level scores (completeness, error rate, credibility) plus a
relevance / reliability / fit-for-research report. Missing cells count
against completeness only, never against the error rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .data import Dataset, Predicate
from .errors import NoRules, UnknownColumn

__all__ = [
    "Domain",
    "FitnessReport",
    "FitnessRules",
    "OrderRule",
    "RangeRule",
    "RelevanceDefs",
    "data_density_score",
    "error_rate",
    "fitness_report",
    "generalizability_score",
]


@dataclass(frozen=True)
class Domain:
    name: str
    columns: tuple[str, ...]
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))


@dataclass(frozen=True)
class RangeRule:
    """Valid iff lo <= value <= hi; either bound may be None. Dates as ISO strings."""

    column: str
    lo: Any = None
    hi: Any = None


@dataclass(frozen=True)
class OrderRule:
    """A checked instance is a record with both dates present; valid iff first <= second."""

    first: str
    second: str


@dataclass(frozen=True)
class RelevanceDefs:
    disease: tuple[Predicate, ...] = ()
    outcome: tuple[Predicate, ...] = ()
    exposure: tuple[Predicate, ...] = ()
    confounders: tuple[str, ...] = ()
    time: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("disease", "outcome", "exposure", "confounders", "time"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RelevanceDefs:
        preds = {k: tuple(Predicate.from_dict(p) for p in d.get(k, ())) for k in ("disease", "outcome", "exposure")}
        return cls(**preds, confounders=tuple(d.get("confounders", ())), time=tuple(d.get("time", ())))


@dataclass(frozen=True)
class FitnessRules:
    domains: tuple[Domain, ...] = ()
    range_rules: tuple[RangeRule, ...] = ()
    consistency_rules: tuple[OrderRule, ...] = ()
    credibility_rules: tuple[Predicate, ...] = ()
    relevance: RelevanceDefs = field(default_factory=RelevanceDefs)
    format_notes: str = ""

    def __post_init__(self):
        for name in ("domains", "range_rules", "consistency_rules", "credibility_rules"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.domains:
            w = np.array([d.weight for d in self.domains], dtype=float)
            if (w <= 0).any() or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("domain weights must be positive and sum to 1")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> FitnessRules:
        return cls(
            domains=tuple(Domain(x["name"], tuple(x["columns"]), float(x.get("weight", 1.0)))
                          for x in d.get("domains", ())),
            range_rules=tuple(RangeRule(x["column"], x.get("lo"), x.get("hi")) for x in d.get("range_rules", ())),
            consistency_rules=tuple(OrderRule(x["first"], x["second"]) for x in d.get("consistency_rules", ())),
            credibility_rules=tuple(Predicate.from_dict(x) for x in d.get("credibility_rules", ())),
            relevance=RelevanceDefs.from_dict(d.get("relevance", {})),
            format_notes=str(d.get("format_notes", "")),
        )

    def columns(self) -> list[str]:
        cols = [c for dom in self.domains for c in dom.columns]
        cols += [r.column for r in self.range_rules]
        cols += [c for r in self.consistency_rules for c in (r.first, r.second)]
        cols += [p.column for p in self.credibility_rules]
        rel = self.relevance
        cols += [p.column for p in (*rel.disease, *rel.outcome, *rel.exposure)]
        cols += [*rel.confounders, *rel.time]
        return cols


def _check_columns(ds: Dataset, rules: FitnessRules) -> None:
    for c in rules.columns():
        if not ds.has_column(c):
            raise UnknownColumn(c)


def data_density_score(ds: Dataset, rules: FitnessRules) -> float:
    """Weight-averaged fraction of non-missing required cells per domain."""
    _check_columns(ds, rules)
    if not rules.domains or len(ds) == 0:
        return 1.0
    score = 0.0
    for dom in rules.domains:
        if not dom.columns:
            completeness = 1.0
        else:
            filled = sum(int(ds.present(c).sum()) for c in dom.columns)
            completeness = filled / (len(ds) * len(dom.columns))
        score += dom.weight * completeness
    return float(min(max(score, 0.0), 1.0))


def _bound(col: np.ndarray, v):
    if v is None:
        return None
    return np.datetime64(v, "D") if col.dtype.kind == "M" else float(v)


def _error_counts(ds: Dataset, rules: FitnessRules) -> tuple[int, int]:
    errors = checked = 0
    for r in rules.range_rules:
        col = ds.column(r.column)
        present = ds.present(r.column)
        bad = np.zeros(len(ds), dtype=bool)
        lo, hi = _bound(col, r.lo), _bound(col, r.hi)
        with np.errstate(invalid="ignore"):
            if lo is not None:
                bad |= col < lo
            if hi is not None:
                bad |= col > hi
        checked += int(present.sum())
        errors += int((bad & present).sum())
    for r in rules.consistency_rules:
        a, b = ds.column(r.first), ds.column(r.second)
        both = ds.present(r.first) & ds.present(r.second)
        checked += int(both.sum())
        with np.errstate(invalid="ignore"):
            errors += int((both & (a > b)).sum())
    return errors, checked


def error_rate(ds: Dataset, rules: FitnessRules) -> float:
    """(out-of-range cells + violated order rules) / (checked cells + checked rule instances)."""
    _check_columns(ds, rules)
    errors, checked = _error_counts(ds, rules)
    return errors / checked if checked else 0.0


def generalizability_score(ds: Dataset, rules: FitnessRules) -> float:
    """Fraction of evaluated entries that satisfy their credibility predicate."""
    if not rules.credibility_rules:
        raise NoRules("generalizability score needs at least one credibility rule")
    _check_columns(ds, rules)
    good = evaluated = 0
    for pred in rules.credibility_rules:
        ok, ev = pred.evaluate(ds)
        good += int(ok.sum())
        evaluated += int(ev.sum())
    return good / evaluated if evaluated else 1.0


@dataclass(frozen=True)
class FitnessReport:
    source: str
    n: int
    density_score: float
    error_rate: float
    generalizability_score: float | None
    relevance: dict[str, Any]
    reliability: dict[str, float]
    fit_for_research: dict[str, str]

    def to_dict(self) -> dict[str, Any]:
        return {
            "source": self.source,
            "n": self.n,
            "density_score": self.density_score,
            "error_rate": self.error_rate,
            "generalizability_score": self.generalizability_score,
            "relevance": self.relevance,
            "reliability": self.reliability,
            "fit_for_research": self.fit_for_research,
        }


def _count_pct(ds: Dataset, preds: Sequence[Predicate]) -> dict[str, float]:
    ok = np.ones(len(ds), dtype=bool)
    for p in preds:
        ok &= p.evaluate(ds)[0]
    n = int(ok.sum())
    return {"n": n, "pct": 100.0 * n / len(ds) if len(ds) else 0.0}


def _provenance_text(ds: Dataset) -> str:
    parts = []
    for s in ds.provenance:
        bits = [s.name, "internal" if s.internal else "external"]
        if s.period is not None:
            bits.append(f"{s.period.start.isoformat()} to {s.period.end.isoformat()}")
        for label, value in (("ascertainment", s.ascertainment), ("coding", s.coding_version), ("notes", s.notes)):
            if value:
                bits.append(f"{label}: {value}")
        parts.append("; ".join(bits))
    return " | ".join(parts)


def fitness_report(ds: Dataset, rules: FitnessRules, source: str | None = None) -> FitnessReport:
    """Relevance, reliability and fit-for-research summary of one source.

    Relevance percentages are on a 0-100 scale; the reliability entries are
    the error rate and 1 - density as fractions.
    """
    _check_columns(ds, rules)
    density = data_density_score(ds, rules)
    err = error_rate(ds, rules)
    gen = generalizability_score(ds, rules) if rules.credibility_rules else None
    rel = rules.relevance
    if rel.confounders and len(ds):
        filled = sum(int(ds.present(c).sum()) for c in rel.confounders)
        conf_pct = 100.0 * filled / (len(ds) * len(rel.confounders))
    else:
        conf_pct = 100.0
    relevance = {
        "disease_n_pct": _count_pct(ds, rel.disease),
        "outcome_n_pct": _count_pct(ds, rel.outcome),
        "exposure_n_pct": _count_pct(ds, rel.exposure),
        "confounder_pct": conf_pct,
        "time_available": all(bool(ds.present(c).any()) for c in rel.time),
        "representativeness": gen,
    }
    return FitnessReport(
        source=source or ",".join(s.name for s in ds.provenance),
        n=len(ds),
        density_score=density,
        error_rate=err,
        generalizability_score=gen,
        relevance=relevance,
        reliability={"quality_pct_error": err, "completeness_pct_missing": 1.0 - density},
        fit_for_research={"provenance_text": _provenance_text(ds), "format_notes": rules.format_notes},
    )
