"""Research-question data model and temporal classification of control groups."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

from .errors import DuplicateIceStrategy, MalformedPeriod, MissingAttribute

__all__ = [
    "ControlType",
    "Endpoint",
    "EstimandSpec",
    "IceStrategy",
    "IndexWindow",
    "Summary",
    "classify_control",
    "validate_estimand",
]


class IceStrategy(str, Enum):
    TREATMENT_POLICY = "treatment-policy"
    HYPOTHETICAL = "hypothetical"
    COMPOSITE = "composite"
    WHILE_ON_TREATMENT = "while-on-treatment"
    PRINCIPAL_STRATUM = "principal-stratum"


class Summary(str, Enum):
    RISK_DIFFERENCE = "risk difference"
    RISK_RATIO = "risk ratio"
    MEAN_DIFFERENCE = "mean difference"
    RESPONSE_RATE = "response rate"


class ControlType(str, Enum):
    HISTORICAL = "Historical"
    CONTEMPORANEOUS = "Contemporaneous"
    NON_CONCURRENT = "NonConcurrent"
    HISTORICAL_CONTEMPORANEOUS = "HistoricalContemporaneous"
    SYNTHETIC = "Synthetic"
    HYBRID = "Hybrid"
    VIRTUAL = "Virtual"
    INTERNAL_CONCURRENT = "InternalConcurrent"


ENDPOINT_KINDS = ("binary", "continuous", "time-to-event")


@dataclass(frozen=True)
class Endpoint:
    name: str
    kind: str = "binary"

    def __post_init__(self):
        if self.kind not in ENDPOINT_KINDS:
            raise ValueError(f"endpoint kind must be one of {ENDPOINT_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class EstimandSpec:
    """The five estimand attributes of one substudy question.

    ``estimand_form`` is derived from the other fields so that it can never
    drift out of sync with them.
    """

    population: tuple[str, ...]
    treatment: tuple[str, str]  # (experimental, comparator)
    endpoint: Endpoint | None
    intercurrent_events: tuple[tuple[str, IceStrategy], ...]
    summary: Summary | None

    @property
    def estimand_form(self) -> str:
        exp, comp = self.treatment
        ep = self.endpoint.name if self.endpoint else "?"
        summary = self.summary.value if self.summary else "?"
        ices = "; ".join(f"{e}: {s.value}" for e, s in self.intercurrent_events)
        return (
            f"{summary} of {ep} comparing {exp} versus {comp}, "
            f"psi = E_C[E(Y | A=1, Delta=1, C) - E(Y | A=0, Delta=1, C)] "
            f"in population [{', '.join(self.population)}], "
            f"intercurrent events [{ices}]"
        )

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EstimandSpec:
        treatment = d.get("treatment") or {}
        if isinstance(treatment, Mapping):
            treatment = (treatment.get("experimental", ""), treatment.get("comparator", ""))
        endpoint = d.get("endpoint")
        if isinstance(endpoint, Mapping):
            endpoint = Endpoint(endpoint.get("name", ""), endpoint.get("kind", "binary"))
        elif isinstance(endpoint, str):
            endpoint = Endpoint(endpoint) if endpoint else None
        ices = []
        for item in d.get("intercurrent_events", ()):
            if isinstance(item, Mapping):
                ices.append((item["event"], IceStrategy(item["strategy"])))
            else:
                ev, strat = item
                ices.append((ev, IceStrategy(strat)))
        summary = d.get("summary")
        return cls(
            population=tuple(d.get("population", ())),
            treatment=tuple(treatment),
            endpoint=endpoint,
            intercurrent_events=tuple(ices),
            summary=Summary(summary) if summary else None,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "population": list(self.population),
            "treatment": {"experimental": self.treatment[0], "comparator": self.treatment[1]},
            "endpoint": None if self.endpoint is None else {"name": self.endpoint.name, "kind": self.endpoint.kind},
            "intercurrent_events": [{"event": e, "strategy": s.value} for e, s in self.intercurrent_events],
            "summary": None if self.summary is None else self.summary.value,
            "estimand_form": self.estimand_form,
        }


def validate_estimand(spec: EstimandSpec) -> EstimandSpec:
    """Check that all five attributes are filled and each ICE has one strategy."""
    if not spec.population or not all(p.strip() for p in spec.population):
        raise MissingAttribute("population")
    if len(spec.treatment) != 2 or not all(t and t.strip() for t in spec.treatment):
        raise MissingAttribute("treatment")
    if spec.endpoint is None or not spec.endpoint.name.strip():
        raise MissingAttribute("endpoint")
    if not spec.intercurrent_events:
        raise MissingAttribute("intercurrent_events")
    if spec.summary is None:
        raise MissingAttribute("summary")
    seen: set[str] = set()
    for event, _ in spec.intercurrent_events:
        if not event.strip():
            raise MissingAttribute("intercurrent_events")
        if event in seen:
            raise DuplicateIceStrategy(event)
        seen.add(event)
    return spec


def _as_date(x: dt.date | str) -> dt.date:
    if isinstance(x, dt.datetime):
        return x.date()
    if isinstance(x, dt.date):
        return x
    return dt.date.fromisoformat(x)


@dataclass(frozen=True)
class IndexWindow:
    """Closed calendar interval [start, end] at day granularity."""

    start: dt.date
    end: dt.date = field()

    def __post_init__(self):
        object.__setattr__(self, "start", _as_date(self.start))
        object.__setattr__(self, "end", _as_date(self.end))
        if self.start > self.end:
            raise MalformedPeriod(f"period start {self.start} is after end {self.end}")

    def contains(self, day: dt.date) -> bool:
        return self.start <= day <= self.end

    def overlaps(self, other: IndexWindow) -> bool:
        return self.start <= other.end and other.start <= self.end

    def to_dict(self) -> dict[str, str]:
        return {"start": self.start.isoformat(), "end": self.end.isoformat()}


def _window(p) -> IndexWindow:
    if isinstance(p, IndexWindow):
        return p
    if isinstance(p, Mapping):
        return IndexWindow(p["start"], p["end"])
    start, end = p
    return IndexWindow(start, end)


def classify_control(internal: bool, control_period, trial_period) -> ControlType:
    """Temporal class of a control group relative to the trial period.

    Periods are ``IndexWindow`` instances or ``(start, end)`` pairs. Overlap
    means at least one shared calendar day.
    """
    c, t = _window(control_period), _window(trial_period)
    starts_inside = t.start <= c.start <= t.end
    if internal:
        return ControlType.INTERNAL_CONCURRENT if starts_inside else ControlType.NON_CONCURRENT
    if c.end < t.start:
        return ControlType.HISTORICAL
    if c.start < t.start:
        return ControlType.HISTORICAL_CONTEMPORANEOUS
    if starts_inside:
        return ControlType.CONTEMPORANEOUS
    # external data collected entirely after the trial period
    return ControlType.NON_CONCURRENT
