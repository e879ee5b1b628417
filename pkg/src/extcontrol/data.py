"""Observed-data model O = (C, A, Delta, Delta*Y), dataset container and CSV I/O.

A :class:`Dataset` is stored column-wise (numpy arrays) so that estimators and
simulation replicates never loop over Python objects; :class:`SubjectRecord`
is the per-subject view used by eligibility predicates and by callers that
want the record-level contract.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
import operator
import os
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import MaskedOutcomeError, ParseError, SchemaMismatch, UnknownColumn
from .estimand import IndexWindow

__all__ = [
    "ColumnMapping",
    "ColumnSpec",
    "Dataset",
    "LongitudinalRecord",
    "ObservedData",
    "Predicate",
    "Schema",
    "SourceInfo",
    "SubjectRecord",
    "Visit",
    "export_csv",
    "ingest_csv",
    "observed_tuple",
    "pool",
]

NUMERIC_KINDS = ("real", "binary")
COLUMN_KINDS = ("real", "binary", "categorical", "date")
EVENT_DATES = ("index_date", "eligibility_date", "death_date")
NAT = np.datetime64("NaT", "D")


# ---------------------------------------------------------------------------
# schema and provenance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = "real"

    def __post_init__(self):
        if self.kind not in COLUMN_KINDS:
            raise ValueError(f"column kind must be one of {COLUMN_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class Schema:
    """Covariate columns after categorical expansion (kinds real | binary | date)."""

    columns: tuple[ColumnSpec, ...] = ()

    @property
    def numeric(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns if c.kind in NUMERIC_KINDS)

    @property
    def date_columns(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns if c.kind == "date")

    def kind(self, name: str) -> str:
        for c in self.columns:
            if c.name == name:
                return c.kind
        raise UnknownColumn(name)

    def to_list(self) -> list[dict[str, str]]:
        return [{"name": c.name, "kind": c.kind} for c in self.columns]


@dataclass(frozen=True)
class SourceInfo:
    name: str
    internal: bool = False
    period: IndexWindow | None = None
    ascertainment: str = ""
    coding_version: str = ""
    notes: str = ""

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SourceInfo:
        period = d.get("period")
        if period is not None and not isinstance(period, IndexWindow):
            period = IndexWindow(period["start"], period["end"])
        return cls(
            name=d["name"],
            internal=bool(d.get("internal", False)),
            period=period,
            ascertainment=d.get("ascertainment", ""),
            coding_version=d.get("coding_version", ""),
            notes=d.get("notes", ""),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "internal": self.internal,
            "period": None if self.period is None else self.period.to_dict(),
            "ascertainment": self.ascertainment,
            "coding_version": self.coding_version,
            "notes": self.notes,
        }


# ---------------------------------------------------------------------------
# record-level views
# ---------------------------------------------------------------------------


def _to_date(x) -> dt.date | None:
    if x is None:
        return None
    if isinstance(x, np.datetime64):
        return None if np.isnat(x) else x.astype("datetime64[D]").item()
    if isinstance(x, dt.datetime):
        return x.date()
    if isinstance(x, dt.date):
        return x
    return dt.date.fromisoformat(str(x))


@dataclass(frozen=True)
class SubjectRecord:
    """One subject. Covariates use NaN as the missing marker."""

    id: str
    covariates: tuple[float, ...]
    treatment: int
    delta: int
    stored_outcome: float | None = field(default=None, repr=False)
    source: str = ""
    internal: bool = False
    index_date: dt.date | None = None
    eligibility_date: dt.date | None = None
    death_date: dt.date | None = None
    covariate_names: tuple[str, ...] = ()
    dates: Mapping[str, dt.date | None] = field(default_factory=dict)

    def __post_init__(self):
        if self.treatment not in (0, 1):
            raise ValueError(f"treatment must be 0 or 1, got {self.treatment!r}")
        if self.delta not in (0, 1):
            raise ValueError(f"delta must be 0 or 1, got {self.delta!r}")

    @property
    def outcome(self) -> float:
        if self.delta != 1:
            raise MaskedOutcomeError(f"outcome of subject {self.id!r} is not observed (delta = 0)")
        return self.stored_outcome

    @property
    def missing(self) -> tuple[bool, ...]:
        return tuple(math.isnan(v) for v in self.covariates)

    def get(self, name: str):
        if name in EVENT_DATES:
            return getattr(self, name)
        if name in ("id", "treatment", "delta", "source", "internal"):
            return getattr(self, name)
        if name == "outcome":
            return self.stored_outcome if self.delta == 1 else None
        if name in self.dates:
            return self.dates[name]
        try:
            v = self.covariates[self.covariate_names.index(name)]
        except ValueError:
            raise UnknownColumn(name) from None
        return None if math.isnan(v) else v

    def as_of(self, day: dt.date) -> SubjectRecord:
        """The record as known on ``day``: event dates after ``day`` are hidden."""

        def keep(d):
            return d if d is not None and d <= day else None

        return replace(
            self,
            eligibility_date=keep(self.eligibility_date),
            death_date=keep(self.death_date),
        )


class ObservedData(NamedTuple):
    covariates: tuple[float, ...]
    treatment: int
    delta: int
    delta_y: float
    outcome_missing: bool


@dataclass(frozen=True)
class Visit:
    covariates: tuple[float, ...]
    treatment: int
    delta_next: int
    time: float


@dataclass(frozen=True)
class LongitudinalRecord:
    """Multi-visit record (C_0, A_0, D_1), ..., (C_T, A_T, D_{T+1}, D_{T+1} Y)."""

    id: str
    visits: tuple[Visit, ...]
    stored_outcome: float | None = None

    def __post_init__(self):
        if not self.visits:
            raise ValueError("a longitudinal record needs at least one visit")
        times = [v.time for v in self.visits]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("visits must be strictly time-ordered")
        for v in self.visits[:-1]:
            if v.delta_next == 0:
                raise ValueError("no visits may follow a visit with delta = 0")

    @property
    def terminal_delta(self) -> int:
        return self.visits[-1].delta_next


def observed_tuple(record: SubjectRecord | LongitudinalRecord):
    """Observed-data view of a record; Y is masked (0, flagged missing) when delta = 0.

    For a longitudinal record the result is ``(visit tuples, terminal ObservedData)``.
    """
    if isinstance(record, LongitudinalRecord):
        steps = tuple((v.covariates, v.treatment, v.delta_next) for v in record.visits)
        last = record.visits[-1]
        d = last.delta_next
        dy = float(record.stored_outcome) if d == 1 and record.stored_outcome is not None else 0.0
        terminal = ObservedData(last.covariates, last.treatment, d, dy, d != 1)
        return steps, terminal
    if record.delta == 1:
        return ObservedData(record.covariates, record.treatment, 1, float(record.stored_outcome), False)
    return ObservedData(record.covariates, record.treatment, 0, 0.0, True)


# ---------------------------------------------------------------------------
# predicates
# ---------------------------------------------------------------------------

_OPS: dict[str, Callable[[Any, Any], bool]] = {
    "==": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
    "in": lambda a, b: a in b,
    "not in": lambda a, b: a not in b,
}


@dataclass(frozen=True)
class Predicate:
    """``column op value``; a missing value never satisfies a predicate.

    ``op`` may also be ``"notnull"`` or ``"isnull"`` (``value`` ignored).
    """

    name: str
    column: str
    op: str
    value: Any = None

    def __post_init__(self):
        if self.op not in _OPS and self.op not in ("notnull", "isnull"):
            raise ValueError(f"unsupported predicate operator {self.op!r}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Predicate:
        return cls(d.get("name", d["column"]), d["column"], d["op"], d.get("value"))

    def _coerce(self, probe):
        v = self.value
        if isinstance(probe, dt.date) and isinstance(v, str):
            return dt.date.fromisoformat(v)
        if isinstance(probe, dt.date) and isinstance(v, (list, tuple)):
            return [dt.date.fromisoformat(x) if isinstance(x, str) else x for x in v]
        return v

    def __call__(self, record: SubjectRecord) -> bool:
        x = record.get(self.column)
        if self.op == "notnull":
            return x is not None
        if self.op == "isnull":
            return x is None
        if x is None:
            return False
        return bool(_OPS[self.op](x, self._coerce(x)))

    def evaluate(self, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised form: ``(satisfied, evaluated)`` boolean masks."""
        col = ds.column(self.column)
        present = ds.present(self.column)
        if self.op == "notnull":
            return present.copy(), np.ones(len(ds), bool)
        if self.op == "isnull":
            return ~present, np.ones(len(ds), bool)
        value = self.value
        if col.dtype.kind == "M":
            if isinstance(value, (list, tuple)):
                value = np.array(value, dtype="datetime64[D]")
            elif value is not None:
                value = np.datetime64(value, "D")
        with np.errstate(invalid="ignore"):
            if self.op in ("in", "not in"):
                hit = np.isin(col, np.asarray(value))
                ok = hit if self.op == "in" else ~hit
            else:
                ok = np.asarray(_OPS[self.op](col, value), dtype=bool)
        return ok & present, present


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


def _nan_equal(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape != b.shape:
        return False
    if a.dtype.kind == "f":
        return bool(np.array_equal(a, b, equal_nan=True))
    if a.dtype.kind == "M":
        return bool(np.array_equal(a.astype("int64"), b.astype("int64")))
    return bool(np.array_equal(a, b))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable column store of subject records.

    ``outcome`` holds NaN wherever ``delta == 0``: the container keeps only
    the observed product Delta*Y, never a masked value.
    """

    schema: Schema
    ids: np.ndarray
    X: np.ndarray
    treatment: np.ndarray
    delta: np.ndarray
    outcome: np.ndarray
    source: np.ndarray
    internal: np.ndarray
    index_date: np.ndarray
    eligibility_date: np.ndarray
    death_date: np.ndarray
    dates: Mapping[str, np.ndarray] = field(default_factory=dict)
    provenance: tuple[SourceInfo, ...] = ()
    endpoint: str = "binary"

    def __post_init__(self):
        n = len(self.ids)
        p = len(self.schema.numeric)
        X = np.asarray(self.X, dtype=float).reshape(n, p)
        object.__setattr__(self, "X", X)
        for name in ("treatment", "delta"):
            arr = np.asarray(getattr(self, name), dtype=np.int8)
            if arr.shape != (n,):
                raise SchemaMismatch(name, f"expected {n} values")
            if not np.isin(arr, (0, 1)).all():
                raise ValueError(f"{name} must be coded 0/1")
            object.__setattr__(self, name, arr)
        y = np.asarray(self.outcome, dtype=float).copy()
        y[self.delta == 0] = np.nan
        if np.isnan(y[self.delta == 1]).any():
            raise ValueError("outcome missing for a record with delta = 1")
        if self.endpoint == "binary" and not np.isin(y[self.delta == 1], (0.0, 1.0)).all():
            raise ValueError("binary endpoint outcomes must be 0 or 1")
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "ids", np.asarray(self.ids).astype(str))
        object.__setattr__(self, "source", np.asarray(self.source).astype(str))
        object.__setattr__(self, "internal", np.asarray(self.internal, dtype=bool))
        for name in EVENT_DATES:
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype="datetime64[D]"))
        dates = {k: np.asarray(self.dates[k], dtype="datetime64[D]") for k in self.schema.date_columns}
        object.__setattr__(self, "dates", dates)
        known = {s.name for s in self.provenance}
        missing_sources = [str(s) for s in np.unique(self.source) if s not in known]
        if missing_sources:
            extra = tuple(
                SourceInfo(s, internal=bool(self.internal[self.source == s].all())) for s in missing_sources
            )
            object.__setattr__(self, "provenance", tuple(self.provenance) + extra)
        for arr in (X, y, self.treatment, self.delta, self.ids, self.source, self.internal,
                    self.index_date, self.eligibility_date, self.death_date, *dates.values()):
            arr.setflags(write=False)

    # -- construction -----------------------------------------------------

    @classmethod
    def from_arrays(
        cls,
        X,
        treatment,
        outcome,
        *,
        delta=None,
        covariate_names: Sequence[str] | None = None,
        kinds: Sequence[str] | None = None,
        ids=None,
        source="trial",
        internal=True,
        index_date=None,
        eligibility_date=None,
        death_date=None,
        dates: Mapping[str, Any] | None = None,
        provenance: Sequence[SourceInfo] = (),
        endpoint: str | None = None,
    ) -> Dataset:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size else X.reshape(len(treatment), 0)
        n = X.shape[0]
        names = list(covariate_names) if covariate_names is not None else [f"C{j + 1}" for j in range(X.shape[1])]
        if kinds is None:
            kinds = ["binary" if np.isin(X[:, j][~np.isnan(X[:, j])], (0, 1)).all() else "real" for j in range(X.shape[1])]
        cols = [ColumnSpec(nm, k) for nm, k in zip(names, kinds)]
        dates = dict(dates or {})
        cols += [ColumnSpec(k, "date") for k in dates]
        y = np.asarray(outcome, dtype=float)
        d = np.ones(n, np.int8) if delta is None else np.asarray(delta)
        if endpoint is None:
            obs = y[np.asarray(d) == 1]
            endpoint = "binary" if np.isin(obs[~np.isnan(obs)], (0.0, 1.0)).all() else "continuous"

        def fill(v, dtype):
            if v is None:
                return np.full(n, NAT) if dtype == "datetime64[D]" else None
            if np.ndim(v) == 0:
                return np.full(n, v, dtype=dtype if dtype != str else object)
            return np.asarray(v, dtype=dtype if dtype != str else None)

        return cls(
            schema=Schema(tuple(cols)),
            ids=np.arange(n).astype(str) if ids is None else np.asarray(ids),
            X=X,
            treatment=np.asarray(treatment),
            delta=d,
            outcome=y,
            source=fill(source, str),
            internal=fill(internal, bool),
            index_date=fill(index_date, "datetime64[D]"),
            eligibility_date=fill(eligibility_date, "datetime64[D]"),
            death_date=fill(death_date, "datetime64[D]"),
            dates=dates,
            provenance=tuple(provenance),
            endpoint=endpoint,
        )

    # -- basic protocol ---------------------------------------------------

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.schema, self.provenance, self.endpoint) != (other.schema, other.provenance, other.endpoint):
            return False
        pairs = [(getattr(self, k), getattr(other, k)) for k in (
            "ids", "X", "treatment", "delta", "outcome", "source", "internal", *EVENT_DATES)]
        pairs += [(self.dates[k], other.dates[k]) for k in self.dates]
        return all(_nan_equal(a, b) for a, b in pairs)

    __hash__ = None

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return self.schema.numeric

    @property
    def n_treated(self) -> int:
        return int(self.treatment.sum())

    def source_counts(self) -> dict[str, int]:
        return {s.name: int((self.source == s.name).sum()) for s in self.provenance}

    def covariates(self, names: Sequence[str] | None = None) -> np.ndarray:
        if names is None:
            return self.X
        idx = [self._cov_index(nm) for nm in names]
        return self.X[:, idx]

    def _cov_index(self, name: str) -> int:
        try:
            return self.schema.numeric.index(name)
        except ValueError:
            raise UnknownColumn(name) from None

    def column(self, name: str) -> np.ndarray:
        if name in self.schema.numeric:
            return self.X[:, self._cov_index(name)]
        if name in self.dates:
            return self.dates[name]
        if name in EVENT_DATES or name in ("ids", "treatment", "delta", "outcome", "source", "internal"):
            return getattr(self, name)
        if name == "id":
            return self.ids
        raise UnknownColumn(name)

    def has_column(self, name: str) -> bool:
        try:
            self.column(name)
        except UnknownColumn:
            return False
        return True

    def present(self, name: str) -> np.ndarray:
        col = self.column(name)
        if col.dtype.kind == "f":
            return ~np.isnan(col)
        if col.dtype.kind == "M":
            return ~np.isnat(col)
        return np.ones(len(col), bool)

    def complete_cases(self, names: Sequence[str] | None = None) -> np.ndarray:
        Xs = self.covariates(names)
        return ~np.isnan(Xs).any(axis=1) if Xs.shape[1] else np.ones(len(self), bool)

    def subset(self, rows) -> Dataset:
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        used = {str(s) for s in np.unique(self.source[rows])}
        return Dataset(
            schema=self.schema,
            ids=self.ids[rows],
            X=self.X[rows],
            treatment=self.treatment[rows],
            delta=self.delta[rows],
            outcome=self.outcome[rows],
            source=self.source[rows],
            internal=self.internal[rows],
            index_date=self.index_date[rows],
            eligibility_date=self.eligibility_date[rows],
            death_date=self.death_date[rows],
            dates={k: v[rows] for k, v in self.dates.items()},
            provenance=tuple(s for s in self.provenance if s.name in used),
            endpoint=self.endpoint,
        )

    def with_outcome(self, outcome: np.ndarray) -> Dataset:
        return replace(self, outcome=np.asarray(outcome, dtype=float))

    def index_of(self, ids: Iterable[str]) -> np.ndarray:
        pos = {k: i for i, k in enumerate(self.ids.tolist())}
        return np.array([pos[str(i)] for i in ids], dtype=int)

    def record(self, i: int) -> SubjectRecord:
        names = self.schema.numeric
        y = self.outcome[i]
        return SubjectRecord(
            id=str(self.ids[i]),
            covariates=tuple(float(v) for v in self.X[i]),
            treatment=int(self.treatment[i]),
            delta=int(self.delta[i]),
            stored_outcome=None if np.isnan(y) else float(y),
            source=str(self.source[i]),
            internal=bool(self.internal[i]),
            index_date=_to_date(self.index_date[i]),
            eligibility_date=_to_date(self.eligibility_date[i]),
            death_date=_to_date(self.death_date[i]),
            covariate_names=names,
            dates={k: _to_date(v[i]) for k, v in self.dates.items()},
        )

    @property
    def records(self) -> list[SubjectRecord]:
        return [self.record(i) for i in range(len(self))]

    def __iter__(self) -> Iterator[SubjectRecord]:
        return (self.record(i) for i in range(len(self)))

    @classmethod
    def from_records(
        cls,
        records: Sequence[SubjectRecord],
        schema: Schema,
        provenance: Sequence[SourceInfo] = (),
        endpoint: str = "binary",
    ) -> Dataset:
        names = schema.numeric
        for r in records:
            if tuple(r.covariate_names or names) != names or len(r.covariates) != len(names):
                raise SchemaMismatch("covariates", f"record {r.id!r} does not match schema")
        n = len(records)

        def dates_of(attr):
            return np.array([np.datetime64(getattr(r, attr)) if getattr(r, attr) else NAT for r in records],
                            dtype="datetime64[D]").reshape(n)

        return cls(
            schema=schema,
            ids=np.array([r.id for r in records], dtype=str).reshape(n),
            X=np.array([r.covariates for r in records], dtype=float).reshape(n, len(names)),
            treatment=np.array([r.treatment for r in records]).reshape(n),
            delta=np.array([r.delta for r in records]).reshape(n),
            outcome=np.array([np.nan if r.stored_outcome is None else r.stored_outcome for r in records],
                             dtype=float).reshape(n),
            source=np.array([r.source for r in records], dtype=str).reshape(n),
            internal=np.array([r.internal for r in records], dtype=bool).reshape(n),
            index_date=dates_of("index_date"),
            eligibility_date=dates_of("eligibility_date"),
            death_date=dates_of("death_date"),
            dates={k: np.array([np.datetime64(r.dates.get(k)) if r.dates.get(k) else NAT for r in records],
                               dtype="datetime64[D]").reshape(n) for k in schema.date_columns},
            provenance=tuple(provenance),
            endpoint=endpoint,
        )


def pool(datasets: Sequence[Dataset]) -> Dataset:
    """Concatenate datasets with identical schemas, keeping source labels."""
    if not datasets:
        raise ValueError("pool() needs at least one dataset")
    first = datasets[0]
    if len(datasets) == 1:
        return first
    for ds in datasets[1:]:
        if ds.schema != first.schema:
            raise SchemaMismatch("schema", "pooled datasets must share covariate columns and kinds")
        if ds.endpoint != first.endpoint:
            raise SchemaMismatch("outcome", "pooled datasets must share the endpoint type")
    provenance: list[SourceInfo] = []
    seen: set[str] = set()
    for ds in datasets:
        for s in ds.provenance:
            if s.name not in seen:
                seen.add(s.name)
                provenance.append(s)

    def cat(attr):
        return np.concatenate([getattr(ds, attr) for ds in datasets])

    return Dataset(
        schema=first.schema,
        ids=cat("ids"),
        X=np.vstack([ds.X for ds in datasets]),
        treatment=cat("treatment"),
        delta=cat("delta"),
        outcome=cat("outcome"),
        source=cat("source"),
        internal=cat("internal"),
        index_date=cat("index_date"),
        eligibility_date=cat("eligibility_date"),
        death_date=cat("death_date"),
        dates={k: np.concatenate([ds.dates[k] for ds in datasets]) for k in first.dates},
        provenance=tuple(provenance),
        endpoint=first.endpoint,
    )


# ---------------------------------------------------------------------------
# CSV ingestion / export
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovariateMapping:
    column: str
    kind: str = "real"
    levels: tuple[str, ...] = ()
    name: str | None = None

    @property
    def output_names(self) -> tuple[str, ...]:
        base = self.name or self.column
        if self.kind == "categorical":
            return tuple(f"{base}[{lv}]" for lv in self.levels[1:])
        return (base,)


@dataclass(frozen=True)
class ColumnMapping:
    """Which CSV columns hold which fields of a subject record.

    ``source`` / ``internal`` may name a column or be left ``None`` to use
    the constants ``source_name`` / ``internal_flag`` for every row. When
    ``delta`` is ``None``, Delta is 1 exactly where the outcome cell is filled.
    """

    id: str
    treatment: str
    outcome: str
    delta: str | None = None
    covariates: tuple[CovariateMapping, ...] = ()
    source: str | None = None
    source_name: str = "source"
    internal: str | None = None
    internal_flag: bool = False
    index_date: str | None = None
    eligibility_date: str | None = None
    death_date: str | None = None
    endpoint: str = "binary"
    sources: tuple[SourceInfo, ...] = ()

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ColumnMapping:
        covs = []
        for c in d.get("covariates", ()):
            if isinstance(c, str):
                covs.append(CovariateMapping(c))
            else:
                covs.append(CovariateMapping(c["column"], c.get("kind", "real"), tuple(c.get("levels", ())), c.get("name")))
        return cls(
            id=d["id"],
            treatment=d["treatment"],
            outcome=d["outcome"],
            delta=d.get("delta"),
            covariates=tuple(covs),
            source=d.get("source"),
            source_name=d.get("source_name", "source"),
            internal=d.get("internal"),
            internal_flag=bool(d.get("internal_flag", False)),
            index_date=d.get("index_date"),
            eligibility_date=d.get("eligibility_date"),
            death_date=d.get("death_date"),
            endpoint=d.get("endpoint", "binary"),
            sources=tuple(SourceInfo.from_dict(s) for s in d.get("sources", ())),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "treatment": self.treatment,
            "outcome": self.outcome,
            "delta": self.delta,
            "covariates": [
                {"column": c.column, "kind": c.kind, "levels": list(c.levels), "name": c.name} for c in self.covariates
            ],
            "source": self.source,
            "source_name": self.source_name,
            "internal": self.internal,
            "internal_flag": self.internal_flag,
            "index_date": self.index_date,
            "eligibility_date": self.eligibility_date,
            "death_date": self.death_date,
            "endpoint": self.endpoint,
            "sources": [s.to_dict() for s in self.sources],
        }

    def referenced_columns(self) -> list[str]:
        cols = [self.id, self.treatment, self.outcome, self.delta, self.source, self.internal,
                self.index_date, self.eligibility_date, self.death_date]
        cols += [c.column for c in self.covariates]
        return [c for c in cols if c]


_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


def _parse_flag(raw: str, row: int, column: str) -> int:
    s = raw.strip().lower()
    if s in ("0", "1"):
        return int(s)
    raise ParseError(row, column, raw)


def _parse_bool(raw: str, row: int, column: str) -> bool:
    s = raw.strip().lower()
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    raise ParseError(row, column, raw)


def _parse_float(raw: str, row: int, column: str) -> float:
    s = raw.strip()
    if s == "":
        return math.nan
    try:
        return float(s)
    except ValueError:
        raise ParseError(row, column, raw) from None


def _parse_date(raw: str, row: int, column: str):
    s = raw.strip()
    if s == "":
        return NAT
    try:
        return np.datetime64(dt.date.fromisoformat(s), "D")
    except ValueError:
        raise ParseError(row, column, raw) from None


def ingest_csv(path: str | os.PathLike, mapping: ColumnMapping | Mapping[str, Any]) -> Dataset:
    """Read a comma-separated UTF-8 file with a header row into a :class:`Dataset`.

    Rows are numbered from 1 (the first data row) in :class:`ParseError`.
    """
    if not isinstance(mapping, ColumnMapping):
        mapping = ColumnMapping.from_dict(mapping)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in mapping.referenced_columns():
            if col not in header:
                raise SchemaMismatch(col, "column named in mapping is absent from the file")
        rows = list(reader)

    n = len(rows)
    columns: list[ColumnSpec] = []
    numeric: list[np.ndarray] = []
    dates: dict[str, np.ndarray] = {}
    for cm in mapping.covariates:
        if cm.kind == "date":
            name = cm.output_names[0]
            columns.append(ColumnSpec(name, "date"))
            dates[name] = np.array([_parse_date(r[cm.column], i + 1, cm.column) for i, r in enumerate(rows)],
                                   dtype="datetime64[D]").reshape(n)
            continue
        if cm.kind == "categorical":
            if len(cm.levels) < 2:
                raise SchemaMismatch(cm.column, "categorical mapping needs at least two levels")
            block = np.zeros((n, len(cm.levels) - 1))
            for i, r in enumerate(rows):
                v = r[cm.column].strip()
                if v == "":
                    block[i] = np.nan
                elif v in cm.levels:
                    k = cm.levels.index(v)
                    if k > 0:
                        block[i, k - 1] = 1.0
                else:
                    raise ParseError(i + 1, cm.column, v)
            for j, nm in enumerate(cm.output_names):
                columns.append(ColumnSpec(nm, "binary"))
                numeric.append(block[:, j])
            continue
        vals = np.array([_parse_float(r[cm.column], i + 1, cm.column) for i, r in enumerate(rows)]).reshape(n)
        if cm.kind == "binary":
            bad = ~np.isnan(vals) & ~np.isin(vals, (0.0, 1.0))
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise ParseError(i + 1, cm.column, rows[i][cm.column])
        columns.append(ColumnSpec(cm.output_names[0], cm.kind))
        numeric.append(vals)

    treatment = np.array([_parse_flag(r[mapping.treatment], i + 1, "treatment") for i, r in enumerate(rows)], dtype=int)
    y = np.array([_parse_float(r[mapping.outcome], i + 1, "outcome") for i, r in enumerate(rows)]).reshape(n)
    if mapping.delta:
        delta = np.array([_parse_flag(r[mapping.delta], i + 1, "delta") for i, r in enumerate(rows)], dtype=int)
        for i in np.flatnonzero((delta == 1) & np.isnan(y)):
            raise ParseError(int(i) + 1, "outcome", "")
    else:
        delta = (~np.isnan(y)).astype(int)
    if mapping.endpoint == "binary":
        bad = (delta == 1) & ~np.isin(y, (0.0, 1.0))
        for i in np.flatnonzero(bad):
            raise ParseError(int(i) + 1, "outcome", rows[i][mapping.outcome])

    source = [r[mapping.source] for r in rows] if mapping.source else [mapping.source_name] * n
    if mapping.internal:
        internal = [_parse_bool(r[mapping.internal], i + 1, "internal") for i, r in enumerate(rows)]
    else:
        internal = [mapping.internal_flag] * n

    def event(col):
        if not col:
            return np.full(n, NAT)
        return np.array([_parse_date(r[col], i + 1, col) for i, r in enumerate(rows)], dtype="datetime64[D]").reshape(n)

    return Dataset(
        schema=Schema(tuple(columns)),
        ids=np.array([r[mapping.id] for r in rows], dtype=str).reshape(n),
        X=np.column_stack(numeric) if numeric else np.zeros((n, 0)),
        treatment=treatment.reshape(n),
        delta=delta.reshape(n),
        outcome=y,
        source=np.array(source, dtype=str).reshape(n),
        internal=np.array(internal, dtype=bool).reshape(n),
        index_date=event(mapping.index_date),
        eligibility_date=event(mapping.eligibility_date),
        death_date=event(mapping.death_date),
        dates=dates,
        provenance=mapping.sources,
        endpoint=mapping.endpoint,
    )


def _fmt_float(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def _fmt_date(v: np.datetime64) -> str:
    return "" if np.isnat(v) else str(v.astype("datetime64[D]"))


def export_csv(ds: Dataset, path: str | os.PathLike) -> ColumnMapping:
    """Write ``ds`` in the ingestion dialect; returns the mapping that reads it back."""
    cov_cols = [c.name for c in ds.schema.columns]
    header = ["id", "source", "internal", "treatment", "delta", "outcome", *EVENT_DATES, *cov_cols]
    cells = []
    for c in ds.schema.columns:
        if c.kind == "date":
            cells.append([_fmt_date(v) for v in ds.dates[c.name]])
        else:
            cells.append([_fmt_float(v) for v in ds.column(c.name)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds)):
            row = [
                ds.ids[i],
                ds.source[i],
                "1" if ds.internal[i] else "0",
                str(int(ds.treatment[i])),
                str(int(ds.delta[i])),
                _fmt_float(ds.outcome[i]),
                *(_fmt_date(getattr(ds, k)[i]) for k in EVENT_DATES),
                *(col[i] for col in cells),
            ]
            w.writerow(row)
    kinds = {c.name: c.kind for c in ds.schema.columns}
    return ColumnMapping(
        id="id",
        treatment="treatment",
        outcome="outcome",
        delta="delta",
        covariates=tuple(CovariateMapping(c, kinds[c]) for c in cov_cols),
        source="source",
        internal="internal",
        index_date="index_date",
        eligibility_date="eligibility_date",
        death_date="death_date",
        endpoint=ds.endpoint,
        sources=ds.provenance,
    )
