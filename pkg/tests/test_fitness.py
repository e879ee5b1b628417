from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from extcontrol.data import Dataset, Predicate, SourceInfo
from extcontrol.errors import NoRules, UnknownColumn
from extcontrol.fitness import (
    Domain,
    FitnessRules,
    OrderRule,
    RangeRule,
    RelevanceDefs,
    data_density_score,
    error_rate,
    fitness_report,
    generalizability_score,
)


def table(X, names, **kw):
    n = len(X)
    return Dataset.from_arrays(np.asarray(X, float), np.zeros(n, int), np.zeros(n), covariate_names=names,
                               ids=[f"r{i}" for i in range(n)], **kw)


def blank(X, frac, rng):
    X = np.array(X, float)
    cells = rng.choice(X.size, size=int(round(frac * X.size)), replace=False)
    X.flat[cells] = np.nan
    return X


def test_density_clean_is_one(rng):
    ds = table(rng.normal(size=(10, 2)), ["a", "b"])
    assert data_density_score(ds, FitnessRules((Domain("d", ("a", "b")),))) == 1.0


def test_density_twenty_percent_missing(rng):
    ds = table(blank(rng.normal(size=(50, 4)), 0.2, rng), ["a", "b", "c", "d"])
    assert data_density_score(ds, FitnessRules((Domain("all", ("a", "b", "c", "d")),))) == 0.8


def test_density_weighted_domains(rng):
    X = rng.normal(size=(10, 2))
    X[:4, 1] = np.nan
    ds = table(X, ["a", "b"])
    rules = FitnessRules((Domain("one", ("a",), 0.5), Domain("two", ("b",), 0.5)))
    assert data_density_score(ds, rules) == pytest.approx(0.8, abs=1e-15)


def test_domain_weights_validated():
    with pytest.raises(ValueError):
        FitnessRules((Domain("a", ("x",), 0.7), Domain("b", ("y",), 0.7)))


def test_error_rate_clean(rng):
    ds = table(rng.uniform(0, 1, size=(20, 1)), ["a"], dates={"start": ["2020-01-01"] * 20, "end": ["2020-02-01"] * 20})
    rules = FitnessRules(range_rules=(RangeRule("a", 0, 1),), consistency_rules=(OrderRule("start", "end"),))
    assert error_rate(ds, rules) == 0.0


def test_error_rate_three_percent():
    x = np.full(100, 50.0)
    x[[4, 40, 77]] = 150.0
    ds = table(x[:, None], ["age"])
    assert error_rate(ds, FitnessRules(range_rules=(RangeRule("age", 0, 120),))) == 0.03


def test_error_rate_order_rule():
    # 90 checked in-range cells plus 10 checked date pairs, one of them reversed
    x = np.r_[np.full(90, 1.0), np.full(10, np.nan)]
    start = np.full(100, np.datetime64("NaT"), "datetime64[D]")
    start[90:] = np.datetime64("2020-01-01")
    end = start + 5
    end[95] = start[95] - 1
    ds = table(x[:, None], ["x"], dates={"start": start, "end": end})
    rules = FitnessRules(range_rules=(RangeRule("x", 0, 2),), consistency_rules=(OrderRule("start", "end"),))
    assert error_rate(ds, rules) == 0.01


def test_missing_cells_not_errors():
    x = np.array([np.nan, 500.0, 10.0, np.nan])
    ds = table(x[:, None], ["age"])
    assert error_rate(ds, FitnessRules(range_rules=(RangeRule("age", 0, 120),))) == 0.5


def test_generalizability_examples():
    x = np.r_[np.full(45, 1.0), np.full(5, 9.0), np.full(10, np.nan)]
    ds = table(x[:, None], ["stage"])
    rule = Predicate("plausible-stage", "stage", "<=", 4)
    assert generalizability_score(ds, FitnessRules(credibility_rules=(rule,))) == 0.9
    assert generalizability_score(ds.subset(np.arange(45)), FitnessRules(credibility_rules=(rule,))) == 1.0
    with pytest.raises(NoRules):
        generalizability_score(ds, FitnessRules())


def test_unknown_column():
    ds = table(np.zeros((3, 1)), ["a"])
    with pytest.raises(UnknownColumn):
        data_density_score(ds, FitnessRules((Domain("d", ("nope",)),)))


def test_report_examples():
    X = np.c_[np.ones(8), np.full(8, np.nan)]
    ds = table(X, ["dx", "ecog"], provenance=[SourceInfo("registry", ascertainment="chart review")],
               source="registry")
    rel = RelevanceDefs(disease=(Predicate("dx", "dx", "==", 1),), confounders=("dx", "ecog"))
    rep = fitness_report(ds, FitnessRules(relevance=rel))
    assert rep.relevance["disease_n_pct"] == {"n": 8, "pct": 100.0}
    assert rep.relevance["confounder_pct"] == 50.0
    assert "chart review" in rep.fit_for_research["provenance_text"]


def test_report_clean_dataset(rng):
    ds = table(rng.uniform(size=(20, 2)), ["a", "b"])
    rules = FitnessRules((Domain("d", ("a", "b")),), range_rules=(RangeRule("a", 0, 1),))
    rep = fitness_report(ds, rules)
    assert rep.reliability == {"quality_pct_error": 0.0, "completeness_pct_missing": 0.0}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_scores_order_invariant_and_bounded(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 60))
    X = rng.normal(size=(n, 3)) * 2
    X[rng.random((n, 3)) < 0.15] = np.nan
    start = np.datetime64("2020-01-01") + rng.integers(0, 50, n)
    end = start + rng.integers(-5, 30, n)
    ds = table(X, ["a", "b", "c"], dates={"start": start, "end": end})
    rules = FitnessRules(
        (Domain("x", ("a", "b"), 0.6), Domain("y", ("c", "start"), 0.4)),
        range_rules=(RangeRule("a", -2, 2), RangeRule("end", None, "2020-02-15")),
        consistency_rules=(OrderRule("start", "end"),),
        credibility_rules=(Predicate("b-pos", "b", ">", -3),),
    )
    perm = rng.permutation(n)
    r1, r2 = fitness_report(ds, rules), fitness_report(ds.subset(perm), rules)
    assert r1 == r2
    for v in (r1.density_score, r1.error_rate, r1.generalizability_score):
        assert 0.0 <= v <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_density_monotone_under_blanking(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(20, 3))
    rules = FitnessRules((Domain("all", ("a", "b", "c")),))
    last = 1.0
    for cell in rng.permutation(X.size):
        X.flat[cell] = np.nan
        d = data_density_score(table(X, ["a", "b", "c"]), rules)
        assert d <= last
        last = d
    assert last == 0.0
