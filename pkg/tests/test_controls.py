from __future__ import annotations

import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import betainc, expit

from extcontrol.controls import (
    ControlArm,
    ControlMethod,
    EligibilityCriteria,
    MatchConfig,
    hybrid_match,
    power_prior_arm,
    power_prior_borrow,
    select_historical,
    select_historical_records,
    synthetic_control_arm,
    synthetic_weights,
    test_and_pool,
    virtual_control,
)
from extcontrol.controls import _simplex_objective
from extcontrol.data import Dataset, Predicate
from extcontrol.errors import (
    DimensionMismatch,
    InsufficientData,
    MissingIndexDate,
    NoSources,
    SchemaMismatch,
)
from extcontrol.estimators import OutcomeSpec

WINDOW = ("2015-01-01", "2018-12-31")
D = np.datetime64


def registry(index, *, death=None, elig=None, stage=None, ids=None):
    n = len(index)
    stage = np.zeros(n) if stage is None else np.asarray(stage, float)
    nat = np.full(n, D("NaT"), "datetime64[D]")
    return Dataset.from_arrays(
        stage[:, None], np.zeros(n, int), np.zeros(n), covariate_names=["stage"],
        ids=ids or [f"h{i}" for i in range(n)], source="registry", internal=False,
        index_date=np.array(index, "datetime64[D]"),
        death_date=nat if death is None else np.array(death, "datetime64[D]"),
        eligibility_date=nat if elig is None else np.array(elig, "datetime64[D]"),
    )


ALIVE = Predicate("alive-at-index", "death_date", "isnull")
ELIGIBLE = Predicate("eligible-by-index", "eligibility_date", "notnull")


# -- historical selection -------------------------------------------------------


def test_dies_next_day_included():
    ds = registry(["2016-05-01"], death=["2016-05-02"], elig=["2016-04-01"])
    arm = select_historical(ds, EligibilityCriteria((ALIVE, ELIGIBLE), WINDOW))
    assert arm.ids == ("h0",) and arm.method is ControlMethod.HISTORICAL


def test_index_before_window_excluded():
    ds = registry(["2014-12-31", "2015-01-01"])
    arm = select_historical(ds, EligibilityCriteria((), WINDOW))
    assert arm.ids == ("h1",)
    assert arm.excluded == (("h0", "index_window"),)


def test_predicate_failure_named():
    ds = registry(["2016-01-01", "2016-01-01"], stage=[1, 3])
    crit = EligibilityCriteria((Predicate("early-stage", "stage", "<=", 2),), WINDOW)
    assert select_historical(ds, crit).excluded == (("h1", "early-stage"),)


def test_eligibility_after_index_not_counted():
    ds = registry(["2016-01-01"], elig=["2016-01-05"])
    arm = select_historical(ds, EligibilityCriteria((ELIGIBLE,), WINDOW))
    assert arm.excluded == (("h0", "eligible-by-index"),)


def test_coding_change_warning():
    ds = registry(["2016-01-01"])
    crit = EligibilityCriteria((), WINDOW, coding_change_dates=("2017-10-01",))
    assert "coding-change-in-window" in select_historical(ds, crit).diagnostics["warnings"]
    quiet = EligibilityCriteria((), WINDOW, coding_change_dates=("2019-10-01",))
    assert select_historical(ds, quiet).diagnostics["warnings"] == []


def test_missing_index_date():
    with pytest.raises(MissingIndexDate):
        select_historical(registry(["2016-01-01", "NaT"]), EligibilityCriteria((), WINDOW))


day_offsets = st.lists(st.tuples(st.integers(-400, 1900), st.one_of(st.none(), st.integers(-300, 300)),
                                 st.one_of(st.none(), st.integers(-300, 300)), st.integers(0, 4)),
                       min_size=1, max_size=25)


def build_random(rows):
    base = D("2015-01-01")
    index = [base + a for a, _, _, _ in rows]
    death = [D("NaT") if d is None else base + a + d for a, d, _, _ in rows]
    elig = [D("NaT") if e is None else base + a + e for a, _, e, _ in rows]
    return registry(index, death=death, elig=elig, stage=[s for *_, s in rows])


CRIT = EligibilityCriteria((ALIVE, ELIGIBLE, Predicate("stage", "stage", "<=", 2)), WINDOW)


@settings(max_examples=60, deadline=None)
@given(day_offsets)
def test_vectorised_matches_record_route(rows):
    ds = build_random(rows)
    assert select_historical(ds, CRIT) == select_historical_records(ds, CRIT)


@settings(max_examples=60, deadline=None)
@given(day_offsets, st.integers(1, 2000))
def test_post_index_death_never_changes_membership(rows, later):
    ds = build_random(rows)
    arm = select_historical(ds, CRIT)
    death = ds.death_date.copy()
    inc = np.isin(ds.ids, arm.ids)
    death[inc] = ds.index_date[inc] + later
    moved = Dataset.from_arrays(ds.X, ds.treatment, ds.outcome, covariate_names=["stage"], ids=ds.ids,
                                source="registry", internal=False, index_date=ds.index_date,
                                death_date=death, eligibility_date=ds.eligibility_date)
    assert select_historical(moved, CRIT).ids == arm.ids


# -- synthetic control ------------------------------------------------------------


def test_single_matching_source():
    sw = synthetic_weights([((0.3, 1.2), 40)], (0.3, 1.2))
    assert sw.weights.tolist() == [1.0] and sw.residual == 0.0


def test_interior_one_dimensional():
    sw = synthetic_weights([((0.0,), 10), ((1.0,), 10)], (0.5,))
    np.testing.assert_allclose(sw.weights, [0.5, 0.5], atol=1e-6)
    assert sw.residual <= 1e-6


@pytest.mark.parametrize("V", [1.0, 2.5])
def test_boundary_one_dimensional(V):
    sw = synthetic_weights([((0.0,), 10), ((0.4,), 10)], (1.0,), V=[V])
    np.testing.assert_allclose(sw.weights, [0.0, 1.0], atol=1e-6)
    assert sw.residual == pytest.approx(0.6 * math.sqrt(V), abs=1e-6)
    # grid search over the simplex at step 1e-4
    w1 = np.arange(0, 10_001) * 1e-4
    obj = V * (1.0 - 0.4 * w1) ** 2
    assert w1[np.argmin(obj)] == pytest.approx(1.0)


def test_source_errors():
    with pytest.raises(NoSources):
        synthetic_weights([], (0.0,))
    with pytest.raises(DimensionMismatch):
        synthetic_weights([((0.0, 1.0), 5)], (0.0,))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_simplex_feasible_and_dominant(seed):
    rng = np.random.default_rng(seed)
    K, d = int(rng.integers(1, 7)), int(rng.integers(1, 5))
    M = rng.normal(size=(d, K))
    t = rng.normal(size=d)
    V = rng.uniform(0.2, 3.0, size=d)
    sw = synthetic_weights([(M[:, k], 10) for k in range(K)], t, V)
    assert sw.weights.min() >= 0 and abs(sw.weights.sum() - 1) <= 1e-10
    W = rng.dirichlet(np.ones(K), size=2000)
    R = t[None, :] - W @ M.T
    best = float(np.min(np.sum(V * R * R, axis=1)))
    obj = _simplex_objective(sw.weights, M, t, V)
    assert obj <= best + 1e-12 * max(1.0, best)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_zero_residual_inside_hull(seed):
    rng = np.random.default_rng(seed)
    K, d = int(rng.integers(2, 7)), int(rng.integers(1, 4))
    M = rng.normal(size=(d, K))
    t = M @ rng.dirichlet(np.ones(K))
    assert synthetic_weights([(M[:, k], 5) for k in range(K)], t).residual <= 1e-6


def test_synthetic_arm_subject_weights():
    rng = np.random.default_rng(1)
    src = np.repeat(["a", "b", "c"], [20, 30, 50])
    X = rng.normal(size=(100, 2)) + (src == "b")[:, None] * 1.0
    controls = Dataset.from_arrays(X, np.zeros(100, int), np.zeros(100), source=src, internal=False)
    target = Dataset.from_arrays(rng.normal(size=(40, 2)) + 0.4, np.ones(40, int), np.zeros(40))
    arm = synthetic_control_arm(controls, target)
    assert arm.weights.sum() == pytest.approx(1.0, abs=1e-10)
    sw = arm.diagnostics["source_weights"]
    assert sum(sw.values()) == pytest.approx(1.0, abs=1e-10)
    for s, n in (("a", 20), ("b", 30), ("c", 50)):
        assert arm.weights[src == s] == pytest.approx(np.full(n, sw[s] / n))


# -- test-and-pool ----------------------------------------------------------------


def controls(x, n, tag, internal):
    y = np.r_[np.ones(x), np.zeros(n - x)]
    return Dataset.from_arrays(np.zeros((n, 1)), np.zeros(n, int), y, ids=[f"{tag}{i}" for i in range(n)],
                               source=tag, internal=internal, endpoint="binary")


def z_oracle(x1, n1, x2, n2):
    p = (x1 + x2) / (n1 + n2)
    z = (x1 / n1 - x2 / n2) / math.sqrt(p * (1 - p) * (1 / n1 + 1 / n2))
    return math.erfc(abs(z) / math.sqrt(2))


def test_identical_rates_pool():
    arm = test_and_pool(controls(10, 50, "i", True), controls(12, 60, "e", False))
    assert arm.diagnostics["p_value"] == 1.0 and arm.diagnostics["decision"] == "pool"
    assert len(arm) == 110


def test_different_rates_not_pooled():
    arm = test_and_pool(controls(10, 50, "i", True), controls(30, 60, "e", False), alpha=0.10)
    p = arm.diagnostics["p_value"]
    assert p == pytest.approx(z_oracle(10, 50, 30, 60), rel=1e-12)
    assert p == pytest.approx(0.001, abs=5e-4)
    assert arm.diagnostics["decision"] == "internal-only"
    assert len(arm) == 50 and all(r == "not-pooled" for _, r in arm.excluded)


def test_empty_external():
    with pytest.raises(InsufficientData):
        test_and_pool(controls(10, 50, "i", True), controls(0, 0, "e", False))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 40), st.integers(0, 40), st.randoms(use_true_random=False))
def test_pool_decision_order_invariant(x1, x2, rnd):
    a, b = controls(x1, 40, "i", True), controls(x2, 40, "e", False)
    perm = list(range(40))
    rnd.shuffle(perm)
    base = test_and_pool(a, b)
    shuffled = test_and_pool(a.subset(np.array(perm)), b.subset(np.array(perm[::-1])))
    assert base.diagnostics["decision"] == shuffled.diagnostics["decision"]


def test_continuous_uses_t_test():
    rng = np.random.default_rng(2)
    a = Dataset.from_arrays(np.zeros((30, 1)), np.zeros(30, int), rng.normal(size=30), ids=[f"i{k}" for k in range(30)])
    b = Dataset.from_arrays(np.zeros((30, 1)), np.zeros(30, int), rng.normal(size=30) + 3,
                            ids=[f"e{k}" for k in range(30)])
    arm = test_and_pool(a, b)
    assert arm.diagnostics["test"] == "two-sample-t" and arm.diagnostics["decision"] == "internal-only"


# -- power prior --------------------------------------------------------------------


def test_power_prior_no_borrowing():
    post = power_prior_borrow((5, 10), (50, 100), 0.0, (2.0, 3.0))
    assert (post.alpha, post.beta) == (7.0, 8.0)


def test_power_prior_full_borrowing():
    post = power_prior_borrow((5, 10), (50, 100), 1.0)
    assert (post.alpha, post.beta, post.mean) == (56.0, 56.0, 0.5)


def test_power_prior_half():
    a = power_prior_borrow((3, 10), (10, 20), 0.5)
    b = power_prior_borrow((3, 10), (0, 0), 0.0)
    assert (a.alpha - b.alpha, a.beta - b.beta) == (5.0, 5.0)


def bisect_quantile(a, b, q):
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if betainc(a, b, mid) < q else (lo, mid)
    return (lo + hi) / 2


def test_credible_interval_against_bisection():
    post = power_prior_borrow((7, 25), (40, 90), 0.3)
    assert post.ci[0] == pytest.approx(bisect_quantile(post.alpha, post.beta, 0.025), abs=1e-10)
    assert post.ci[1] == pytest.approx(bisect_quantile(post.alpha, post.beta, 0.975), abs=1e-10)


def test_power_prior_mean_moves_toward_external():
    means = [power_prior_borrow((4, 20), (30, 60), a0).mean for a0 in np.linspace(0, 1, 21)]
    assert all(b > a for a, b in zip(means, means[1:]))
    assert means[-1] < 0.5


def test_power_prior_arm_weights():
    arm = power_prior_arm(controls(5, 10, "i", True), controls(50, 100, "e", False), 0.25)
    assert sorted(set(arm.weights.tolist())) == [0.25, 1.0]
    assert arm.diagnostics["posterior"]["alpha"] == 1 + 5 + 12.5


# -- hybrid matching ------------------------------------------------------------------


def arm_ds(n, tag, treated, seed, shift=0.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2)) + shift
    y = (rng.random(n) < 0.3).astype(float)
    return Dataset.from_arrays(X, np.full(n, int(treated)), y, ids=[f"{tag}{i:03d}" for i in range(n)],
                               source=tag, internal=tag != "ext")


def test_internal_exhausts_treated():
    arm = hybrid_match(arm_ds(10, "trt", 1, 0), arm_ds(15, "icc", 0, 1), arm_ds(100, "ext", 0, 2))
    assert arm.diagnostics["n_external_used"] == 0 and len(arm) == 10
    assert all(i.startswith("icc") for i in arm.ids)


def test_two_stage_counts_and_replay():
    args = (arm_ds(30, "trt", 1, 0), arm_ds(10, "icc", 0, 1), arm_ds(300, "ext", 0, 2))
    arm = hybrid_match(*args, MatchConfig(seed=42))
    d = arm.diagnostics
    assert d["n_internal_used"] == 10 and d["n_external_used"] == 20 and len(arm) == 30
    assert len(d["stage1_pairs"]) == 10 and len(d["stage2_pairs"]) == 20
    assert arm == hybrid_match(*args, MatchConfig(seed=42))
    assert len(set(arm.ids)) == len(arm.ids)


def test_zero_caliper_leaves_stage_two_unmatched():
    arm = hybrid_match(arm_ds(30, "trt", 1, 0), arm_ds(10, "icc", 0, 1), arm_ds(300, "ext", 0, 2),
                       MatchConfig(caliper=0.0, seed=3))
    stage1 = {p["treated"] for p in arm.diagnostics["stage1_pairs"]}
    assert len(arm.diagnostics["unmatched_treated"]) == 20
    assert set(arm.diagnostics["unmatched_treated"]).isdisjoint(stage1)
    assert arm.diagnostics["n_external_used"] == 0


@pytest.mark.parametrize("ratio, score", [(1, "prognostic"), (2, "propensity")])
def test_controls_used_once(ratio, score):
    arm = hybrid_match(arm_ds(40, "trt", 1, 5, 0.3), arm_ds(12, "icc", 0, 6), arm_ds(400, "ext", 0, 7),
                       MatchConfig(ratio=ratio, score=score, seed=1))
    used = [c for stage in ("stage1_pairs", "stage2_pairs") for p in arm.diagnostics[stage] for c in p["controls"]]
    assert len(used) == len(set(used)) == len(arm)
    assert all(len(p["controls"]) == ratio for p in arm.diagnostics["stage1_pairs"])


# -- virtual control ----------------------------------------------------------------------


def test_intercept_only_predicts_training_mean():
    ext = arm_ds(200, "ext", 0, 8)
    res = virtual_control(ext, arm_ds(20, "trt", 1, 9), OutcomeSpec.intercept_only())
    np.testing.assert_allclose(res.predictions, ext.outcome.mean(), atol=1e-12)


def test_virtual_control_null_effect_large_n():
    rng = np.random.default_rng(10)
    n = 10_000
    Ce, Ct = rng.normal(size=n), rng.normal(size=n) + 0.5
    ye = (rng.random(n) < expit(-0.3 + 0.8 * Ce)).astype(float)
    yt = (rng.random(n) < expit(-0.3 + 0.8 * Ct)).astype(float)
    ext = Dataset.from_arrays(Ce[:, None], np.zeros(n, int), ye, ids=[f"e{i}" for i in range(n)])
    trt = Dataset.from_arrays(Ct[:, None], np.ones(n, int), yt, ids=[f"t{i}" for i in range(n)])
    res = virtual_control(ext, trt, seed=1)
    assert abs(res.effect) <= 0.02
    assert res.arm.method is ControlMethod.VIRTUAL
    assert {"brier", "auc"} <= set(res.arm.diagnostics["validation"])


def test_virtual_control_schema_mismatch():
    ext = arm_ds(50, "ext", 0, 11)
    trt = Dataset.from_arrays(np.zeros((5, 1)), np.ones(5, int), np.zeros(5), covariate_names=["other"])
    with pytest.raises(SchemaMismatch):
        virtual_control(ext, trt)


def test_control_arm_invariants():
    with pytest.raises(ValueError):
        ControlArm(ControlMethod.SYNTHETIC, (("a", -0.1),))
    with pytest.raises(ValueError):
        ControlArm(ControlMethod.SYNTHETIC, (("a", 1.0),), excluded=(("a", "x"),))
    arm = ControlArm(ControlMethod.HISTORICAL, (("a", 1.0),), {"when": dt.date(2020, 1, 1)})
    assert arm.to_dict()["diagnostics"]["when"] == "2020-01-01"
