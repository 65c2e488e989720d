import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2
from statsmodels.duration.survfunc import survdiff

from survfuse.metrics import (
    UndefinedConcordance,
    ZeroVarianceWarning,
    c_index,
    evaluate_cohort,
    kaplan_meier,
    log_rank,
    stratify_by_median,
)

from conftest import records


def enumerate_pairs(f, recs, tie=0.0):
    num = M = 0
    for i, j in itertools.permutations(range(len(recs)), 2):
        if recs[i].event == 1 and recs[j].time > recs[i].time:
            M += 1
            num += 1.0 if f[i] > f[j] else tie if f[i] == f[j] else 0.0
    return num, M


def random_cohort(rng, n):
    times = rng.integers(1, 6, n).astype(float)
    events = rng.integers(0, 2, n)
    return rng.integers(0, 5, n) / 4.0, records(times, events)


# ---- concordance


def test_perfect_anti_ordering():
    c, M = c_index([4, 3, 2, 1], records([1, 2, 3, 4], [1, 1, 1, 1]))
    assert (c, M) == (1.0, 6)


def test_equal_risks_score_zero():
    assert c_index([0.5] * 4, records([1, 2, 3, 4], [1, 1, 1, 1]))[0] == 0.0


def test_equal_risks_half_convention():
    assert c_index([0.5] * 4, records([1, 2, 3, 4], [1, 1, 1, 1]), tie_score=0.5)[0] == 0.5


def test_three_patient_fixture():
    c, M = c_index([0.9, 0.5, 0.7], records([2, 5, 7], [1, 1, 0]))
    assert M == 3 and c == 2 / 3


def test_no_comparable_pairs():
    with pytest.raises(UndefinedConcordance):
        c_index([0.1, 0.2], records([3, 3], [1, 1]))
    with pytest.raises(UndefinedConcordance):
        c_index([0.1, 0.2], records([1, 2], [0, 0]))


@pytest.mark.parametrize("seed", range(100))
def test_matches_exhaustive_enumeration(seed):
    rng = np.random.default_rng(seed)
    f, recs = random_cohort(rng, int(rng.integers(2, 13)))
    num, M = enumerate_pairs(f, recs)
    if M == 0:
        with pytest.raises(UndefinedConcordance):
            c_index(f, recs)
        return
    assert c_index(f, recs) == (num / M, M)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_monotone_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    f, recs = random_cohort(rng, 10)
    recs[0] = records([0.5], [1])[0]
    base = c_index(f, recs)
    a, b = rng.uniform(0.1, 5, 2)
    for g in (lambda x: a * x + b, np.exp, lambda x: np.arctan(a * x) + x**3, lambda x: np.log1p(x) * b):
        assert c_index(g(f), recs) == base


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_negation_complements(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=10)
    recs = records(rng.integers(1, 6, 10), rng.integers(0, 2, 10))
    recs[0] = records([0.5], [1])[0]
    assert abs(c_index(f, recs)[0] + c_index(-f, recs)[0] - 1.0) < 1e-12


# ---- stratification


def test_two_risks_split():
    assert stratify_by_median([0.1, 0.9]).tolist() == [False, True]


def test_equal_risks_all_low():
    assert not stratify_by_median([0.3] * 6).any()


@pytest.mark.parametrize("seed", range(20))
def test_median_split_matches_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    f = rng.random(int(rng.integers(2, 12)))
    order = sorted(range(len(f)), key=lambda i: f[i])
    n_low = (len(f) + 1) // 2
    expect = [True] * len(f)
    for i in order[:n_low]:
        expect[i] = False
    high = stratify_by_median(f)
    assert high.tolist() == expect
    assert abs(int(high.sum()) - int((~high).sum())) <= 1


# ---- Kaplan-Meier


def test_km_all_censored_is_flat():
    km = kaplan_meier(records([1, 2, 3], [0, 0, 0]))
    assert np.all(km(np.linspace(0, 10, 11)) == 1.0)


def test_km_three_events():
    km = kaplan_meier(records([1, 2, 3], [1, 1, 1]))
    assert km.times.tolist() == [1, 2, 3]
    assert np.max(np.abs(km.survival - [2 / 3, 1 / 3, 0.0])) < 1e-12


def test_km_mixed_fixture():
    km = kaplan_meier(records([1, 2, 2, 3, 4], [0, 1, 1, 0, 1]))
    assert km.times.tolist() == [2, 4]
    assert km.at_risk.tolist() == [4, 1]
    assert abs(km(2.0) - 0.5) < 1e-12 and abs(km(3.0) - 0.5) < 1e-12 and abs(km(4.0)) < 1e-12
    assert km(1.9) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 30))
def test_km_monotone_from_one(seed, n):
    rng = np.random.default_rng(seed)
    km = kaplan_meier(records(rng.exponential(5, n), rng.integers(0, 2, n)))
    grid = np.linspace(0, 40, 200)
    s = km(grid)
    assert s[0] == 1.0 and np.all(np.diff(s) <= 0) and np.all(s >= 0)


# ---- log-rank


A6 = records([1, 3, 5], [1, 1, 0], "a")
B6 = records([2, 4, 6], [1, 1, 1], "b")


def test_six_patient_table():
    res = log_rank(A6, B6)
    # (time, n_a, n_b, d_a, d_b) worked out by hand
    assert [(r["time"], r["n_a"], r["n_b"], r["d_a"], r["d_b"]) for r in res.table] == [
        (1, 3, 3, 1, 0),
        (2, 2, 3, 0, 1),
        (3, 2, 2, 1, 0),
        (4, 1, 2, 0, 1),
        (6, 0, 1, 0, 1),
    ]
    assert res.observed_a == 2
    assert abs(res.expected_a - (1 / 2 + 2 / 5 + 1 / 2 + 1 / 3)) < 1e-15
    assert abs(res.variance - 433 / 450) < 1e-15
    assert abs(res.statistic - 32 / 433) < 1e-9
    assert abs(res.p_value - chi2.sf(32 / 433, 1)) < 1e-12


def test_six_patient_matches_reference():
    ref, p_ref = survdiff(np.array([1, 3, 5, 2, 4, 6.0]), np.array([1, 1, 0, 1, 1, 1]), np.array([0, 0, 0, 1, 1, 1]))
    res = log_rank(A6, B6)
    assert abs(res.statistic - ref) < 1e-9 and abs(res.p_value - p_ref) < 1e-9


def test_identical_groups():
    res = log_rank(A6, records([1, 3, 5], [1, 1, 0], "c"))
    assert res.statistic == 0.0 and res.p_value == 1.0


def test_separated_groups():
    rng = np.random.default_rng(0)
    ta = rng.uniform(0.1, 2.0, 20)
    tb = rng.uniform(10.5, 20.0, 20)
    eb = rng.integers(0, 2, 20)
    res = log_rank(records(ta, [1] * 20, "a"), records(tb, eb, "b"))
    ref, p_ref = survdiff(np.concatenate([ta, tb]), np.concatenate([np.ones(20), eb]), np.repeat([0, 1], 20))
    assert abs(res.statistic - ref) < 1e-9
    assert res.p_value < 0.001


def test_no_events_is_degenerate():
    with pytest.warns(ZeroVarianceWarning):
        res = log_rank(records([1, 2], [0, 0]), records([3], [0]))
    assert res.statistic == 0.0 and res.p_value == 1.0 and res.degenerate


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_log_rank_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = records(rng.integers(1, 10, 8), rng.integers(0, 2, 8), "a")
    b = records(rng.integers(1, 10, 7), rng.integers(0, 2, 7), "b")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroVarianceWarning)
        x, y = log_rank(a, b), log_rank(b, a)
    assert abs(x.statistic - y.statistic) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_log_rank_matches_reference_on_random_groups(seed):
    rng = np.random.default_rng(seed)
    t = rng.integers(1, 12, 16).astype(float)
    e = rng.integers(0, 2, 16)
    e[0] = e[8] = 1
    g = np.repeat([0, 1], 8)
    res = log_rank(records(t[:8], e[:8]), records(t[8:], e[8:]))
    ref, _ = survdiff(t, e, g)
    assert abs(res.statistic - ref) < 1e-9


def test_log_rank_needs_two_groups():
    with pytest.raises(ValueError):
        log_rank([], A6)


# ---- cohort evaluation


def test_evaluate_cohort_bundle():
    recs = records([1, 2, 3, 4, 5, 6], [1, 1, 1, 1, 0, 1])
    ev = evaluate_cohort([6, 5, 4, 3, 2, 1], recs)
    assert ev.c_index == 1.0 and ev.high_risk.tolist() == [True, True, True, False, False, False]
    assert ev.km_high.times.tolist() == [1, 2, 3] and ev.logrank.p_value < 0.05
