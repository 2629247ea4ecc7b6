import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from behaviorseg.stats import adjusted_rand_index, permutation_pvalue, welch_test

samples = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=30)


def test_welch_matches_scipy(rng):
    for _ in range(20):
        x = rng.normal(0, 1, rng.integers(2, 40))
        y = rng.normal(0.3, 2, rng.integers(2, 40))
        ours = welch_test(x, y)
        ref = sps.ttest_ind(y, x, equal_var=False)
        assert ours.t == pytest.approx(ref.statistic, rel=1e-10)
        assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-9, abs=1e-15)


def test_welch_df_hand_case():
    x, y = [1.0, 2.0, 3.0], [2.0, 4.0, 6.0, 8.0]
    vx, vy = 1.0, 20 / 3
    se2 = vx / 3 + vy / 4
    df = se2 ** 2 / ((vx / 3) ** 2 / 2 + (vy / 4) ** 2 / 3)
    r = welch_test(x, y)
    assert r.df == pytest.approx(df, rel=1e-12)
    assert r.t == pytest.approx((5 - 2) / math.sqrt(se2), rel=1e-12)


def test_welch_degenerate_cases():
    same = welch_test([3, 3, 3], [3, 3, 3, 3])
    assert same.p_value == 1.0 and same.degenerate
    apart = welch_test([1, 1, 1], [2, 2])
    assert apart.p_value == 0.0 and apart.degenerate
    tiny = welch_test([1.0], [1.0, 2.0])
    assert math.isnan(tiny.p_value)


def test_welch_against_permutation_oracle():
    rng = np.random.default_rng(7)
    for i in range(10):
        # continuous draws; integer counts put ties on |t| and make the oracle lumpy
        x = rng.lognormal(0, 0.5, 30)
        y = rng.lognormal(rng.uniform(-0.3, 0.3), rng.uniform(0.3, 0.7), 30)
        p = welch_test(x, y).p_value
        assert abs(p - permutation_pvalue(x, y, 100_000, seed=i)) < 0.02


def test_permutation_pvalue_bounds():
    x = np.zeros(5)
    y = np.full(5, 10.0) + np.arange(5)
    p = permutation_pvalue(x, y, 2000, seed=1)
    # only the observed split (and its mirror) reach |t|: 2 of C(10,5)=252
    assert 1 / 2001 <= p < 0.05


def test_false_positive_rate_equal_distributions():
    rng = np.random.default_rng(11)
    trials = 10_000
    x = rng.normal(size=(trials, 40))
    y = rng.normal(size=(trials, 25)) * 1.7
    ps = np.array([welch_test(a, b).p_value for a, b in zip(x, y)])
    assert abs(np.mean(ps < 0.05) - 0.05) <= 0.01


@settings(max_examples=100, deadline=None)
@given(samples, samples)
def test_welch_symmetric_and_bounded(x, y):
    a, b = welch_test(x, y), welch_test(y, x)
    if math.isnan(a.p_value):
        assert math.isnan(b.p_value)
        return
    assert 0.0 <= a.p_value <= 1.0
    assert a.p_value == pytest.approx(b.p_value, abs=1e-12)


def test_ari_hand_cases():
    assert adjusted_rand_index([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert adjusted_rand_index([0, 0, 1, 1], [5, 5, 2, 2]) == 1.0
    # contingency [[1,1],[1,1]]: index 0, expected (2*2)/6, max 2
    assert adjusted_rand_index([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(-0.5)
    # [[2,0],[1,1]]: index 1, rows 2, cols 3, total 6, expected 1 -> no better than chance
    assert adjusted_rand_index([0, 0, 1, 1], [0, 0, 0, 1]) == pytest.approx(0.0)
    # [[2,0],[0,1],[0,1]]: index 1, rows 1, cols 2, total 6, expected 1/3, max 1.5
    assert adjusted_rand_index([0, 0, 1, 2], [0, 0, 1, 1]) == pytest.approx((1 - 1 / 3) / (1.5 - 1 / 3))


def test_ari_matches_sklearn(rng):
    from sklearn.metrics import adjusted_rand_score

    for _ in range(30):
        n = int(rng.integers(2, 200))
        a = rng.integers(0, rng.integers(1, 6), n)
        b = rng.integers(0, rng.integers(1, 6), n)
        assert adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)


def test_ari_length_mismatch():
    with pytest.raises(ValueError):
        adjusted_rand_index([0, 1], [0])
