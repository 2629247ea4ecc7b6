import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from behaviorseg import features as F
from behaviorseg.errors import (
    AllRemoved,
    ColumnMismatch,
    ConstantColumn,
    InsufficientData,
    MissingColumn,
    NegativeValue,
    StageError,
)
from behaviorseg.features import FeatureMatrix, Stage


def fm(values, columns=None, stage=Stage.RAW):
    values = np.asarray(values, dtype=float)
    columns = columns or [f"c{j}" for j in range(values.shape[1])]
    return FeatureMatrix([f"u{i}" for i in range(values.shape[0])], columns, values, stage)


def raw(days, sessions, **counters):
    cols = ["days_visited", "sessions", *counters]
    return fm(np.column_stack([days, sessions, *counters.values()]), cols)


# FeatureMatrix


def test_matrix_rejects_non_finite():
    with pytest.raises(ValueError):
        fm([[1.0, math.nan]])
    with pytest.raises(ValueError):
        fm([[1.0, math.inf]])


def test_stage_must_advance_in_order():
    m = raw([3], [6], quotes_cpv=[12])
    with pytest.raises(StageError):
        F.log_transform(m)
    with pytest.raises(StageError):
        F.orthogonalize(F.orthogonalize(m, 1), 1)


# Step 2


def test_orthogonalize_examples():
    m2 = F.orthogonalize(raw([7, 3], [6, 6], quotes_cpv=[12, 12]), 2)
    assert m2.columns == ("vdays_per_week", "sessions_per_vday", "quotes_cpv_per_session")
    assert m2.column("vdays_per_week")[0] == 3.5
    assert m2.column("sessions_per_vday")[1] == 2
    assert m2.column("quotes_cpv_per_session")[1] == 2
    assert m2.stage == Stage.ORTHOGONAL


def test_orthogonalize_missing_column():
    with pytest.raises(MissingColumn):
        F.orthogonalize(fm([[1, 2]], ["days_visited", "quotes_cpv"]), 1)


def test_zero_sessions_guard():
    m2 = F.orthogonalize(raw([0], [0], quotes_cpv=[0]), 1)
    assert m2.values.tolist() == [[0.0, 0.0, 0.0]]


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 60).flatmap(lambda n: st.tuples(
        hnp.arrays(np.int64, n, elements=st.integers(1, 10_000)),
        hnp.arrays(np.int64, n, elements=st.integers(1, 100_000)),
        hnp.arrays(np.int64, (n, 3), elements=st.integers(0, 10**9)),
    )),
    st.sampled_from([1.0, 2.0, 1.5, 7 / 3, 0.1, 52.0]),
)
def test_step2_round_trip_exact(data, weeks):
    days, sessions, counts = data
    m1 = raw(days, sessions, a_cpv=counts[:, 0], b_apv=counts[:, 1], c_clicks=counts[:, 2])
    m2 = F.orthogonalize(m1, weeks)
    back = F.restore_counts(m2, weeks)
    assert back.columns == m1.columns
    assert np.array_equal(back.values, m1.values)
    # the unrounded products are already within one ulp of the counts
    sess = m1.column("sessions")
    prod = m2.values[:, 2:] * sess[:, None]
    assert np.all(np.abs(prod - m1.values[:, 2:]) <= np.spacing(np.maximum(m1.values[:, 2:], 1)))


# Step 3


def test_identical_users_not_removed():
    m2 = F.orthogonalize(raw([2] * 10, [4] * 10, q_cpv=[8] * 10), 1)
    m3, removed, _ = F.remove_outliers(m2, 0.999)
    assert removed == [] and m3.n == 10


def test_single_extreme_user_removed(rng):
    n = 1000
    vals = rng.uniform(0, 5, size=(n, 3))
    vals[417, 2] = 1e6
    m2 = fm(vals, ["vdays_per_week", "sessions_per_vday", "quotes_cpv_per_session"], Stage.ORTHOGONAL)
    m3, removed, thr = F.remove_outliers(m2, 0.999)
    # sorting oracle: linear interpolation between order statistics
    s = np.sort(vals, axis=0)
    h = (n - 1) * 0.999
    lo = int(math.floor(h))
    oracle = s[lo] + (h - lo) * (s[lo + 1] - s[lo])
    np.testing.assert_allclose(thr, oracle, rtol=1e-12)
    expected = [f"u{i}" for i in range(n) if np.any(vals[i] > oracle)]
    assert "u417" in removed and removed == expected
    assert m3.n == n - len(removed)


def test_half_quantile_on_increasing_column():
    m2 = fm(np.column_stack([np.arange(10.0), np.ones(10), np.ones(10)]),
            ["vdays_per_week", "sessions_per_vday", "x_per_session"], Stage.ORTHOGONAL)
    _, removed, thr = F.remove_outliers(m2, 0.5)
    assert thr[0] == 4.5
    assert removed == [f"u{i}" for i in range(5, 10)]


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 50), st.integers(1, 4)),
                  elements=st.floats(0, 100, allow_nan=False)),
       st.floats(0.05, 0.999))
def test_outlier_rule_property(vals, q):
    m2 = fm(vals, stage=Stage.ORTHOGONAL)
    try:
        m3, removed, thr = F.remove_outliers(m2, q)
    except AllRemoved:
        return
    removed_set = set(removed)
    for i, u in enumerate(m2.user_ids):
        violates = bool(np.any(vals[i] > thr))
        assert violates == (u in removed_set)
    assert m3.n == m2.n - len(removed) <= m2.n


# Step 4


def test_log_examples():
    m3 = fm([[0.0, math.e - 1]], stage=Stage.CLEANED)
    out = F.log_transform(m3).values
    assert out[0, 0] == 0
    assert abs(out[0, 1] - 1) < 1e-15


def test_log_negative():
    with pytest.raises(NegativeValue):
        F.log_transform(fm([[-1.0]], stage=Stage.CLEANED))


@given(st.lists(st.floats(0, 1e12, allow_nan=False), min_size=2, max_size=30))
def test_step4_monotone(xs):
    m3 = fm(np.array(xs)[:, None], stage=Stage.CLEANED)
    y = F.log_transform(m3).values[:, 0]
    x = np.array(xs)
    i, j = np.meshgrid(np.arange(len(x)), np.arange(len(x)))
    lt = x[i] < x[j]
    assert np.all(y[i][lt] <= y[j][lt])
    # strict wherever the inputs are far enough apart to be distinguishable after rounding
    far = x[j] > x[i] * (1 + 1e-9) + 1e-300
    assert np.all(y[i][far] < y[j][far])


# Step 5


def test_normalize_example():
    m5, stats = F.normalize(fm([[0.0], [2.0]], stage=Stage.LOGGED))
    np.testing.assert_allclose(m5.values[:, 0], [-1 / math.sqrt(2), 1 / math.sqrt(2)], rtol=1e-15)
    assert stats.mean.tolist() == [1.0]
    assert abs(stats.sd[0] - math.sqrt(2)) < 1e-15


def test_normalize_idempotent(rng):
    m5, _ = F.normalize(fm(rng.normal(size=(50, 3)), stage=Stage.LOGGED))
    again, _ = F.normalize(fm(m5.values, stage=Stage.LOGGED))
    np.testing.assert_allclose(again.values, m5.values, atol=1e-10)


def test_constant_column():
    with pytest.raises(ConstantColumn):
        F.normalize(fm([[3.0], [3.0], [3.0]], stage=Stage.LOGGED))


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(3, 200), st.integers(1, 6)),
                  elements=st.floats(0, 20, allow_nan=False)))
def test_stage5_moments(vals):
    m4 = fm(vals, stage=Stage.LOGGED)
    sd = vals.std(axis=0, ddof=1)
    if np.any(sd < 1e-6 * np.maximum(1, np.abs(vals).max(axis=0))):
        return  # numerically constant column, rejected by design
    m5, _ = F.normalize(m4)
    assert np.all(np.abs(m5.values.mean(axis=0)) < 1e-10)
    assert np.all(np.abs(m5.values.std(axis=0, ddof=1) - 1) < 1e-10)


# Step 6


def test_components_needed():
    assert F.components_needed([0.5, 0.3, 0.1, 0.1], 0.85) == 3
    assert F.components_needed([0.5, 0.35, 0.15], 0.85) == 2


def test_pca_rank_one():
    t = np.linspace(-1, 1, 11)
    m5 = fm(np.column_stack([t, t]) / t.std(ddof=1), stage=Stage.NORMALIZED)
    for thr in (0.5, 0.85, 1.0):
        model = F.fit_pca(m5, thr)
        np.testing.assert_allclose(model.loadings[:, 0], [1 / math.sqrt(2)] * 2, atol=1e-12)
        assert model.n_components == 1
        assert abs(model.explained_ratio[0] - 1) < 1e-12


def test_pca_needs_more_users_than_features(rng):
    with pytest.raises(InsufficientData):
        F.fit_pca(fm(rng.normal(size=(3, 3)), stage=Stage.NORMALIZED))


def normalized(rng, n=200, p=6):
    A = rng.normal(size=(p, p))
    m5, _ = F.normalize(fm(rng.normal(size=(n, p)) @ A, stage=Stage.LOGGED))
    return m5


def test_pca_properties(rng):
    m5 = normalized(rng)
    model = F.fit_pca(m5, 1.0)
    W = model.loadings
    assert W.shape == (6, 6)
    assert np.abs(W.T @ W - np.eye(6)).max() < 1e-8
    assert np.all(np.diff(model.eigenvalues) <= 0)
    assert abs(model.all_explained_ratio.sum() - 1) < 1e-8
    for j in range(W.shape[1]):
        assert W[np.argmax(np.abs(W[:, j])), j] > 0
    scores = F.project_pca(m5, model)
    assert np.abs(scores.values @ W.T - m5.values).max() < 1e-8
    assert abs(scores.values.var(axis=0, ddof=1).sum() - m5.values.var(axis=0, ddof=1).sum()) < 1e-8


def test_pca_threshold_respected(rng):
    m5 = normalized(rng)
    for thr in (0.3, 0.6, 0.85, 0.95):
        model = F.fit_pca(m5, thr)
        assert model.cumulative_ratio >= thr - 1e-12
        assert model.n_components == 1 or model.all_explained_ratio[: model.n_components - 1].sum() < thr


def test_projection_triple_loop_oracle(rng):
    m5 = fm(rng.normal(size=(5, 3)), stage=Stage.NORMALIZED)
    W = np.linalg.qr(rng.normal(size=(3, 3)))[0][:, :2]
    model = F.PcaModel(m5.columns, W, np.array([3.0, 2.0, 1.0]), 0.5)
    got = F.project_pca(m5, model).values
    want = np.zeros((5, 2))
    for i in range(5):
        for j in range(2):
            for k in range(3):
                want[i, j] += m5.values[i, k] * W[k, j]
    np.testing.assert_allclose(got, want, rtol=1e-14, atol=1e-14)


def test_project_zero_and_mismatch(rng):
    m5 = normalized(rng)
    model = F.fit_pca(m5)
    zero = fm(np.zeros((4, 6)), list(m5.columns), Stage.NORMALIZED)
    assert np.all(F.project_pca(zero, model).values == 0)
    other = fm(np.zeros((4, 6)), [f"x{j}" for j in range(6)], Stage.NORMALIZED)
    with pytest.raises(ColumnMismatch):
        F.project_pca(other, model)


# end to end


def test_engineer_deterministic_and_frozen_replay(small_cohort):
    from behaviorseg.ingest import aggregate_raw_features

    cohort, _, _ = small_cohort
    m1 = aggregate_raw_features(cohort.definition, cohort.periods.definition).to_matrix()
    a = F.engineer(m1, cohort.periods.definition.weeks)
    b = F.engineer(m1, cohort.periods.definition.weeks)
    assert a.scores.values.tobytes() == b.scores.values.tobytes()
    replay = F.apply_frozen(m1, a.stats, a.pca)
    kept = np.isin(replay.user_ids, a.scores.user_ids)
    np.testing.assert_allclose(replay.values[kept], a.scores.values, atol=1e-12)
    assert replay.n == m1.n
    assert len(a.removed) == m1.n - a.scores.n


def test_engineer_constant_column_policy():
    rng = np.random.default_rng(3)
    n = 300
    m1 = raw(rng.integers(1, 7, n), rng.integers(7, 20, n), a_cpv=rng.integers(0, 50, n),
             b_cpv=rng.integers(0, 50, n), dead_cpv=np.zeros(n, int))
    with pytest.raises(ConstantColumn):
        F.engineer(m1, 1.0)
    with pytest.warns(UserWarning, match="dropping constant"):
        eng = F.engineer(m1, 1.0, drop_constant=True)
    assert eng.stats.dropped_columns == ("dead_cpv_per_session",)
    assert np.all(eng.stats.normalization.sd > 0)
