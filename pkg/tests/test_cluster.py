import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from behaviorseg import cluster as C
from behaviorseg.cluster import KMeansModel, SegmentProfile
from behaviorseg.errors import DegenerateVariance, DimensionMismatch, EmptyCluster, KTooSmall, TooFewPoints
from behaviorseg.features import FeatureMatrix, Stage
from oracles import best_two_partition_wcss, naive_db


def model_at(centroids):
    return KMeansModel(np.asarray(centroids, dtype=float), 0.0, 0, 0)


# kmeans_fit


def test_four_points():
    X = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], dtype=float)
    m = C.kmeans_fit(X, 2, seed=1)
    cents = sorted(map(tuple, m.centroids))
    assert cents == [(0, 0.5), (10, 0.5)]
    assert abs(m.wcss - 1.0) < 1e-12


def test_k1_is_grand_mean(rng):
    X = rng.normal(size=(40, 3))
    m = C.kmeans_fit(X, 1)
    np.testing.assert_allclose(m.centroids[0], X.mean(0), atol=1e-12)
    assert abs(m.wcss - ((X - X.mean(0)) ** 2).sum()) < 1e-9


def test_exhaustive_two_partition_oracle_50_instances():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        X = rng.normal(size=(6, 2)) * rng.uniform(0.5, 3)
        m = C.kmeans_fit(X, 2, seed=int(rng.integers(1000)))
        assert abs(m.wcss - best_two_partition_wcss(X)) < 1e-9


def test_too_few_points():
    with pytest.raises(TooFewPoints):
        C.kmeans_fit(np.zeros((2, 2)), 3)


def test_fit_invariants(rng):
    X = np.concatenate([rng.normal(c, 0.3, size=(60, 2)) for c in ((0, 0), (4, 0), (0, 4))])
    m = C.kmeans_fit(X, 3, seed=7)
    labels, d2 = C._kernels.assign_labels(X, m.centroids)
    assert m.converged
    for k in range(3):
        np.testing.assert_allclose(m.centroids[k], X[labels == k].mean(0), atol=1e-8)
    full = ((X[:, None, :] - m.centroids[None]) ** 2).sum(-1)
    assert np.array_equal(labels, full.argmin(1))
    # wcss never increases across Lloyd iterations
    h = np.array(m.wcss_history)
    assert np.all(np.diff(h) <= 1e-9 * h[0])


def test_seed_determinism(rng):
    X = rng.normal(size=(300, 4))
    a = C.kmeans_fit(X, 5, seed=11)
    b = C.kmeans_fit(X, 5, seed=11)
    assert a.centroids.tobytes() == b.centroids.tobytes() and a.wcss == b.wcss


def test_empty_cluster_repair():
    # duplicate points force k-means++ to pick repeats; repair keeps K clusters non-empty
    X = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]])
    m = C.kmeans_fit(X, 3, seed=0, restarts=3)
    labels = m.predict(X)
    assert m.K == 3
    assert len(np.unique(labels)) >= 2


# assign_cluster


def test_assign_cluster_rules(rng):
    cents = rng.normal(size=(6, 3))
    m = model_at(cents)
    for i in range(6):
        assert C.assign_cluster(cents[i], m) == i
    tie = model_at([[5, 5], [-1, 0], [9, 9], [9, -9], [1, 0]])
    assert C.assign_cluster([0, 0], tie) == 1
    with pytest.raises(DimensionMismatch):
        C.assign_cluster([0, 0, 0], tie)


def test_assign_matches_linear_scan(rng):
    m = model_at(rng.normal(size=(7, 4)))
    P = rng.normal(size=(500, 4))
    got = m.predict(P)
    for x, g in zip(P, got):
        best, arg = math.inf, -1
        for k, c in enumerate(m.centroids):
            d = float(((x - c) ** 2).sum())
            if d < best:
                best, arg = d, k
        assert g == arg


# BIC


def test_bic_hand_computed():
    X = np.array([[0.0], [1.0], [2.0], [5.0]])
    m = C.kmeans_fit(X, 1)
    n, p, K = 4, 1, 1
    wcss = 0.0
    mu = 2.0
    for x in (0, 1, 2, 5):
        wcss += (x - mu) ** 2  # 14
    sigma2 = wcss / (p * (n - K))
    loglik = n * math.log(1.0) - n * p / 2 * math.log(2 * math.pi * sigma2) - wcss / (2 * sigma2)
    want = -2 * loglik + (K * p + K) * math.log(n)
    assert abs(C.bic_score(X, m) - want) < 1e-9


def test_bic_degenerate():
    X = np.array([[0.0], [1.0]])
    with pytest.raises(DegenerateVariance):
        C.bic_score(X, C.kmeans_fit(X, 2))
    Y = np.ones((5, 2))
    with pytest.raises(DegenerateVariance):
        C.bic_score(Y, C.kmeans_fit(Y, 1))


def test_bic_penalizes_extra_cluster_on_single_gaussian():
    wins = 0
    for seed in range(10):
        X = np.random.default_rng(seed).normal(size=(500, 2))
        b1 = C.bic_score(X, C.kmeans_fit(X, 1, seed=seed))
        b2 = C.bic_score(X, C.kmeans_fit(X, 2, seed=seed))
        wins += b2 > b1
    assert wins >= 9


# Davies-Bouldin


def test_db_examples():
    singletons = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert C.davies_bouldin(singletons, model_at(singletons)) == 0
    X = np.array([[-1, 0], [1, 0], [9, 0], [11, 0]], dtype=float)
    assert abs(C.davies_bouldin(X, model_at([[0, 0], [10, 0]])) - 0.2) < 1e-12


def test_db_from_definition_100_instances():
    rng = np.random.default_rng(99)
    for _ in range(100):
        K = int(rng.integers(2, 6))
        X = rng.normal(size=(int(rng.integers(K * 3, 60)), int(rng.integers(1, 4))))
        m = C.kmeans_fit(X, K, seed=int(rng.integers(100)), restarts=2)
        assert abs(C.davies_bouldin(X, m) - naive_db(X.tolist(), m.centroids.tolist())) < 1e-9


def test_db_errors():
    X = np.array([[0.0], [1.0]])
    with pytest.raises(KTooSmall):
        C.davies_bouldin(X, model_at([[0.5]]))
    with pytest.raises(EmptyCluster):
        C.davies_bouldin(X, model_at([[0.0], [1.0], [50.0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50), st.floats(0.1, 10), st.floats(0, 2 * math.pi))
def test_db_invariant_to_similarity_transforms(seed, shift, scale, angle):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 2))
    m = C.kmeans_fit(X, 3, seed=seed, restarts=2)
    R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    Y = scale * X @ R.T + shift
    mY = model_at(scale * m.centroids @ R.T + shift)
    if not np.array_equal(mY.predict(Y), m.predict(X)):
        return  # a boundary point flipped under rounding; the index is then not comparable
    assert abs(C.davies_bouldin(Y, mY) - C.davies_bouldin(X, m)) < 1e-9


# select_k


def blobs(seed, k=3, n=150, sep=8.0):
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(k, 2)) * sep
    while min(np.linalg.norm(a - b) for a, b in itertools.combinations(centres, 2)) < sep:
        centres = rng.normal(size=(k, 2)) * sep
    return np.concatenate([rng.normal(c, 1.0, size=(n, 2)) for c in centres])


def test_select_k_three_blobs():
    hits_bic = hits_db = 0
    for seed in range(10):
        sel = C.select_k(blobs(seed), range(2, 9), seed=seed)
        hits_bic += sel.recommended_k == 3
        hits_db += sel.db_k == 3
    assert hits_bic >= 9 and hits_db >= 9


def test_select_k_single_candidate_and_curve(tmp_path):
    X = blobs(1)
    sel = C.select_k(X, [2], seed=0)
    assert sel.recommended_k == 2
    sel = C.select_k(X, range(1, 7), seed=0)
    assert sel.rows[0].davies_bouldin is None
    assert sel.wcss_monotone()
    sel.to_csv(tmp_path / "curve.csv")
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "K,wcss,bic,davies_bouldin"
    assert lines[1].endswith(",") and len(lines) == 7


def test_criteria_disagreement_flag():
    sel = C.KSelection((), 4, 2)
    assert sel.criteria_disagree
    assert not C.KSelection((), 3, 3).criteria_disagree


# profiling and naming


def stage2(values, columns):
    values = np.asarray(values, dtype=float)
    return FeatureMatrix([f"u{i}" for i in range(len(values))], columns, values, Stage.ORTHOGONAL)


def test_profile_single_segment():
    m2 = stage2(np.random.default_rng(0).uniform(size=(20, 3)), ["vdays_per_week", "sessions_per_vday", "a_cpv_per_session"])
    (p,) = C.profile_segments(np.zeros(20, int), m2, 1)
    assert all(abs(z) < 1e-12 for z in p.z.values())
    np.testing.assert_allclose(list(p.means.values()), m2.values.mean(0))


def test_profile_two_blobs_and_zero_sd():
    rng = np.random.default_rng(1)
    vals = np.column_stack([np.ones(40), rng.uniform(1, 2, 40),
                            np.r_[rng.uniform(5, 6, 20), rng.uniform(0, 1, 20)]])
    m2 = stage2(vals, ["vdays_per_week", "sessions_per_vday", "article_cpv_per_session"])
    labels = np.r_[np.zeros(20, int), np.ones(20, int)]
    with pytest.warns(UserWarning, match="zero population sd"):
        profs = C.profile_segments(labels, m2, 2)
    assert profs[0].z["article_cpv_per_session"] > 0 > profs[1].z["article_cpv_per_session"]
    assert profs[0].z["vdays_per_week"] == 0


def test_empty_segment_profile_flagged():
    m2 = stage2([[1, 2, 3], [2, 3, 4]], ["vdays_per_week", "sessions_per_vday", "a_cpv_per_session"])
    with pytest.warns(UserWarning, match="empty"):
        profs = C.profile_segments(np.array([0, 0]), m2, 2)
    assert profs[1].empty and profs[1].size == 0


def prof(seg, **z):
    return SegmentProfile(seg, 10, 0.1, {k: 0.0 for k in z}, z)


def test_metric_family():
    assert C.metric_family("quotes_cpv_per_session") == "Quotes"
    assert C.metric_family("quotes_apv_per_session") == "Quotes"
    assert C.metric_family("search_clicks_per_session") == "Search"
    assert C.metric_family("message_boards_cpv_per_session") == "Message Boards"
    assert C.metric_family("vdays_per_week") is None


def test_naming_examples():
    z_article = dict(article_cpv_per_session=2.3, quotes_cpv_per_session=-0.5, charts_cpv_per_session=-0.7)
    assert C.auto_name(prof(0, **z_article)) == "Article Only"
    z_qc = dict(quotes_cpv_per_session=1.8, charts_cpv_per_session=1.2, article_cpv_per_session=0.4)
    assert C.auto_name(prof(0, **z_qc)) == "Quotes & Charts"
    z_flat = dict(quotes_cpv_per_session=0.2, charts_cpv_per_session=-0.29, article_cpv_per_session=0.0)
    assert C.auto_name(prof(0, **z_flat)) == "Tourists"
    # one qualifying family but others not all negative: no "Only"
    assert C.auto_name(prof(0, article_cpv_per_session=2.0, quotes_cpv_per_session=0.1)) == "Article"


def test_family_z_is_max_of_members():
    p = prof(0, quotes_cpv_per_session=0.5, quotes_apv_per_session=1.5, article_cpv_per_session=-1)
    assert C.family_scores(p) == {"Quotes": 1.5, "Article": -1}


def test_override_and_unique_names():
    a = prof(0, article_cpv_per_session=2.0, quotes_cpv_per_session=-1.0)
    b = prof(1, article_cpv_per_session=2.5, quotes_cpv_per_session=-1.0)
    c = prof(2, quotes_cpv_per_session=2.0, article_cpv_per_session=-1.0)
    named = C.name_segments([a, b, c], override={2: "Traders"})
    assert [p.name for p in named] == ["Article Only", "Article Only 2", "Traders"]


@given(st.dictionaries(st.sampled_from(["a", "b", "c", "d", "e"]), st.floats(-3, 3), min_size=1))
def test_argmax_family_always_in_name(zs):
    p = prof(0, **{f"{k}_cpv_per_session": v for k, v in zs.items()})
    fam = C.family_scores(p)
    top, z = max(fam.items(), key=lambda kv: (kv[1], [-ord(ch) for ch in kv[0]]))
    if z >= 1.0:
        assert top in C.auto_name(p)
