import io
import json

import numpy as np
import pytest
from scipy.stats import ks_2samp

from behaviorseg import synth
from behaviorseg.errors import InvalidSpec, UnknownArchetype
from behaviorseg.ingest import aggregate_experiment_metrics, aggregate_raw_features

LIGHT = [
    synth.ArchetypeSpec("a", 0.5, 3.0, 1.5, {"article_cpv": 2.0, "article_apv": 1.0}),
    synth.ArchetypeSpec("b", 0.5, 3.0, 1.5, {"quotes_cpv": 2.0, "article_cpv": 0.2}),
]


def csv_bytes(table):
    buf = io.StringIO()
    table.to_csv(buf)
    return buf.getvalue()


def test_single_archetype_labels():
    spec = synth.ArchetypeSpec("only", 1.0, 2.0, 1.0, {"article_cpv": 1.0})
    cohort = synth.generate_cohort([spec], 100, seed=1)
    assert set(cohort.truth.values()) == {"only"}
    assert len(cohort.truth) == 100


def test_every_present_user_visits():
    cohort = synth.generate_cohort(LIGHT, 500, seed=2, unseen_fraction=0.2, dropout=0.2)
    raw = aggregate_raw_features(cohort.definition, cohort.periods.definition)
    assert set(raw.user_ids.tolist()) == {u for u, s in cohort.status_map.items() if s != 3}
    assert raw.days_visited.min() >= 1


@pytest.mark.parametrize("fraction", [0.5, 0.3])
def test_unseen_fraction_binomial(fraction):
    n = 4000
    cohort = synth.generate_cohort(LIGHT, n, seed=3, unseen_fraction=fraction, dropout=0.2)
    exp_users = set(cohort.experiment.user_ids().tolist())
    def_users = set(cohort.definition.user_ids().tolist())
    m = len(exp_users)
    unseen = len(exp_users - def_users)
    assert abs(unseen - fraction * m) <= 3 * np.sqrt(m * fraction * (1 - fraction))


def test_same_seed_identical_streams():
    a = synth.generate_cohort(LIGHT, 300, seed=9, unseen_fraction=0.1, dropout=0.1)
    b = synth.generate_cohort(LIGHT, 300, seed=9, unseen_fraction=0.1, dropout=0.1)
    assert csv_bytes(a.definition) == csv_bytes(b.definition)
    assert csv_bytes(a.experiment) == csv_bytes(b.experiment)
    c = synth.generate_cohort(LIGHT, 300, seed=10, unseen_fraction=0.1, dropout=0.1)
    assert csv_bytes(a.definition) != csv_bytes(c.definition)


def test_apv_only_with_cpv():
    cohort = synth.generate_cohort(LIGHT, 300, seed=4)
    ev, draw = cohort.experiment, cohort._exp_draw
    kind = ev.event
    key = draw.session_of_event * len(ev.pages) + ev.page_idx
    assert np.isin(key[kind == 1], key[kind == 0]).all()


def test_split_ratio_binomial():
    n = 5000
    cohort = synth.generate_cohort(LIGHT, n, seed=5)
    _, assignments = synth.inject_effects(cohort, (), test_fraction=0.1, seed=5)
    k = sum(a == "test" for a in assignments.values())
    assert abs(k - 0.1 * n) <= 3 * np.sqrt(n * 0.1 * 0.9)


def test_multiplier_one_is_aa():
    cohort = synth.generate_cohort(LIGHT, 4000, seed=6)
    plain, a1 = synth.inject_effects(cohort, (), seed=1)
    unit, a2 = synth.inject_effects(cohort, [synth.EffectInjection("a", "cpv", 1.0)], seed=1)
    assert a1 == a2
    assert csv_bytes(plain) == csv_bytes(unit)
    # event rates never depend on the arm without an injection
    m = aggregate_experiment_metrics(plain, cohort.periods.experiment)
    ids = m.user_ids.tolist()
    own = dict(zip(cohort.user_ids, cohort.archetype.tolist()))
    arche = np.array([own[u] for u in ids])
    for a in (0, 1):
        t = m.cpv[(arche == a) & (m.arms == "test")]
        c = m.cpv[(arche == a) & (m.arms == "control")]
        assert ks_2samp(t, c).pvalue > 1e-3


def test_injected_cpv_effect_recovered_from_truth():
    n = 50_000
    cohort = synth.generate_cohort(LIGHT, n, seed=8)
    ev, _ = synth.inject_effects(cohort, [synth.EffectInjection("a", "cpv", 0.85)], seed=8)
    m = aggregate_experiment_metrics(ev, cohort.periods.experiment)
    own = dict(zip(cohort.user_ids, cohort.archetype.tolist()))
    arche = np.array([own[u] for u in m.user_ids.tolist()])
    for a, want in ((0, -0.15), (1, 0.0)):
        t = m.cpv[(arche == a) & (m.arms == "test")].mean()
        c = m.cpv[(arche == a) & (m.arms == "control")].mean()
        assert abs((t - c) / c - want) < 0.02


def test_multiplier_above_one_adds_events():
    cohort = synth.generate_cohort(LIGHT, 5000, seed=11)
    ev, _ = synth.inject_effects(cohort, [synth.EffectInjection("b", "quotes_cpv", 1.2)], seed=2)
    m = aggregate_experiment_metrics(ev, cohort.periods.experiment)
    own = dict(zip(cohort.user_ids, cohort.archetype.tolist()))
    b = np.array([own[u] for u in m.user_ids.tolist()]) == 1
    q = m.page_cpv["quotes"]
    ratio = q[b & (m.arms == "test")].mean() / q[b & (m.arms == "control")].mean()
    assert abs(ratio - 1.2) < 0.05


def test_negative_binomial_is_overdispersed():
    spec = [synth.ArchetypeSpec("x", 1.0, 7.0, 1.0, {"article_cpv": 4.0})]
    cohort = synth.generate_cohort(spec, 2000, seed=3, distribution="negbin", dispersion=1.0)
    raw = aggregate_raw_features(cohort.definition, cohort.periods.definition)
    per_session = raw.counter("article_cpv") / raw.sessions
    assert per_session.var() > 2 * per_session.mean() / raw.sessions.mean()


def test_invalid_specs():
    with pytest.raises(InvalidSpec):
        synth.validate_specs([synth.ArchetypeSpec("a", 0.5, 1, 1), synth.ArchetypeSpec("b", 0.4, 1, 1)])
    with pytest.raises(InvalidSpec):
        synth.ArchetypeSpec("a", 1.0, 1, 1, {"article_cpv": -1.0})
    with pytest.raises(InvalidSpec):
        synth.ArchetypeSpec("a", 1.0, 1, 1, {"Article": 1.0})
    with pytest.raises(InvalidSpec):
        synth.EffectInjection("a", "cpv", 0.0)
    with pytest.raises(InvalidSpec):
        synth.generate_cohort(LIGHT, 0)


def test_unknown_archetype():
    cohort = synth.generate_cohort(LIGHT, 50, seed=1)
    with pytest.raises(UnknownArchetype):
        synth.inject_effects(cohort, [synth.EffectInjection("zzz", "cpv", 0.9)])


def test_scenario_file_round_trip(tmp_path):
    sc = synth.load_example_scenario()
    assert len(sc.archetypes) == 5
    assert abs(sum(a.weight for a in sc.archetypes) - 1) < 1e-9
    d = {"archetypes": [a.to_dict() for a in sc.archetypes], "n_users": 20, "seed": 4}
    path = tmp_path / "s.json"
    path.write_text(json.dumps(d))
    assert synth.Scenario.load(path).archetypes == sc.archetypes
    path.write_text(json.dumps({**d, "bogus": 1}))
    with pytest.raises(InvalidSpec):
        synth.Scenario.load(path)
