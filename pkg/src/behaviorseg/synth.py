"""Synthetic cohorts with known behavioral archetypes.

Each user belongs to one archetype. Per period the generator draws visiting
days (Bernoulli per calendar day), sessions per visited day (one plus a
Poisson excess) and per-session engagement counts (Poisson, or negative
binomial for overdispersion). An APV on a page is only drawn in sessions
that have at least one CPV on that page.

Users are split into three presence statuses so that every join path of the
experiment analysis is exercised: active in both periods, definition-only
(dropouts) and experiment-only (unseen).
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import InvalidSpec, UnknownArchetype
from .ingest import (
    ARMS,
    SECONDS_PER_DAY,
    SECONDS_PER_WEEK,
    EventTable,
    PeriodPair,
    PeriodSpec,
)
from .seeding import derive_seed

DEFAULT_START = 1_700_006_400  # 2023-11-15 00:00 UTC
_KEY_RE = re.compile(r"^(?P<page>[a-z0-9_]+?)_(?P<kind>cpv|apv|clicks)$")
_KIND_EVENT = {"cpv": 0, "apv": 1, "clicks": 2}
_SESSION_START = 3
_ARM = {a: i for i, a in enumerate(ARMS)}


def _split_key(key: str):
    m = _KEY_RE.match(key)
    if not m:
        raise InvalidSpec(f"rate key {key!r} must look like <page>_cpv, <page>_apv or <page>_clicks")
    return m.group("page"), m.group("kind")


@dataclass(frozen=True)
class ArchetypeSpec:
    name: str
    weight: float
    days_per_week: float
    sessions_per_day: float
    rates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.weight < 1 and self.weight != 1:
            raise InvalidSpec(f"{self.name}: weight must be in (0, 1]")
        if not 0 < self.days_per_week <= 7:
            raise InvalidSpec(f"{self.name}: days_per_week must be in (0, 7]")
        if not self.sessions_per_day >= 1:
            raise InvalidSpec(f"{self.name}: sessions_per_day must be >= 1")
        for k, v in self.rates.items():
            _split_key(k)
            if not (v >= 0 and math.isfinite(v)):
                raise InvalidSpec(f"{self.name}: rate {k} must be a non-negative number")

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                str(d["name"]), float(d["weight"]), float(d["days_per_week"]),
                float(d.get("sessions_per_day", 1.0)),
                {str(k): float(v) for k, v in d.get("rates", {}).items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSpec(f"bad archetype entry: {exc}") from exc

    def to_dict(self):
        return {
            "name": self.name, "weight": self.weight, "days_per_week": self.days_per_week,
            "sessions_per_day": self.sessions_per_day, "rates": dict(self.rates),
        }


@dataclass(frozen=True)
class EffectInjection:
    archetype: str
    metric: str
    multiplier: float

    def __post_init__(self):
        if not self.multiplier > 0:
            raise InvalidSpec("effect multiplier must be positive")
        if self.metric not in _KIND_EVENT:
            _split_key(self.metric)

    @classmethod
    def from_dict(cls, d):
        return cls(str(d["archetype"]), str(d["metric"]), float(d["multiplier"]))


def validate_specs(specs):
    if not specs:
        raise InvalidSpec("at least one archetype is required")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise InvalidSpec("archetype names must be unique")
    total = math.fsum(s.weight for s in specs)
    if abs(total - 1) > 1e-9:
        raise InvalidSpec(f"archetype weights sum to {total}, not 1")


@dataclass
class _PeriodDraw:
    table: EventTable
    session_of_event: np.ndarray
    session_user: np.ndarray
    session_start: np.ndarray


@dataclass
class Cohort:
    """Generated cohort. ``truth`` and ``status`` are ground truth, never pipeline input."""

    specs: list
    user_ids: list
    archetype: np.ndarray
    status: np.ndarray
    periods: PeriodPair
    definition: EventTable
    experiment: EventTable
    distribution: str = "poisson"
    dispersion: float | None = None
    _exp_draw: _PeriodDraw | None = field(default=None, repr=False)

    @property
    def truth(self) -> dict[str, str]:
        names = [s.name for s in self.specs]
        return {u: names[a] for u, a in zip(self.user_ids, self.archetype.tolist())}

    @property
    def status_map(self) -> dict[str, int]:
        return dict(zip(self.user_ids, self.status.tolist()))


def default_periods(definition_weeks=2.0, experiment_weeks=1.0, start=DEFAULT_START) -> PeriodPair:
    mid = start + definition_weeks * SECONDS_PER_WEEK
    return PeriodPair(
        PeriodSpec(float(start), float(mid)),
        PeriodSpec(float(mid), float(mid + experiment_weeks * SECONDS_PER_WEEK)),
    )


def _counts(rng, mean, distribution, dispersion):
    if distribution == "poisson":
        return rng.poisson(mean)
    r = float(dispersion)
    mean = np.asarray(mean, dtype=np.float64)
    return rng.negative_binomial(r, r / (r + mean))


def _feature_layout(specs):
    keys = sorted({k for s in specs for k in s.rates})
    pages = sorted({_split_key(k)[0] for k in keys})
    rate = np.array([[s.rates.get(k, 0.0) for k in keys] for s in specs], dtype=np.float64)
    return keys, pages, rate


def _draw_period(rng, users, arche, specs, period, vocab, distribution, dispersion) -> _PeriodDraw:
    keys, pages, rate = _feature_layout(specs)
    page_of = {p: i for i, p in enumerate(pages)}
    n_days = int(round((period.end - period.start) / SECONDS_PER_DAY))
    p_day = np.array([s.days_per_week / 7 for s in specs])[arche]
    active = rng.random((len(users), n_days)) < p_day[:, None]
    idle = ~active.any(axis=1)
    active[np.nonzero(idle)[0], rng.integers(n_days, size=int(idle.sum()))] = True
    ui, di = np.nonzero(active)
    extra = np.array([s.sessions_per_day - 1 for s in specs])[arche[ui]]
    n_sess = 1 + rng.poisson(extra)
    s_user = np.repeat(ui, n_sess)
    s_day = np.repeat(di, n_sess)
    s_start = period.start + s_day * SECONDS_PER_DAY + rng.integers(0, SECONDS_PER_DAY - 1800, size=len(s_user))
    s_arche = arche[s_user]
    n_s = len(s_user)

    ev_session = [np.arange(n_s)]
    ev_page = [np.full(n_s, len(pages), dtype=np.int64)]
    ev_kind = [np.full(n_s, _SESSION_START, dtype=np.int8)]
    ev_time = [s_start.astype(np.float64)]
    cpv_by_page = {}
    order = sorted(range(len(keys)), key=lambda j: _split_key(keys[j])[1] == "apv")
    for j in order:
        page, kind = _split_key(keys[j])
        counts = _counts(rng, rate[s_arche, j], distribution, dispersion)
        if kind == "cpv":
            cpv_by_page[page] = counts
        elif kind == "apv":
            counts = counts * (cpv_by_page.get(page, np.zeros(n_s, dtype=np.int64)) > 0)
        sess = np.repeat(np.arange(n_s), counts)
        lo, hi = {"cpv": (1, 600), "apv": (601, 1200), "clicks": (1, 1200)}[kind]
        ev_session.append(sess)
        ev_page.append(np.full(len(sess), page_of[page], dtype=np.int64))
        ev_kind.append(np.full(len(sess), _KIND_EVENT[kind], dtype=np.int8))
        ev_time.append(s_start[sess] + rng.integers(lo, hi, size=len(sess)))
    sess = np.concatenate(ev_session)
    kind = np.concatenate(ev_kind)
    t = np.concatenate(ev_time).astype(np.float64)
    page = np.concatenate(ev_page)
    # session_start rows use the pseudo page "site"
    order = np.lexsort((kind != _SESSION_START, t, s_user[sess]))
    sess, kind, t, page = sess[order], kind[order], t[order], page[order]
    table = EventTable(
        vocab, users[s_user[sess]], t, np.zeros(len(t), dtype=np.int8), (*pages, "site"), page, kind,
    )
    return _PeriodDraw(table, sess, users[s_user], s_start)


def generate_cohort(
    specs,
    n_users: int,
    periods: PeriodPair | None = None,
    seed: int = 0,
    *,
    unseen_fraction: float = 0.0,
    dropout: float = 0.0,
    distribution: str = "poisson",
    dispersion: float | None = None,
) -> Cohort:
    """Draw ``n_users`` users and their events in both periods.

    ``unseen_fraction`` is the expected share of experiment-period users
    absent from the definition period; ``dropout`` the expected share of
    definition-period users absent from the experiment period. Every user
    present in a period has at least one visit there.
    """
    specs = list(specs)
    validate_specs(specs)
    if n_users < 1:
        raise InvalidSpec("n_users must be at least 1")
    if not (0 <= unseen_fraction < 1 and 0 <= dropout < 1):
        raise InvalidSpec("unseen_fraction and dropout must be in [0, 1)")
    if distribution not in ("poisson", "negbin"):
        raise InvalidSpec(f"unknown distribution {distribution!r}")
    if distribution == "negbin" and not (dispersion and dispersion > 0):
        raise InvalidSpec("negative binomial needs a positive dispersion")
    periods = periods or default_periods()
    rng = np.random.default_rng(derive_seed(seed, 0))
    width = max(6, len(str(n_users)))
    user_ids = [f"u{i:0{width}d}" for i in range(n_users)]
    weights = np.array([s.weight for s in specs])
    arche = rng.choice(len(specs), size=n_users, p=weights / weights.sum())
    # P(exp only) chosen so that unseen / experiment users == unseen_fraction
    a = unseen_fraction * (1 - dropout) / (1 - unseen_fraction * dropout)
    u = rng.random(n_users)
    status = np.where(u < a, 3, np.where(u < a + (1 - a) * dropout, 2, 1)).astype(np.int8)
    vocab = tuple(user_ids)
    idx = np.arange(n_users)
    in_def = idx[status != 3]
    in_exp = idx[status != 2]
    d_rng = np.random.default_rng(derive_seed(seed, 1))
    e_rng = np.random.default_rng(derive_seed(seed, 2))
    d_draw = _draw_period(d_rng, in_def, arche[in_def], specs, periods.definition, vocab, distribution, dispersion)
    e_draw = _draw_period(e_rng, in_exp, arche[in_exp], specs, periods.experiment, vocab, distribution, dispersion)
    return Cohort(specs, user_ids, arche, status, periods, d_draw.table, e_draw.table,
                  distribution, dispersion, e_draw)


def assign_arms(cohort: Cohort, test_fraction: float = 0.5, seed: int = 0) -> np.ndarray:
    """Boolean test indicator per cohort user (every user is bucketed)."""
    if not 0 < test_fraction < 1:
        raise InvalidSpec("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(derive_seed(seed, 3))
    return rng.random(len(cohort.user_ids)) < test_fraction


def _metric_filter(metric, pages):
    if metric in _KIND_EVENT:
        return _KIND_EVENT[metric], None
    page, kind = _split_key(metric)
    return _KIND_EVENT[kind], (pages.index(page) if page in pages else -1)


def inject_effects(cohort: Cohort, injections=(), test_fraction: float = 0.5, seed: int = 0):
    """Randomize arms and scale targeted event rates for test users.

    Multipliers below one thin the targeted events (each kept with
    probability ``multiplier``, which keeps Poisson counts Poisson); APVs on a
    page lose their session's page view when all its CPVs are thinned away.
    Multipliers above one add Poisson extra events per session. Returns the
    experiment events with arms and the full assignment map.
    """
    names = [s.name for s in cohort.specs]
    injections = list(injections)
    for inj in injections:
        if inj.archetype not in names:
            raise UnknownArchetype(f"unknown archetype {inj.archetype!r}")
    is_test = assign_arms(cohort, test_fraction, seed)
    assignments = {u: ("test" if t else "control") for u, t in zip(cohort.user_ids, is_test.tolist())}
    draw = cohort._exp_draw
    ev = cohort.experiment
    rng = np.random.default_rng(derive_seed(seed, 4))
    user = ev.user_idx
    sess = draw.session_of_event
    page = ev.page_idx
    kind = ev.event
    t = ev.timestamp
    keys, pages, rate = _feature_layout(cohort.specs)
    n_pages = len(ev.pages)
    for inj in injections:
        a = names.index(inj.archetype)
        target_user = is_test[user] & (cohort.archetype[user] == a)
        code, page_filter = _metric_filter(inj.metric, list(ev.pages))
        hit = target_user & (kind == code)
        if page_filter is not None:
            hit &= page == page_filter
        if inj.multiplier < 1:
            keep = ~hit | (rng.random(len(kind)) < inj.multiplier)
            if code == _KIND_EVENT["cpv"]:
                key = sess * n_pages + page
                cpv_left = np.unique(key[keep & (kind == code)])
                apv = kind == _KIND_EVENT["apv"]
                keep &= ~(apv & ~np.isin(key, cpv_left))
            user, sess, page, kind, t = user[keep], sess[keep], page[keep], kind[keep], t[keep]
        elif inj.multiplier > 1:
            s_user = np.asarray(draw.session_user)
            s_sel = is_test[s_user] & (cohort.archetype[s_user] == a)
            sids = np.nonzero(s_sel)[0]
            kind_name = {v: k for k, v in _KIND_EVENT.items()}[code]
            for j, k in enumerate(keys):
                pg, kd = _split_key(k)
                if kd != kind_name or (page_filter is not None and ev.pages[page_filter] != pg):
                    continue
                extra = rng.poisson((inj.multiplier - 1) * rate[a, j], size=len(sids))
                new_s = np.repeat(sids, extra)
                if kd == "apv":
                    key = sess * n_pages + page
                    has_cpv = np.isin(new_s * n_pages + ev.pages.index(pg),
                                      key[kind == _KIND_EVENT["cpv"]])
                    new_s = new_s[has_cpv]
                user = np.concatenate([user, s_user[new_s]])
                sess = np.concatenate([sess, new_s])
                page = np.concatenate([page, np.full(len(new_s), ev.pages.index(pg))])
                kind = np.concatenate([kind, np.full(len(new_s), code, dtype=np.int8)])
                t = np.concatenate([t, draw.session_start[new_s] + rng.integers(1, 1200, size=len(new_s))])
    order = np.lexsort((kind != _SESSION_START, t, user))
    user, page, kind, t = user[order], page[order], kind[order], t[order]
    arm = np.where(is_test[user], _ARM["test"], _ARM["control"]).astype(np.int8)
    table = EventTable(ev.users, user, t, arm, ev.pages, page, kind)
    return table, assignments


@dataclass
class Scenario:
    archetypes: list
    n_users: int = 10_000
    seed: int = 0
    definition_weeks: float = 2.0
    experiment_weeks: float = 1.0
    start: float = DEFAULT_START
    unseen_fraction: float = 0.0
    dropout: float = 0.0
    distribution: str = "poisson"
    dispersion: float | None = None
    test_fraction: float = 0.5
    injections: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict) or "archetypes" not in d:
            raise InvalidSpec("scenario must be an object with an 'archetypes' list")
        specs = [ArchetypeSpec.from_dict(a) for a in d["archetypes"]]
        validate_specs(specs)
        known = {f.name for f in cls.__dataclass_fields__.values()}
        extra = set(d) - known
        if extra:
            raise InvalidSpec(f"unknown scenario keys: {sorted(extra)}")
        kw = {k: v for k, v in d.items() if k not in ("archetypes", "injections")}
        return cls(specs, injections=[EffectInjection.from_dict(i) for i in d.get("injections", [])], **kw)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise InvalidSpec(f"scenario is not valid JSON: {exc}") from exc

    def periods(self) -> PeriodPair:
        return default_periods(self.definition_weeks, self.experiment_weeks, self.start)

    def generate(self, seed: int | None = None):
        """Cohort plus armed experiment events and assignments."""
        seed = self.seed if seed is None else seed
        cohort = generate_cohort(
            self.archetypes, self.n_users, self.periods(), seed,
            unseen_fraction=self.unseen_fraction, dropout=self.dropout,
            distribution=self.distribution, dispersion=self.dispersion,
        )
        experiment, assignments = inject_effects(cohort, self.injections, self.test_fraction, seed)
        return cohort, experiment, assignments


def example_scenario_path() -> Path:
    return Path(str(resources.files("behaviorseg") / "data" / "example_scenario.json"))


def load_example_scenario(**overrides) -> Scenario:
    with open(example_scenario_path()) as fh:
        d = json.load(fh)
    d.update(overrides)
    return Scenario.from_dict(d)
