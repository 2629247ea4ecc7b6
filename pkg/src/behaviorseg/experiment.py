"""Segment-level analysis of an A/B test.

Users are joined to their pre-experiment segment (or UNSEEN), zero-filled
when they were bucketed but inactive, and then every analysis works on the
same joined :class:`SegmentedUsers` table:

* :func:`preliminary_importance` - each segment's share of user count and engagement
* :func:`treatment_effect` / :func:`segment_effect_table` - per-user mean
  differences with Welch p-values
* :func:`contribution_decomposition` - each segment's share of the overall difference
* :func:`pagetype_drilldown` - effects split by page type
"""
from __future__ import annotations

import logging
import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ArmConflict, NoOverallEffect, OneArmOnly, ZeroGrandTotal
from .ingest import BASE_METRICS, ExperimentMetricsTable
from .stats import welch_test

log = logging.getLogger(__name__)

UNSEEN = -1
UNSEEN_NAME = "Unseen"
TOTAL = "TOTAL"
STATUS_BOTH, STATUS_DEFINITION_ONLY, STATUS_EXPERIMENT_ONLY = 1, 2, 3
DEFAULT_METRICS = ("days_visited", "sessions", "cpv", "apv")
IMPORTANCE_METRICS = ("user_count", "days_visited", "sessions", "cpv")
DEFAULT_SUPPRESSION = 0.01
DEFAULT_ALPHA = 0.05
DEFAULT_MIN_CELL_USERS = 100


@dataclass(frozen=True)
class SegmentedUsers:
    """Experiment population joined with segment labels, rows sorted by user id.

    ``metrics`` holds every base metric; ``page_cpv``/``page_apv`` the page
    breakdown. Definition-only users carry zeros everywhere.
    """

    user_ids: np.ndarray
    segment: np.ndarray
    status: np.ndarray
    arm: np.ndarray
    metrics: dict
    page_cpv: dict
    page_apv: dict
    names: dict
    excluded_definition_only: int = 0

    def __len__(self):
        return len(self.user_ids)

    @property
    def status_counts(self) -> dict[int, int]:
        return {s: int(np.sum(self.status == s)) for s in (1, 2, 3)}

    def metric(self, name: str) -> np.ndarray:
        if name == "user_count":
            return np.ones(len(self), dtype=np.int64)
        if name in self.metrics:
            return self.metrics[name]
        for suffix, table in (("_cpv", self.page_cpv), ("_apv", self.page_apv)):
            if name.endswith(suffix) and name[: -len(suffix)] in table:
                return table[name[: -len(suffix)]]
        raise KeyError(name)

    def segment_name(self, seg) -> str:
        if seg == UNSEEN:
            return UNSEEN_NAME
        return self.names.get(int(seg), f"Segment {int(seg)}")

    def ordered_segments(self) -> list[int]:
        """Labeled segments by name, then UNSEEN when present."""
        present = set(np.unique(self.segment).tolist())
        labeled = set(self.names) | (present - {UNSEEN})
        out = sorted(labeled, key=lambda s: (self.segment_name(s), s))
        if UNSEEN in present:
            out.append(UNSEEN)
        return out

    def with_arms(self, arm) -> "SegmentedUsers":
        """Same users and labels with a different arm vector."""
        return SegmentedUsers(
            self.user_ids, self.segment, self.status, np.asarray(arm, dtype=object),
            self.metrics, self.page_cpv, self.page_apv, self.names, self.excluded_definition_only,
        )


def assign_segments(
    definition_labels: Mapping[str, int],
    experiment: ExperimentMetricsTable,
    assignments: Mapping[str, str] | None = None,
    names: Mapping[int, str] | None = None,
) -> SegmentedUsers:
    """Join labels with experiment metrics using the three user statuses.

    1. labeled and active in the experiment: real segment, real metrics
    2. labeled but inactive: real segment, zero metrics; the arm must come from
       ``assignments``, otherwise these users are excluded with a warning
    3. active but unlabeled: segment UNSEEN, real metrics
    """
    exp_ids = [str(u) for u in experiment.user_ids]
    exp_set = set(exp_ids)
    exp_arm = experiment.arms
    if assignments:
        for uid, arm in zip(exp_ids, exp_arm):
            given = assignments.get(uid)
            if given is not None and given != arm:
                raise ArmConflict(uid)

    def_only = sorted(u for u in definition_labels if u not in exp_set)
    kept_def_only, excluded = [], 0
    for u in def_only:
        if assignments and u in assignments:
            kept_def_only.append(u)
        else:
            excluded += 1
    if excluded:
        msg = f"excluded {excluded} definition-only users (no arm in assignment log)"
        warnings.warn(msg, stacklevel=2)
        log.warning(msg)

    ids = np.asarray(exp_ids + kept_def_only, dtype=object)
    n_exp = len(exp_ids)
    seg = np.array(
        [int(definition_labels.get(u, UNSEEN)) for u in exp_ids]
        + [int(definition_labels[u]) for u in kept_def_only],
        dtype=np.int64,
    )
    status = np.empty(len(ids), dtype=np.int8)
    status[:n_exp] = np.where(seg[:n_exp] == UNSEEN, STATUS_EXPERIMENT_ONLY, STATUS_BOTH)
    status[n_exp:] = STATUS_DEFINITION_ONLY
    arm = np.asarray(list(exp_arm) + [assignments[u] for u in kept_def_only], dtype=object)

    pad = len(kept_def_only)

    def fill(col):
        return np.concatenate([np.asarray(col, dtype=np.int64), np.zeros(pad, dtype=np.int64)])

    order = np.argsort(ids.astype(str), kind="stable")
    metrics = {m: fill(getattr(experiment, m))[order] for m in BASE_METRICS}
    page_cpv = {p: fill(v)[order] for p, v in experiment.page_cpv.items()}
    page_apv = {p: fill(v)[order] for p, v in experiment.page_apv.items()}
    out = SegmentedUsers(
        ids[order], seg[order], status[order], arm[order],
        metrics, page_cpv, page_apv,
        dict(names or {}), excluded,
    )
    log.info("user statuses: %s", out.status_counts)
    return out


@dataclass(frozen=True)
class ImportanceRow:
    segment: int
    name: str
    shares: dict
    totals: dict


def preliminary_importance(
    segments,
    metrics: Mapping[str, np.ndarray],
    names: Mapping[int, str] | None = None,
    order: Sequence[int] | None = None,
) -> list[ImportanceRow]:
    """Each segment's share of every metric total over one period.

    ``metrics`` maps a metric name to a per-user column aligned with
    ``segments``; ``user_count`` is added automatically when missing.
    """
    segments = np.asarray(segments)
    names = dict(names or {})
    cols = dict(metrics)
    cols.setdefault("user_count", np.ones(len(segments), dtype=np.int64))
    cols = {"user_count": cols.pop("user_count"), **cols}
    if order is None:
        present = np.unique(segments).tolist()
        labeled = sorted((s for s in present if s != UNSEEN), key=lambda s: (names.get(s, f"Segment {s}"), s))
        order = labeled + ([UNSEEN] if UNSEEN in present else [])
    grand = {}
    for m, v in cols.items():
        total = float(np.sum(v))
        if total == 0:
            raise ZeroGrandTotal(f"metric {m!r} totals zero")
        grand[m] = total
    rows = []
    for s in order:
        mask = segments == s
        totals = {m: float(np.sum(v[mask])) for m, v in cols.items()}
        name = UNSEEN_NAME if s == UNSEEN else names.get(s, f"Segment {s}")
        rows.append(ImportanceRow(int(s), name, {m: totals[m] / grand[m] for m in cols}, totals))
    return rows


def importance_from_users(users: SegmentedUsers, metrics=IMPORTANCE_METRICS) -> list[ImportanceRow]:
    cols = {m: users.metric(m) for m in metrics}
    return preliminary_importance(users.segment, cols, users.names, users.ordered_segments())


@dataclass(frozen=True)
class MetricEffect:
    control_mean: float
    test_mean: float
    abs_diff: float
    rel_diff: float | None
    p_value: float | None
    degenerate: bool = False
    p_adjusted: float | None = None
    significant: bool = False
    flagged_decline: bool = False


@dataclass(frozen=True)
class EffectRow:
    segment: object  # segment id, UNSEEN, or TOTAL
    name: str
    users: int
    user_share: float
    n_control: int
    n_test: int
    suppressed: bool = False
    effects: dict = field(default_factory=dict)
    note: str = ""


def _metric_effect(values, is_test, alpha) -> MetricEffect:
    c = values[~is_test]
    t = values[is_test]
    cm, tm = float(c.mean()), float(t.mean())
    diff = tm - cm
    rel = diff / cm if cm != 0 else None
    res = welch_test(c, t)
    p = None if math.isnan(res.p_value) else res.p_value
    return MetricEffect(cm, tm, diff, rel, p, res.degenerate, p, p is not None and p < alpha)


def treatment_effect(
    users: SegmentedUsers,
    mask=None,
    metrics: Sequence[str] = DEFAULT_METRICS,
    alpha: float = DEFAULT_ALPHA,
    segment=TOTAL,
    name: str = "Total",
) -> EffectRow:
    """Test-minus-control per-user means over every user selected by ``mask``."""
    mask = np.ones(len(users), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    arm = users.arm[mask]
    is_test = arm == "test"
    n_test = int(is_test.sum())
    n_control = int(len(arm) - n_test)
    if n_test == 0 or n_control == 0:
        raise OneArmOnly(f"{name}: needs users in both arms (control={n_control}, test={n_test})")
    effects = {m: _metric_effect(np.asarray(users.metric(m), dtype=np.float64)[mask], is_test, alpha) for m in metrics}
    n = int(mask.sum())
    return EffectRow(segment, name, n, n / len(users), n_control, n_test, False, effects)


def _with_flags(row: EffectRow, total: EffectRow, alpha, m_tests) -> EffectRow:
    effects = {}
    for metric, e in row.effects.items():
        p_adj = None if e.p_value is None else min(1.0, e.p_value * m_tests)
        te = total.effects[metric]
        flagged = (
            e.rel_diff is not None and te.rel_diff is not None
            and e.rel_diff < 0 and e.rel_diff < te.rel_diff
        )
        effects[metric] = MetricEffect(
            e.control_mean, e.test_mean, e.abs_diff, e.rel_diff, e.p_value, e.degenerate,
            p_adj, p_adj is not None and p_adj < alpha, flagged,
        )
    return EffectRow(row.segment, row.name, row.users, row.user_share, row.n_control, row.n_test,
                     row.suppressed, effects, row.note)


def segment_effect_table(
    users: SegmentedUsers,
    suppression_threshold: float = DEFAULT_SUPPRESSION,
    alpha: float = DEFAULT_ALPHA,
    metrics: Sequence[str] = DEFAULT_METRICS,
    bonferroni: bool = False,
) -> list[EffectRow]:
    """One row per segment (by name), then UNSEEN, then TOTAL.

    Segments holding less than ``suppression_threshold`` of users are
    suppressed and carry no numbers. With ``bonferroni`` p-values of the
    segment rows are multiplied by the number of reported segments.
    """
    total = treatment_effect(users, None, metrics, alpha)
    rows = []
    for s in users.ordered_segments():
        mask = users.segment == s
        n = int(mask.sum())
        share = n / len(users)
        name = users.segment_name(s)
        arm = users.arm[mask]
        n_test = int(np.sum(arm == "test"))
        if share < suppression_threshold:
            rows.append(EffectRow(s, name, n, share, n - n_test, n_test, True, {}, "below suppression threshold"))
            continue
        if n_test == 0 or n_test == n:
            rows.append(EffectRow(s, name, n, share, n - n_test, n_test, True, {}, "one arm only"))
            continue
        rows.append(treatment_effect(users, mask, metrics, alpha, s, name))
    m_tests = sum(1 for r in rows if not r.suppressed) if bonferroni else 1
    rows = [r if r.suppressed else _with_flags(r, total, alpha, max(m_tests, 1)) for r in rows]
    rows.append(total)
    return rows


@dataclass(frozen=True)
class ContributionRow:
    segment: int
    name: str
    users: int
    within_diff: float
    share: float
    note: str = ""


def contribution_decomposition(users: SegmentedUsers, metric: str = "cpv") -> list[ContributionRow]:
    """Share of the overall difference explained by each segment.

    A segment's within-segment total difference is its per-user mean
    difference (test minus control) times its user count, which keeps
    unequal arm splits from distorting the shares. Shares are normalized by
    the sum over all segments (UNSEEN included) and add up to one.
    """
    values = np.asarray(users.metric(metric), dtype=np.float64)
    is_test = users.arm == "test"
    parts = []
    for s in users.ordered_segments():
        mask = users.segment == s
        n = int(mask.sum())
        t = values[mask & is_test]
        c = values[mask & ~is_test]
        if len(t) == 0 or len(c) == 0:
            parts.append((s, n, 0.0, "one arm only"))
            continue
        parts.append((s, n, (t.mean() - c.mean()) * n, ""))
    total = math.fsum(p[2] for p in parts)
    if total == 0:
        raise NoOverallEffect(f"no overall difference in {metric!r}")
    return [ContributionRow(int(s), users.segment_name(s), n, float(d), float(d / total), note) for s, n, d, note in parts]


@dataclass(frozen=True)
class DrilldownCell:
    segment: int
    name: str
    page_type: str
    metric: str
    users: int
    control_mean: float | None
    test_mean: float | None
    abs_diff: float | None
    rel_diff: float | None
    p_value: float | None
    suppressed: bool


def pagetype_drilldown(
    users: SegmentedUsers,
    segments: Sequence[int] | None = None,
    metric: str = "cpv",
    min_users: int = DEFAULT_MIN_CELL_USERS,
) -> list[DrilldownCell]:
    """Per (segment, page type) effect on ``metric`` (cpv or apv).

    Cells with no events of that kind in either arm are omitted; cells of
    segments with fewer than ``min_users`` users are suppressed.
    """
    if metric not in ("cpv", "apv"):
        raise ValueError("drilldown metric must be cpv or apv")
    table = users.page_cpv if metric == "cpv" else users.page_apv
    segments = users.ordered_segments() if segments is None else list(segments)
    is_test = users.arm == "test"
    cells = []
    for s in segments:
        mask = users.segment == s
        n = int(mask.sum())
        has_both = bool(np.any(mask & is_test)) and bool(np.any(mask & ~is_test))
        for page in sorted(table):
            col = np.asarray(table[page], dtype=np.float64)
            if not np.any(col[mask] != 0):
                continue
            name = users.segment_name(s)
            if n < min_users or not has_both:
                cells.append(DrilldownCell(int(s), name, page, metric, n, None, None, None, None, None, True))
                continue
            e = _metric_effect(col[mask], is_test[mask], DEFAULT_ALPHA)
            cells.append(DrilldownCell(int(s), name, page, metric, n, e.control_mean, e.test_mean,
                                       e.abs_diff, e.rel_diff, e.p_value, False))
    return cells
