"""Event-log parsing and per-user aggregation.

Events are held column-wise in :class:`EventTable` (integer codes plus small
vocabularies) so that cohorts of tens of thousands of users with millions of
events aggregate with numpy group-bys rather than Python loops. The table is
still a ``Sequence`` of :class:`EventRecord` for callers that want records.

Two aggregations exist and they never mix periods:

* :func:`aggregate_raw_features` builds the segmentation features from the
  segment-definition (pre-experiment) window.
* :func:`aggregate_experiment_metrics` builds the per-user experiment metrics
  from the experiment window, where every record must carry an arm.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ArmConflict,
    ConfigError,
    EmptyPeriod,
    MalformedLine,
    MissingArm,
    TooManyMalformed,
    UnknownEvent,
)

log = logging.getLogger(__name__)

ARMS = ("none", "control", "test")
EVENTS = ("cpv", "apv", "click", "session_start")
ENGAGEMENT_EVENTS = ("cpv", "apv", "click")
COUNTER_SUFFIX = {"cpv": "cpv", "apv": "apv", "click": "clicks"}
FIELDS = ("user_id", "timestamp", "arm", "page_type", "event")

SECONDS_PER_DAY = 86400
SECONDS_PER_WEEK = 604800
DEFAULT_SESSION_GAP = 1800.0

_ARM_CODE = {a: i for i, a in enumerate(ARMS)}
_EVENT_CODE = {e: i for i, e in enumerate(EVENTS)}
SESSION_START = _EVENT_CODE["session_start"]


@dataclass(frozen=True, slots=True)
class EventRecord:
    user_id: str
    timestamp: float
    arm: str
    page_type: str
    event: str

    def __post_init__(self):
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise ValueError(f"timestamp must be finite and non-negative, got {self.timestamp}")
        if self.arm not in _ARM_CODE:
            raise ValueError(f"unknown arm {self.arm!r}")
        if self.event not in _EVENT_CODE:
            raise ValueError(f"unknown event {self.event!r}")


@dataclass(frozen=True, slots=True)
class PeriodSpec:
    """Half-open time window ``[start, end)`` in UTC seconds."""

    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ConfigError("period bounds must be finite")
        if not self.start < self.end:
            raise ConfigError(f"period start {self.start} must precede end {self.end}")

    @property
    def weeks(self) -> float:
        return (self.end - self.start) / SECONDS_PER_WEEK

    def contains(self, timestamps):
        ts = np.asarray(timestamps)
        return (ts >= self.start) & (ts < self.end)

    def to_dict(self):
        return {"start": self.start, "end": self.end}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["start"]), float(d["end"]))

    @classmethod
    def parse(cls, text: str) -> "PeriodSpec":
        """Parse ``"start..end"`` (UTC seconds)."""
        try:
            a, b = text.split("..")
            return cls(float(a), float(b))
        except ValueError as exc:
            raise ConfigError(f"bad period {text!r}; expected START..END") from exc

    @classmethod
    def covering(cls, events: "EventTable") -> "PeriodSpec":
        """Smallest whole-UTC-day window containing every event."""
        if len(events) == 0:
            raise EmptyPeriod()
        lo = math.floor(events.timestamp.min() / SECONDS_PER_DAY) * SECONDS_PER_DAY
        hi = (math.floor(events.timestamp.max() / SECONDS_PER_DAY) + 1) * SECONDS_PER_DAY
        return cls(float(lo), float(hi))


@dataclass(frozen=True, slots=True)
class PeriodPair:
    definition: PeriodSpec
    experiment: PeriodSpec

    def __post_init__(self):
        if self.definition.end > self.experiment.start:
            raise ConfigError(
                "segment-definition period must end at or before the experiment starts"
            )


def _factorize(values) -> tuple[tuple[str, ...], np.ndarray]:
    vocab: dict[str, int] = {}
    codes = np.fromiter((vocab.setdefault(v, len(vocab)) for v in values), dtype=np.int64)
    return tuple(vocab), codes


class EventTable(Sequence):
    """Column store of events.

    ``user_idx`` and ``page_idx`` index into the ``users`` and ``pages``
    vocabularies; ``arm`` and ``event`` are codes into :data:`ARMS` and
    :data:`EVENTS`. Row order is preserved from construction.
    """

    __slots__ = ("users", "pages", "user_idx", "timestamp", "arm", "page_idx", "event")

    def __init__(self, users, user_idx, timestamp, arm, pages, page_idx, event):
        self.users = tuple(users)
        self.pages = tuple(pages)
        self.user_idx = np.asarray(user_idx, dtype=np.int32)
        self.timestamp = np.asarray(timestamp, dtype=np.float64)
        self.arm = np.asarray(arm, dtype=np.int8)
        self.page_idx = np.asarray(page_idx, dtype=np.int32)
        self.event = np.asarray(event, dtype=np.int8)
        n = len(self.timestamp)
        for col in (self.user_idx, self.arm, self.page_idx, self.event):
            if len(col) != n:
                raise ValueError("event columns must have equal length")
        if n and (not np.all(np.isfinite(self.timestamp)) or self.timestamp.min() < 0):
            raise ValueError("timestamps must be finite and non-negative")

    @classmethod
    def empty(cls):
        z = np.zeros(0)
        return cls((), z, z, z, (), z, z)

    @classmethod
    def from_records(cls, records: Iterable[EventRecord]) -> "EventTable":
        records = list(records)
        users, uidx = _factorize(r.user_id for r in records)
        pages, pidx = _factorize(r.page_type for r in records)
        return cls(
            users,
            uidx,
            np.fromiter((r.timestamp for r in records), dtype=np.float64, count=len(records)),
            np.fromiter((_ARM_CODE[r.arm] for r in records), dtype=np.int8, count=len(records)),
            pages,
            pidx,
            np.fromiter((_EVENT_CODE[r.event] for r in records), dtype=np.int8, count=len(records)),
        )

    def __len__(self):
        return len(self.timestamp)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.take(np.arange(len(self))[i])
        return EventRecord(
            self.users[self.user_idx[i]],
            float(self.timestamp[i]),
            ARMS[self.arm[i]],
            self.pages[self.page_idx[i]],
            EVENTS[self.event[i]],
        )

    def __iter__(self) -> Iterator[EventRecord]:
        for i in range(len(self)):
            yield self[i]

    def take(self, index) -> "EventTable":
        """Rows selected by a boolean mask or integer index (vocabularies kept)."""
        return EventTable(
            self.users,
            self.user_idx[index],
            self.timestamp[index],
            self.arm[index],
            self.pages,
            self.page_idx[index],
            self.event[index],
        )

    def window(self, period: PeriodSpec) -> "EventTable":
        return self.take(period.contains(self.timestamp))

    def user_ids(self) -> np.ndarray:
        return np.asarray(self.users, dtype=object)[self.user_idx]

    def page_types(self) -> np.ndarray:
        return np.asarray(self.pages, dtype=object)[self.page_idx]

    @staticmethod
    def concat(tables: Sequence["EventTable"]) -> "EventTable":
        """Concatenate tables, merging vocabularies."""
        tables = [t for t in tables if len(t)]
        if not tables:
            return EventTable.empty()
        users: dict[str, int] = {}
        pages: dict[str, int] = {}
        uparts, pparts = [], []
        for t in tables:
            umap = np.array([users.setdefault(u, len(users)) for u in t.users], dtype=np.int64)
            pmap = np.array([pages.setdefault(p, len(pages)) for p in t.pages], dtype=np.int64)
            uparts.append(umap[t.user_idx] if len(umap) else t.user_idx)
            pparts.append(pmap[t.page_idx] if len(pmap) else t.page_idx)
        return EventTable(
            tuple(users),
            np.concatenate(uparts),
            np.concatenate([t.timestamp for t in tables]),
            np.concatenate([t.arm for t in tables]),
            tuple(pages),
            np.concatenate(pparts),
            np.concatenate([t.event for t in tables]),
        )

    def to_csv(self, path_or_buf):
        """Write CSV with header; integral timestamps are written as integers."""
        own = isinstance(path_or_buf, (str, Path))
        fh = open(path_or_buf, "w", newline="") if own else path_or_buf
        try:
            fh.write(",".join(FIELDS) + "\n")
            integral = bool(np.all(self.timestamp == np.floor(self.timestamp)))
            uids = self.users
            pages = self.pages
            lines = []
            for u, t, a, p, e in zip(
                self.user_idx.tolist(),
                self.timestamp.astype(np.int64).tolist() if integral else self.timestamp.tolist(),
                self.arm.tolist(),
                self.page_idx.tolist(),
                self.event.tolist(),
            ):
                lines.append(f"{uids[u]},{t!r},{ARMS[a]},{pages[p]},{EVENTS[e]}\n")
                if len(lines) >= 65536:
                    fh.writelines(lines)
                    lines.clear()
            fh.writelines(lines)
        finally:
            if own:
                fh.close()


@dataclass(frozen=True, slots=True)
class LineError:
    line_no: int
    reason: str
    unknown_event: bool = False


def _parse_fields(fields, line_no):
    if len(fields) != 5:
        raise MalformedLine(line_no, f"expected 5 fields, got {len(fields)}")
    user_id, ts, arm, page_type, event = (str(f).strip() if f is not None else "" for f in fields)
    if not user_id:
        raise MalformedLine(line_no, "empty user_id")
    try:
        t = float(ts)
    except ValueError:
        raise MalformedLine(line_no, f"bad timestamp {ts!r}") from None
    if not math.isfinite(t) or t < 0:
        raise MalformedLine(line_no, f"timestamp out of range {ts!r}")
    arm = arm.lower()
    if arm not in _ARM_CODE:
        raise MalformedLine(line_no, f"bad arm {arm!r}")
    event = event.lower()
    if event not in _EVENT_CODE:
        raise UnknownEvent(line_no, f"unknown event {event!r}")
    return user_id, t, _ARM_CODE[arm], page_type, _EVENT_CODE[event]


def parse_events(
    lines: Iterable[str],
    fmt: str = "csv",
    *,
    max_error_rate: float = 0.01,
    errors: list | None = None,
) -> EventTable:
    """Parse CSV (header required) or JSONL event lines.

    Bad lines are skipped and appended to ``errors`` (when given) as
    :class:`LineError`. Parsing fails with :class:`TooManyMalformed` only when
    the fraction of bad data lines exceeds ``max_error_rate``. Line numbers are
    1-based and count the CSV header.
    """
    if fmt not in ("csv", "jsonl"):
        raise ConfigError(f"unknown event format {fmt!r}")
    bad: list[LineError] = []
    rows = []
    total = 0

    if fmt == "csv":
        reader = csv.reader(lines)
        header = None
        for row in reader:
            if header is None:
                if not row:
                    continue
                header = [h.strip().lower() for h in row]
                if tuple(header) != FIELDS:
                    raise ConfigError(f"CSV header must be {','.join(FIELDS)}; got {','.join(header)}")
                continue
            if not row:
                continue
            total += 1
            try:
                rows.append(_parse_fields(row, reader.line_num))
            except MalformedLine as exc:
                bad.append(LineError(exc.line_no, exc.reason, isinstance(exc, UnknownEvent)))
    else:
        for line_no, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            total += 1
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise MalformedLine(line_no, "not a JSON object")
                missing = [f for f in FIELDS if f not in obj]
                if missing:
                    raise MalformedLine(line_no, f"missing fields {missing}")
                rows.append(_parse_fields([obj[f] for f in FIELDS], line_no))
            except json.JSONDecodeError as exc:
                bad.append(LineError(line_no, f"invalid JSON: {exc.msg}"))
            except MalformedLine as exc:
                bad.append(LineError(exc.line_no, exc.reason, isinstance(exc, UnknownEvent)))

    if errors is not None:
        errors.extend(bad)
    if bad:
        log.warning("skipped %d malformed line(s) of %d", len(bad), total)
        if len(bad) / total > max_error_rate:
            raise TooManyMalformed(len(bad), total, max_error_rate, bad)

    users: dict[str, int] = {}
    pages: dict[str, int] = {}
    n = len(rows)
    uidx = np.empty(n, dtype=np.int64)
    ts = np.empty(n, dtype=np.float64)
    arm = np.empty(n, dtype=np.int8)
    pidx = np.empty(n, dtype=np.int64)
    ev = np.empty(n, dtype=np.int8)
    for i, (u, t, a, p, e) in enumerate(rows):
        uidx[i] = users.setdefault(u, len(users))
        ts[i] = t
        arm[i] = a
        pidx[i] = pages.setdefault(p, len(pages))
        ev[i] = e
    return EventTable(tuple(users), uidx, ts, arm, tuple(pages), pidx, ev)


def read_events(path, fmt: str | None = None, **kwargs) -> EventTable:
    path = Path(path)
    if fmt is None:
        fmt = "jsonl" if path.suffix.lower() in (".jsonl", ".json") else "csv"
    with open(path, newline="") as fh:
        return parse_events(fh, fmt, **kwargs)


def read_events_text(text: str, fmt: str = "csv", **kwargs) -> EventTable:
    return parse_events(io.StringIO(text), fmt, **kwargs)


# ---------------------------------------------------------------------------
# aggregation


def _group_users(events: EventTable):
    """Sorted distinct user ids in ``events`` and each row's position among them."""
    present = np.unique(events.user_idx)
    ids = np.asarray(events.users, dtype=object)[present]
    order = np.argsort(ids.astype(str), kind="stable")
    ids = ids[order]
    remap = np.full(len(events.users), -1, dtype=np.int64)
    remap[present[order]] = np.arange(len(present))
    return ids, remap[events.user_idx]


def _count_days(row_user, timestamp, n_users, tz_offset):
    day = np.floor((timestamp + tz_offset) / SECONDS_PER_DAY).astype(np.int64)
    day -= day.min()
    span = int(day.max()) + 1
    keys = np.unique(row_user * span + day)
    return np.bincount(keys // span, minlength=n_users).astype(np.int64)


def _gap_sessions(row_user, timestamp, n_users, gap):
    """Sessions by inactivity gap: a new session starts after more than ``gap`` seconds idle."""
    order = np.lexsort((timestamp, row_user))
    u = row_user[order]
    t = timestamp[order]
    new = np.ones(len(u), dtype=bool)
    if len(u) > 1:
        new[1:] = (u[1:] != u[:-1]) | (np.diff(t) > gap)
    return np.bincount(u[new], minlength=n_users).astype(np.int64)


def _count_sessions(events, row_user, n_users, gap):
    is_start = events.event == SESSION_START
    sessions = np.bincount(row_user[is_start], minlength=n_users).astype(np.int64)
    missing = sessions == 0
    if missing.any():
        sel = missing[row_user]
        fallback = _gap_sessions(row_user[sel], events.timestamp[sel], n_users, gap)
        sessions[missing] = fallback[missing]
    return sessions


def _counter_columns(events, row_user, n_users, kinds=ENGAGEMENT_EVENTS):
    out = {}
    for kind in kinds:
        code = _EVENT_CODE[kind]
        sel = events.event == code
        if not sel.any():
            continue
        pages_here = np.unique(events.page_idx[sel])
        for p in pages_here:
            m = sel & (events.page_idx == p)
            out[(events.pages[p], kind)] = np.bincount(row_user[m], minlength=n_users).astype(np.int64)
    return out


def counter_name(page_type: str, event: str) -> str:
    return f"{page_type}_{COUNTER_SUFFIX[event]}"


@dataclass(frozen=True, slots=True)
class RawUserFeatures:
    user_id: str
    days_visited: int
    sessions: int
    counters: dict


@dataclass(frozen=True)
class RawFeatureTable:
    """Step-1 features, one row per user present in the definition window.

    Rows are sorted by user id; ``counters`` maps ``"<page>_<cpv|apv|clicks>"``
    to a count column, keys sorted.
    """

    user_ids: np.ndarray
    days_visited: np.ndarray
    sessions: np.ndarray
    counters: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.user_ids)

    def __iter__(self) -> Iterator[RawUserFeatures]:
        for i, uid in enumerate(self.user_ids):
            yield RawUserFeatures(
                str(uid),
                int(self.days_visited[i]),
                int(self.sessions[i]),
                {k: int(v[i]) for k, v in self.counters.items()},
            )

    def counter(self, name: str) -> np.ndarray:
        if name in self.counters:
            return self.counters[name]
        return np.zeros(len(self), dtype=np.int64)

    def to_matrix(self, features: Sequence[str] | None = None):
        """Stage-1 :class:`~behaviorseg.features.FeatureMatrix`.

        Columns are ``days_visited``, ``sessions`` then the engagement
        counters in ``features`` order (default: every observed counter).
        Requested counters missing from the data become zero columns.
        """
        from .features import FeatureMatrix, Stage

        names = list(self.counters) if features is None else list(features)
        cols = [self.days_visited, self.sessions] + [self.counter(c) for c in names]
        values = np.column_stack(cols).astype(np.float64) if len(self) else np.zeros((0, len(cols)))
        return FeatureMatrix(
            np.asarray(self.user_ids, dtype=object),
            ("days_visited", "sessions", *names),
            values,
            Stage.RAW,
        )


def aggregate_raw_features(
    events: EventTable,
    period: PeriodSpec,
    *,
    session_gap: float = DEFAULT_SESSION_GAP,
    tz_offset: float = 0.0,
) -> RawFeatureTable:
    """Per-user Step-1 features from the events inside ``period``.

    Sessions are counted from ``session_start`` events; users without any are
    sessionized by inactivity gap. Arm labels are ignored here (with a
    warning if any record carries one), since segmentation must not depend
    on treatment.
    """
    ev = events.window(period)
    if len(ev) == 0:
        raise EmptyPeriod()
    if np.any(ev.arm != _ARM_CODE["none"]):
        warnings.warn(
            "segment-definition events carry arm labels; arms are ignored for segmentation",
            stacklevel=2,
        )
    ids, row_user = _group_users(ev)
    n = len(ids)
    days = _count_days(row_user, ev.timestamp, n, tz_offset)
    sessions = _count_sessions(ev, row_user, n, session_gap)
    raw = _counter_columns(ev, row_user, n)
    counters = {counter_name(p, k): v for (p, k), v in raw.items()}
    counters = {k: counters[k] for k in sorted(counters)}
    return RawFeatureTable(ids, days, sessions, counters)


@dataclass(frozen=True, slots=True)
class ExperimentMetrics:
    user_id: str
    arm: str
    days_visited: int
    sessions: int
    cpv: int
    apv: int
    clicks: int
    page_cpv: dict
    page_apv: dict


BASE_METRICS = ("days_visited", "sessions", "cpv", "apv", "clicks")


@dataclass(frozen=True)
class ExperimentMetricsTable:
    """Per-user experiment-period metrics, rows sorted by user id.

    ``page_cpv``/``page_apv`` map page type to a count column.
    """

    user_ids: np.ndarray
    arms: np.ndarray
    days_visited: np.ndarray
    sessions: np.ndarray
    cpv: np.ndarray
    apv: np.ndarray
    clicks: np.ndarray
    page_cpv: dict = field(default_factory=dict)
    page_apv: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.user_ids)

    def __iter__(self) -> Iterator[ExperimentMetrics]:
        for i, uid in enumerate(self.user_ids):
            yield ExperimentMetrics(
                str(uid),
                str(self.arms[i]),
                int(self.days_visited[i]),
                int(self.sessions[i]),
                int(self.cpv[i]),
                int(self.apv[i]),
                int(self.clicks[i]),
                {p: int(v[i]) for p, v in self.page_cpv.items()},
                {p: int(v[i]) for p, v in self.page_apv.items()},
            )

    def metric(self, name: str) -> np.ndarray:
        """A metric column by name: a base metric, or ``<page>_cpv`` / ``<page>_apv``."""
        if name in BASE_METRICS:
            return getattr(self, name)
        for suffix, table in (("_cpv", self.page_cpv), ("_apv", self.page_apv)):
            if name.endswith(suffix) and name[: -len(suffix)] in table:
                return table[name[: -len(suffix)]]
        raise KeyError(name)

    @property
    def page_types(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.page_cpv) | set(self.page_apv)))


def aggregate_experiment_metrics(
    events: EventTable,
    period: PeriodSpec,
    *,
    session_gap: float = DEFAULT_SESSION_GAP,
    tz_offset: float = 0.0,
) -> ExperimentMetricsTable:
    ev = events.window(period)
    if len(ev) == 0:
        raise EmptyPeriod()
    no_arm = ev.arm == _ARM_CODE["none"]
    if no_arm.any():
        raise MissingArm(ev.users[ev.user_idx[np.argmax(no_arm)]])
    ids, row_user = _group_users(ev)
    n = len(ids)
    lo = np.full(n, 127, dtype=np.int8)
    hi = np.full(n, -1, dtype=np.int8)
    np.minimum.at(lo, row_user, ev.arm)
    np.maximum.at(hi, row_user, ev.arm)
    conflict = lo != hi
    if conflict.any():
        raise ArmConflict(str(ids[np.argmax(conflict)]))
    arms = np.asarray(ARMS, dtype=object)[lo]

    days = _count_days(row_user, ev.timestamp, n, tz_offset)
    sessions = _count_sessions(ev, row_user, n, session_gap)
    raw = _counter_columns(ev, row_user, n)
    zeros = np.zeros(n, dtype=np.int64)
    totals = {k: zeros.copy() for k in ENGAGEMENT_EVENTS}
    page_cpv, page_apv = {}, {}
    for (page, kind), col in raw.items():
        totals[kind] += col
        if kind == "cpv":
            page_cpv[page] = col
        elif kind == "apv":
            page_apv[page] = col
    pages = sorted(set(page_cpv) | set(page_apv))
    page_cpv = {p: page_cpv.get(p, zeros) for p in pages}
    page_apv = {p: page_apv.get(p, zeros) for p in pages}
    return ExperimentMetricsTable(
        ids, arms, days, sessions,
        totals["cpv"], totals["apv"], totals["click"],
        page_cpv, page_apv,
    )


def read_assignments(path) -> dict[str, str]:
    """Assignment log: CSV with ``user_id,arm`` header, arm control|test."""
    out: dict[str, str] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"user_id", "arm"} <= set(reader.fieldnames):
            raise ConfigError("assignment log must have user_id,arm columns")
        for row in reader:
            arm = row["arm"].strip().lower()
            if arm not in ("control", "test"):
                raise ConfigError(f"bad arm {arm!r} in assignment log line {reader.line_num}")
            uid = row["user_id"].strip()
            if out.setdefault(uid, arm) != arm:
                raise ArmConflict(uid)
    return out


def write_assignments(assignments: dict[str, str], path):
    with open(path, "w", newline="") as fh:
        fh.write("user_id,arm\n")
        for uid in sorted(assignments):
            fh.write(f"{uid},{assignments[uid]}\n")
