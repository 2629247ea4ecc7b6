"""Run configuration shared by every subcommand.

A config file is a JSON object whose keys are :class:`RunConfig` field names.
Command-line flags override file values; unset fields keep the defaults below.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError
from .experiment import DEFAULT_ALPHA, DEFAULT_MIN_CELL_USERS, DEFAULT_SUPPRESSION
from .features import DEFAULT_OUTLIER_QUANTILE, DEFAULT_VARIANCE_THRESHOLD
from .ingest import DEFAULT_SESSION_GAP, PeriodSpec
from .cluster import DEFAULT_MAX_ITER, DEFAULT_RESTARTS, DEFAULT_TOL, DEFAULT_Z_THRESHOLD

DEFAULT_K_RANGE = (2, 10)


def parse_k_range(text) -> tuple[int, int]:
    """``"a..b"`` (inclusive) or a two-element list."""
    try:
        if isinstance(text, str):
            a, b = text.split("..")
        else:
            a, b = text
        lo, hi = int(a), int(b)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad K range {text!r}; expected A..B") from exc
    if lo < 1 or hi < lo:
        raise ConfigError(f"K range {lo}..{hi} must satisfy 1 <= A <= B")
    return lo, hi


def _period(value):
    if value is None or isinstance(value, PeriodSpec):
        return value
    if isinstance(value, str):
        return PeriodSpec.parse(value)
    if isinstance(value, dict):
        try:
            return PeriodSpec.from_dict(value)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad period {value!r}") from exc
    raise ConfigError(f"bad period {value!r}")


@dataclass(frozen=True)
class RunConfig:
    definition_period: PeriodSpec | None = None
    experiment_period: PeriodSpec | None = None
    features: tuple | None = None
    outlier_quantile: float = DEFAULT_OUTLIER_QUANTILE
    variance_threshold: float = DEFAULT_VARIANCE_THRESHOLD
    drop_constant: bool = False
    k_range: tuple = DEFAULT_K_RANGE
    k: int | None = None
    seed: int = 0
    restarts: int = DEFAULT_RESTARTS
    max_iter: int = DEFAULT_MAX_ITER
    tol: float = DEFAULT_TOL
    z_threshold: float = DEFAULT_Z_THRESHOLD
    segment_names: dict = field(default_factory=dict)
    session_gap: float = DEFAULT_SESSION_GAP
    tz_offset: float = 0.0
    suppression_threshold: float = DEFAULT_SUPPRESSION
    alpha: float = DEFAULT_ALPHA
    bonferroni: bool = False
    min_cell_users: int = DEFAULT_MIN_CELL_USERS
    max_error_rate: float = 0.01
    model_path: str = "model.json"
    curve_path: str | None = "k_curve.csv"
    report_dir: str = "reports"

    def __post_init__(self):
        def check(ok, msg):
            if not ok:
                raise ConfigError(msg)

        object.__setattr__(self, "definition_period", _period(self.definition_period))
        object.__setattr__(self, "experiment_period", _period(self.experiment_period))
        object.__setattr__(self, "k_range", parse_k_range(self.k_range))
        if self.features is not None:
            check(all(isinstance(f, str) for f in self.features), "features must be a list of names")
            check(len(set(self.features)) == len(self.features), "features must be unique")
            object.__setattr__(self, "features", tuple(self.features))
        check(isinstance(self.segment_names, dict), "segment_names must map segment id to name")
        try:
            names = {int(k): str(v) for k, v in self.segment_names.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError("segment_names keys must be integer segment ids") from exc
        object.__setattr__(self, "segment_names", names)
        for name in ("outlier_quantile", "variance_threshold", "tol", "z_threshold", "session_gap",
                     "tz_offset", "suppression_threshold", "alpha", "max_error_rate"):
            v = getattr(self, name)
            check(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v),
                  f"{name} must be a finite number")
        check(0 < self.outlier_quantile < 1, "outlier_quantile must be in (0, 1)")
        check(0 < self.variance_threshold <= 1, "variance_threshold must be in (0, 1]")
        check(self.k is None or (isinstance(self.k, int) and self.k >= 1), "k must be a positive integer")
        for name in ("seed", "restarts", "max_iter", "min_cell_users"):
            check(isinstance(getattr(self, name), int) and not isinstance(getattr(self, name), bool),
                  f"{name} must be an integer")
        check(self.seed >= 0, "seed must be non-negative")
        check(self.restarts >= 1, "restarts must be at least 1")
        check(self.max_iter >= 1, "max_iter must be at least 1")
        check(self.tol >= 0, "tol must be non-negative")
        check(self.session_gap > 0, "session_gap must be positive")
        check(0 <= self.suppression_threshold < 1, "suppression_threshold must be in [0, 1)")
        check(0 < self.alpha < 1, "alpha must be in (0, 1)")
        check(self.min_cell_users >= 0, "min_cell_users must be non-negative")
        check(0 <= self.max_error_rate <= 1, "max_error_rate must be in [0, 1]")
        if self.definition_period and self.experiment_period:
            check(self.definition_period.end <= self.experiment_period.start,
                  "segment-definition period must end at or before the experiment starts")

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def override(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("definition_period", "experiment_period"):
            p = getattr(self, key)
            d[key] = None if p is None else p.to_dict()
        d["k_range"] = list(self.k_range)
        d["features"] = None if self.features is None else list(self.features)
        d["segment_names"] = {str(k): v for k, v in sorted(self.segment_names.items())}
        return d
