"""Feature engineering: raw counts to principal-component scores.

The pipeline runs in fixed stages, each a pure function of the previous
stage's :class:`FeatureMatrix`:

1. raw counts (days visited, sessions, engagement counters)
2. orthogonalized: days per week, sessions per visited day, engagement per session
3. cleaned: users above a per-column quantile removed
4. ``log1p``
5. z-scored with sample standard deviation
6. projected on the leading principal components

Statistics captured while fitting (weeks, outlier thresholds, column means and
standard deviations, PCA loadings) are frozen in :class:`EngineeringStats` and
:class:`PcaModel` so the same transform can be replayed on any user.
"""
from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (
    AllRemoved,
    ColumnMismatch,
    ConfigError,
    ConstantColumn,
    InsufficientData,
    MissingColumn,
    NegativeValue,
    StageError,
)

log = logging.getLogger(__name__)

DEFAULT_OUTLIER_QUANTILE = 0.999
DEFAULT_VARIANCE_THRESHOLD = 0.85
FREQUENCY_COLUMNS = ("vdays_per_week", "sessions_per_vday")


class Stage(enum.IntEnum):
    RAW = 1
    ORTHOGONAL = 2
    CLEANED = 3
    LOGGED = 4
    NORMALIZED = 5
    PCA = 6


@dataclass(frozen=True)
class FeatureMatrix:
    user_ids: np.ndarray
    columns: tuple
    values: np.ndarray
    stage: Stage

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("values must be 2-D")
        if values.shape != (len(self.user_ids), len(self.columns)):
            raise ValueError(
                f"shape {values.shape} does not match {len(self.user_ids)} users x {len(self.columns)} columns"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("feature matrix contains NaN or infinite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "user_ids", np.asarray(self.user_ids, dtype=object))
        object.__setattr__(self, "stage", Stage(self.stage))

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def p(self):
        return self.values.shape[1]

    def column(self, name):
        try:
            return self.values[:, self.columns.index(name)]
        except ValueError:
            raise MissingColumn(f"column {name!r} not present") from None

    def rows(self, index) -> "FeatureMatrix":
        return FeatureMatrix(self.user_ids[index], self.columns, self.values[index], self.stage)

    def _next(self, values, stage, columns=None, user_ids=None):
        return FeatureMatrix(
            self.user_ids if user_ids is None else user_ids,
            self.columns if columns is None else columns,
            values,
            stage,
        )


def _require(m: FeatureMatrix, stage: Stage):
    if m.stage != stage:
        raise StageError(f"expected a stage-{int(stage)} matrix, got stage {int(m.stage)}")


def _safe_divide(num, den):
    # 0/0 -> 0 for zero-session edge rows; present users always have den >= 1
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den != 0)
    return out


def orthogonalize(raw: FeatureMatrix, weeks: float) -> FeatureMatrix:
    """Decompose visit frequency out of the engagement counts.

    ``days_visited`` becomes days per week, ``sessions`` becomes sessions per
    visited day, and every other column is divided by the user's sessions.
    """
    _require(raw, Stage.RAW)
    if not weeks > 0:
        raise ConfigError(f"weeks must be positive, got {weeks}")
    days = raw.column("days_visited")
    sessions = raw.column("sessions")
    others = [c for c in raw.columns if c not in ("days_visited", "sessions")]
    cols = [days / weeks, _safe_divide(sessions, days)]
    cols += [_safe_divide(raw.column(c), sessions) for c in others]
    names = (*FREQUENCY_COLUMNS, *(f"{c}_per_session" for c in others))
    values = np.column_stack(cols) if raw.n else np.zeros((0, len(names)))
    return raw._next(values, Stage.ORTHOGONAL, names)


def restore_counts(m: FeatureMatrix, weeks: float) -> FeatureMatrix:
    """Inverse of :func:`orthogonalize` for integer count data.

    Each product (rate times denominator) is within one ulp of the original
    count, so rounding to the nearest integer recovers it exactly.
    """
    _require(m, Stage.ORTHOGONAL)
    days = np.rint(m.column(FREQUENCY_COLUMNS[0]) * weeks)
    sessions = np.rint(m.column(FREQUENCY_COLUMNS[1]) * days)
    others = [c for c in m.columns if c not in FREQUENCY_COLUMNS]
    cols = [days, sessions] + [np.rint(m.column(c) * sessions) for c in others]
    names = ("days_visited", "sessions", *(c.removesuffix("_per_session") for c in others))
    values = np.column_stack(cols) if m.n else np.zeros((0, len(names)))
    return FeatureMatrix(m.user_ids, names, values, Stage.RAW)


def outlier_mask(values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """True for rows that strictly exceed any column threshold."""
    return np.any(values > thresholds[None, :], axis=1)


def remove_outliers(m: FeatureMatrix, q: float = DEFAULT_OUTLIER_QUANTILE):
    """Drop users whose value in any column is above that column's ``q``-quantile.

    Quantiles use linear interpolation between order statistics (numpy's
    default). Returns ``(cleaned, removed_user_ids, thresholds)``.
    """
    _require(m, Stage.ORTHOGONAL)
    if not 0 < q < 1:
        raise ConfigError(f"outlier quantile must be in (0, 1), got {q}")
    if m.n == 0:
        raise AllRemoved("no users to clean")
    thresholds = np.quantile(m.values, q, axis=0)
    drop = outlier_mask(m.values, thresholds)
    if drop.all():
        raise AllRemoved(f"quantile {q} removes every user")
    cleaned = m._next(m.values[~drop], Stage.CLEANED, user_ids=m.user_ids[~drop])
    return cleaned, [str(u) for u in m.user_ids[drop]], thresholds


def log_transform(m: FeatureMatrix) -> FeatureMatrix:
    _require(m, Stage.CLEANED)
    if m.n and m.values.min() < 0:
        raise NegativeValue("log transform requires non-negative features")
    return m._next(np.log1p(m.values), Stage.LOGGED)


@dataclass(frozen=True)
class NormalizationStats:
    columns: tuple
    mean: np.ndarray
    sd: np.ndarray


def constant_columns(m: FeatureMatrix) -> list[str]:
    if m.n < 2:
        return list(m.columns)
    sd = m.values.std(axis=0, ddof=1)
    return [c for c, s in zip(m.columns, sd) if not s > 0]


def drop_columns(m: FeatureMatrix, names) -> FeatureMatrix:
    keep = [i for i, c in enumerate(m.columns) if c not in set(names)]
    return m._next(m.values[:, keep], m.stage, tuple(m.columns[i] for i in keep))


def normalize(m: FeatureMatrix):
    """Centre each column and scale it to unit sample (n - 1) standard deviation."""
    _require(m, Stage.LOGGED)
    bad = constant_columns(m)
    if bad:
        raise ConstantColumn(bad)
    mean = m.values.mean(axis=0)
    centred = m.values - mean
    sd = np.sqrt((centred * centred).sum(axis=0) / (m.n - 1))
    stats = NormalizationStats(m.columns, mean, sd)
    return m._next(centred / sd, Stage.NORMALIZED), stats


@dataclass(frozen=True)
class PcaModel:
    """Principal axes of a normalized matrix.

    ``loadings`` is p x p' with orthonormal columns; ``eigenvalues`` holds all
    p eigenvalues of ``X^T X`` (descending) so explained-variance ratios of
    dropped components stay available.
    """

    columns: tuple
    loadings: np.ndarray
    eigenvalues: np.ndarray
    variance_threshold: float

    @property
    def n_components(self):
        return self.loadings.shape[1]

    @property
    def all_explained_ratio(self):
        lam = np.clip(self.eigenvalues, 0.0, None)
        return lam / lam.sum()

    @property
    def explained_ratio(self):
        return self.all_explained_ratio[: self.n_components]

    @property
    def cumulative_ratio(self):
        return float(self.explained_ratio.sum())


def components_needed(ratios, threshold: float) -> int:
    """Smallest count whose cumulative ratio reaches ``threshold``."""
    cum = np.cumsum(ratios)
    # absorb round-off so 0.85 reached "exactly" counts as reached
    hit = np.nonzero(cum >= threshold - 1e-12)[0]
    return int(hit[0]) + 1 if len(hit) else len(ratios)


def fit_pca(m: FeatureMatrix, variance_threshold: float = DEFAULT_VARIANCE_THRESHOLD) -> PcaModel:
    """Eigen-decompose ``X^T X`` and keep the leading components.

    Each loading column is signed so its largest-magnitude entry is positive.
    """
    _require(m, Stage.NORMALIZED)
    if not 0 < variance_threshold <= 1:
        raise ConfigError(f"variance threshold must be in (0, 1], got {variance_threshold}")
    if m.n <= m.p:
        raise InsufficientData(f"PCA needs more users than features ({m.n} <= {m.p})")
    gram = m.values.T @ m.values
    gram = (gram + gram.T) / 2
    lam, vec = np.linalg.eigh(gram)
    order = np.argsort(-lam, kind="stable")
    lam, vec = lam[order], vec[:, order]
    for j in range(vec.shape[1]):
        i = np.argmax(np.abs(vec[:, j]))
        if vec[i, j] < 0:
            vec[:, j] = -vec[:, j]
    positive = lam > lam[0] * 1e-12
    ratios = np.clip(lam, 0, None) / np.clip(lam, 0, None).sum()
    k = components_needed(ratios, variance_threshold)
    if k > positive.sum():
        warnings.warn(
            f"RankDeficient: only {int(positive.sum())} positive eigenvalues; "
            f"retaining those instead of {k}",
            stacklevel=2,
        )
        k = int(positive.sum())
    return PcaModel(m.columns, vec[:, :k].copy(), lam, variance_threshold)


def project_pca(m: FeatureMatrix, model: PcaModel) -> FeatureMatrix:
    _require(m, Stage.NORMALIZED)
    if tuple(m.columns) != tuple(model.columns):
        raise ColumnMismatch("matrix columns do not match the PCA model's input columns")
    scores = m.values @ model.loadings
    names = tuple(f"pc{j + 1}" for j in range(model.n_components))
    return m._next(scores, Stage.PCA, names)


@dataclass(frozen=True)
class EngineeringStats:
    """Everything needed to replay stages 2-6 outside the training set."""

    raw_columns: tuple
    weeks: float
    outlier_quantile: float
    thresholds: np.ndarray
    dropped_columns: tuple
    normalization: NormalizationStats

    def __post_init__(self):
        if np.any(self.normalization.sd <= 0):
            raise ConstantColumn([c for c, s in zip(self.normalization.columns, self.normalization.sd) if s <= 0])


@dataclass(frozen=True)
class EngineeredFeatures:
    """Output of :func:`engineer`, keeping intermediate stages for profiling."""

    stats: EngineeringStats
    pca: PcaModel
    orthogonal: FeatureMatrix  # stage 2, all users
    training_orthogonal: FeatureMatrix  # stage 2, outliers removed
    scores: FeatureMatrix  # stage 6, training users
    removed: list


def engineer(
    raw: FeatureMatrix,
    weeks: float,
    *,
    outlier_quantile: float = DEFAULT_OUTLIER_QUANTILE,
    variance_threshold: float = DEFAULT_VARIANCE_THRESHOLD,
    drop_constant: bool = False,
) -> EngineeredFeatures:
    m2 = orthogonalize(raw, weeks)
    m3, removed, thresholds = remove_outliers(m2, outlier_quantile)
    m4 = log_transform(m3)
    dropped: list[str] = []
    bad = constant_columns(m4)
    if bad:
        if not drop_constant:
            raise ConstantColumn(bad)
        warnings.warn(f"dropping constant columns: {', '.join(bad)}", stacklevel=2)
        dropped = bad
        m4 = drop_columns(m4, bad)
    m5, norm = normalize(m4)
    pca = fit_pca(m5, variance_threshold)
    scores = project_pca(m5, pca)
    stats = EngineeringStats(raw.columns, float(weeks), outlier_quantile, thresholds, tuple(dropped), norm)
    log.info(
        "engineered %d features for %d users (%d outliers removed), %d components explain %.1f%%",
        m5.p, m5.n, len(removed), pca.n_components, 100 * pca.cumulative_ratio,
    )
    kept = ~outlier_mask(m2.values, thresholds)
    return EngineeredFeatures(stats, pca, m2, m2.rows(kept), scores, removed)


def apply_frozen(raw: FeatureMatrix, stats: EngineeringStats, pca: PcaModel) -> FeatureMatrix:
    """Replay stages 2-6 with frozen statistics; no users are removed.

    Used to place any definition-period user, including training outliers, in
    the fitted component space.
    """
    if tuple(raw.columns) != tuple(stats.raw_columns):
        raise ColumnMismatch(
            f"raw columns {raw.columns} do not match the model's {stats.raw_columns}"
        )
    m2 = orthogonalize(raw, stats.weeks)
    # stage 3 here only tags the matrix; the frozen thresholds are not re-applied
    m3 = m2._next(m2.values, Stage.CLEANED)
    m4 = log_transform(m3)
    if stats.dropped_columns:
        m4 = drop_columns(m4, stats.dropped_columns)
    norm = stats.normalization
    if tuple(m4.columns) != tuple(norm.columns):
        raise ColumnMismatch("engineered columns do not match the frozen normalization")
    m5 = m4._next((m4.values - norm.mean) / norm.sd, Stage.NORMALIZED)
    return project_pca(m5, pca)
