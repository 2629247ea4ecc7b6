"""End-to-end fit and analyze, shared by the CLI and library callers."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import cluster, experiment, features
from .config import RunConfig
from .errors import ConfigError, NoOverallEffect
from .ingest import EventTable, PeriodPair, PeriodSpec, aggregate_experiment_metrics, aggregate_raw_features
from .model import SegmentModel, kmeans_to_dict

log = logging.getLogger(__name__)

# output locations are not part of a model's identity
OUTPUT_KEYS = ("model_path", "curve_path", "report_dir")


@dataclass
class FitResult:
    model: SegmentModel
    selection: cluster.KSelection | None
    engineered: features.EngineeredFeatures


def _importance_dict(rows):
    return [{"segment": r.segment, "name": r.name, "shares": r.shares, "totals": r.totals} for r in rows]


def fit_model(events: EventTable, config: RunConfig, input_digest: str | None = None) -> FitResult:
    """Steps 1-6, choice of K (unless fixed), profiling and naming."""
    period = config.definition_period or PeriodSpec.covering(events)
    raw = aggregate_raw_features(events, period, session_gap=config.session_gap, tz_offset=config.tz_offset)
    m1 = raw.to_matrix(config.features)
    eng = features.engineer(
        m1, period.weeks,
        outlier_quantile=config.outlier_quantile,
        variance_threshold=config.variance_threshold,
        drop_constant=config.drop_constant,
    )
    log.info("root seed %d", config.seed)
    if config.k is not None:
        selection = None
        km = cluster.kmeans_fit(eng.scores, config.k, seed=config.seed, restarts=config.restarts,
                                max_iter=config.max_iter, tol=config.tol)
    else:
        lo, hi = config.k_range
        selection = cluster.select_k(eng.scores, range(lo, hi + 1), seed=config.seed,
                                     restarts=config.restarts, max_iter=config.max_iter, tol=config.tol)
        km = selection.models[selection.recommended_k]
    train_labels = km.predict(eng.scores)
    profiles = cluster.profile_segments(train_labels, eng.training_orthogonal, km.K)
    profiles = cluster.name_segments(profiles, config.z_threshold, config.segment_names)

    # every definition-period user gets a label, outliers via the frozen transform
    all_scores = features.apply_frozen(m1, eng.stats, eng.pca)
    labels = km.predict(all_scores)
    label_map = dict(zip(all_scores.user_ids.tolist(), labels.tolist()))
    names = {p.segment: p.name for p in profiles}
    cpv = np.zeros(m1.n)
    for j, c in enumerate(m1.columns):
        if c.endswith("_cpv"):
            cpv += m1.values[:, j]
    importance = experiment.preliminary_importance(
        labels,
        {"days_visited": m1.column("days_visited"), "sessions": m1.column("sessions"), "cpv": cpv},
        names,
    )
    sel_dict = None
    if selection is not None:
        sel_dict = selection.to_dict()
        sel_dict["models"] = {str(k): kmeans_to_dict(m) for k, m in sorted(selection.models.items())}
    diagnostics = {
        "definition_users": int(m1.n),
        "training_users": int(eng.scores.n),
        "outliers_removed": len(eng.removed),
        "outliers_assigned": len(eng.removed),
        "n_components": int(eng.pca.n_components),
        "cumulative_explained": eng.pca.cumulative_ratio,
    }
    model = SegmentModel(
        config={k: v for k, v in config.to_dict().items() if k not in OUTPUT_KEYS},
        stats=eng.stats,
        pca=eng.pca,
        kmeans=km,
        profiles=profiles,
        labels=label_map,
        definition_period=period,
        seed=config.seed,
        input_digest=input_digest,
        selection=sel_dict,
        diagnostics=diagnostics,
        importance=_importance_dict(importance),
    )
    return FitResult(model, selection, eng)


@dataclass
class Analysis:
    users: experiment.SegmentedUsers
    importance: list
    effects: list
    contributions: dict
    drilldown: list
    period: PeriodSpec
    diagnostics: dict

    @property
    def total(self) -> experiment.EffectRow:
        return self.effects[-1]


def segment_users(model: SegmentModel, events: EventTable, config: RunConfig,
                  assignments: dict | None = None) -> tuple[experiment.SegmentedUsers, PeriodSpec]:
    period = config.experiment_period or PeriodSpec.covering(events)
    try:
        PeriodPair(model.definition_period, period)
    except ConfigError as exc:
        raise ConfigError(f"{exc} (model defined on {model.definition_period.start:g}.."
                          f"{model.definition_period.end:g})") from exc
    metrics = aggregate_experiment_metrics(events, period, session_gap=config.session_gap,
                                           tz_offset=config.tz_offset)
    users = experiment.assign_segments(model.labels, metrics, assignments, model.names)
    return users, period


def analyze_users(users: experiment.SegmentedUsers, config: RunConfig, period: PeriodSpec,
                  model: SegmentModel | None = None) -> Analysis:
    effects = experiment.segment_effect_table(
        users, config.suppression_threshold, config.alpha, experiment.DEFAULT_METRICS, config.bonferroni,
    )
    contributions = {}
    for metric in experiment.DEFAULT_METRICS:
        try:
            contributions[metric] = experiment.contribution_decomposition(users, metric)
        except NoOverallEffect as exc:
            log.warning("%s", exc)
            contributions[metric] = []
    drill = []
    for metric in ("cpv", "apv"):
        drill.extend(experiment.pagetype_drilldown(users, None, metric, config.min_cell_users))
    counts = users.status_counts
    diagnostics = {
        "users": len(users),
        "status_counts": {str(k): int(counts.get(k, 0)) for k in (1, 2, 3)},
        "excluded_definition_only": int(users.excluded_definition_only),
        "segments_tested": sum(1 for r in effects[:-1] if not r.suppressed),
        "bonferroni": bool(config.bonferroni),
    }
    if model is not None:
        diagnostics["outliers_assigned"] = int(model.diagnostics.get("outliers_assigned", 0))
    return Analysis(users, experiment.importance_from_users(users), effects, contributions, drill,
                    period, diagnostics)


def analyze(model: SegmentModel, events: EventTable, config: RunConfig,
            assignments: dict | None = None) -> Analysis:
    users, period = segment_users(model, events, config, assignments)
    return analyze_users(users, config, period, model)
