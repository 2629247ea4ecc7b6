"""The fitted segmentation model and its JSON file format.

Floats are written with Python's shortest round-trip repr, which never needs
more than 17 significant digits and loads back to the identical double.
NaN (only possible in the means of an empty segment) is stored as null.
The file carries no timestamps so identical fits produce identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .cluster import KMeansModel, SegmentProfile
from .errors import ModelVersionError
from .features import EngineeringStats, NormalizationStats, PcaModel
from .ingest import PeriodSpec

FORMAT_NAME = "behaviorseg-model"
FORMAT_VERSION = 1


def _floats(a):
    return [None if not math.isfinite(x) else float(x) for x in np.asarray(a, dtype=np.float64).ravel()]


def _matrix(a):
    a = np.asarray(a, dtype=np.float64)
    return [_floats(row) for row in a]


def _array(v, ndim=1):
    a = np.array([np.nan if x is None else x for x in v] if ndim == 1 else
                 [[np.nan if x is None else x for x in row] for row in v], dtype=np.float64)
    if ndim == 2 and a.size == 0:
        a = a.reshape(0, 0)
    return a


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def digest_file(path, chunk=1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while block := fh.read(chunk):
            h.update(block)
    return "sha256:" + h.hexdigest()


def stats_to_dict(s: EngineeringStats) -> dict:
    n = s.normalization
    return {
        "raw_columns": list(s.raw_columns),
        "weeks": s.weeks,
        "outlier_quantile": s.outlier_quantile,
        "outlier_thresholds": _floats(s.thresholds),
        "dropped_columns": list(s.dropped_columns),
        "normalization": {"columns": list(n.columns), "mean": _floats(n.mean), "sd": _floats(n.sd)},
    }


def stats_from_dict(d) -> EngineeringStats:
    n = d["normalization"]
    norm = NormalizationStats(tuple(n["columns"]), _array(n["mean"]), _array(n["sd"]))
    return EngineeringStats(
        tuple(d["raw_columns"]), float(d["weeks"]), float(d["outlier_quantile"]),
        _array(d["outlier_thresholds"]), tuple(d["dropped_columns"]), norm,
    )


def pca_to_dict(p: PcaModel) -> dict:
    return {
        "columns": list(p.columns),
        "variance_threshold": p.variance_threshold,
        "eigenvalues": _floats(p.eigenvalues),
        "explained_ratio": _floats(p.explained_ratio),
        "loadings": _matrix(p.loadings),
    }


def pca_from_dict(d) -> PcaModel:
    W = _array(d["loadings"], 2)
    if W.size == 0:
        W = W.reshape(len(d["columns"]), 0)
    return PcaModel(tuple(d["columns"]), W, _array(d["eigenvalues"]), float(d["variance_threshold"]))


def kmeans_to_dict(m: KMeansModel) -> dict:
    return {
        "K": m.K,
        "seed": m.seed,
        "wcss": m.wcss,
        "iterations_run": m.iterations_run,
        "converged": m.converged,
        "centroids": _matrix(m.centroids),
    }


def kmeans_from_dict(d) -> KMeansModel:
    return KMeansModel(_array(d["centroids"], 2), float(d["wcss"]), int(d["seed"]),
                       int(d["iterations_run"]), bool(d["converged"]))


@dataclass(frozen=True)
class SegmentModel:
    """Frozen engineering statistics, PCA, centroids and named profiles.

    ``labels`` maps every definition-period user (training outliers included)
    to a segment so experiment analysis can tell the three user statuses apart.
    """

    config: dict
    stats: EngineeringStats
    pca: PcaModel
    kmeans: KMeansModel
    profiles: list
    labels: dict
    definition_period: PeriodSpec
    seed: int
    input_digest: str | None = None
    selection: dict | None = None
    diagnostics: dict = field(default_factory=dict)
    importance: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.kmeans.K

    @property
    def names(self) -> dict[int, str]:
        return {p.segment: p.name for p in self.profiles}

    @property
    def features(self) -> tuple:
        return tuple(self.stats.raw_columns[2:])

    def to_dict(self) -> dict:
        ids = sorted(self.labels)
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "features": list(self.features),
            "config": _clean(self.config),
            "metadata": {
                "seed": self.seed,
                "definition_period": self.definition_period.to_dict(),
                "input_digest": self.input_digest,
            },
            "engineering": stats_to_dict(self.stats),
            "pca": pca_to_dict(self.pca),
            "kmeans": kmeans_to_dict(self.kmeans),
            "segments": [_clean(p.to_dict()) for p in self.profiles],
            "selection": _clean(self.selection),
            "diagnostics": _clean(self.diagnostics),
            "definition_importance": _clean(self.importance),
            "labels": {"user_ids": ids, "segments": [int(self.labels[u]) for u in ids]},
        }

    @classmethod
    def from_dict(cls, d) -> "SegmentModel":
        if not isinstance(d, dict) or d.get("format") != FORMAT_NAME:
            raise ModelVersionError("not a segmentation model file")
        if d.get("version") != FORMAT_VERSION:
            raise ModelVersionError(
                f"model format version {d.get('version')!r} is not supported (expected {FORMAT_VERSION})"
            )
        try:
            profiles = []
            for p in d["segments"]:
                p = dict(p)
                p["means"] = {k: (math.nan if v is None else v) for k, v in p["means"].items()}
                profiles.append(SegmentProfile.from_dict(p))
            meta = d["metadata"]
            lab = d["labels"]
            return cls(
                config=d["config"],
                stats=stats_from_dict(d["engineering"]),
                pca=pca_from_dict(d["pca"]),
                kmeans=kmeans_from_dict(d["kmeans"]),
                profiles=profiles,
                labels=dict(zip(lab["user_ids"], map(int, lab["segments"]))),
                definition_period=PeriodSpec.from_dict(meta["definition_period"]),
                seed=int(meta["seed"]),
                input_digest=meta.get("input_digest"),
                selection=d.get("selection"),
                diagnostics=d.get("diagnostics") or {},
                importance=d.get("definition_importance") or [],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelVersionError(f"model file is malformed: {exc!r}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n"

    def save(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "SegmentModel":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ModelVersionError(f"model file is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "SegmentModel":
        with open(path) as fh:
            return cls.loads(fh.read())
