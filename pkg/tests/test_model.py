import json

import numpy as np
import pytest

from behaviorseg.config import RunConfig
from behaviorseg.errors import ModelVersionError
from behaviorseg.model import FORMAT_VERSION, SegmentModel
from behaviorseg.pipeline import analyze, fit_model
from behaviorseg.reports import effect_json


def test_round_trip_semantically_identical(small_fit):
    model = small_fit[0].model
    back = SegmentModel.loads(model.dumps())
    assert back.dumps() == model.dumps()
    assert back.labels == model.labels
    assert back.names == model.names
    assert back.definition_period == model.definition_period
    np.testing.assert_array_equal(back.stats.normalization.mean, model.stats.normalization.mean)
    np.testing.assert_array_equal(back.stats.normalization.sd, model.stats.normalization.sd)
    np.testing.assert_array_equal(back.stats.thresholds, model.stats.thresholds)
    np.testing.assert_array_equal(back.pca.loadings, model.pca.loadings)
    np.testing.assert_array_equal(back.pca.eigenvalues, model.pca.eigenvalues)
    np.testing.assert_array_equal(back.kmeans.centroids, model.kmeans.centroids)
    assert back.kmeans.wcss == model.kmeans.wcss


def test_saved_model_analyzes_like_in_memory(small_fit, small_cohort, tmp_path):
    fit, config = small_fit
    cohort, experiment, assignments = small_cohort
    path = tmp_path / "m.json"
    fit.model.save(path)
    loaded = SegmentModel.load(path)
    cfg = config.override(experiment_period=cohort.periods.experiment)
    a = analyze(fit.model, experiment, cfg, assignments)
    b = analyze(loaded, experiment, cfg, assignments)
    assert json.dumps(effect_json(a.effects)) == json.dumps(effect_json(b.effects))


def test_reals_round_trip_exactly(small_fit):
    d = json.loads(small_fit[0].model.dumps())
    w = np.array(d["pca"]["loadings"], dtype=float)
    np.testing.assert_array_equal(w, small_fit[0].model.pca.loadings)
    c = np.array(d["kmeans"]["centroids"], dtype=float)
    np.testing.assert_array_equal(c, small_fit[0].model.kmeans.centroids)


def test_version_mismatch_detected(small_fit):
    d = json.loads(small_fit[0].model.dumps())
    d["version"] = FORMAT_VERSION + 1
    with pytest.raises(ModelVersionError, match="version"):
        SegmentModel.from_dict(d)
    d["version"] = FORMAT_VERSION
    d["format"] = "something-else"
    with pytest.raises(ModelVersionError):
        SegmentModel.from_dict(d)


def test_malformed_model_rejected(small_fit):
    d = json.loads(small_fit[0].model.dumps())
    del d["kmeans"]
    with pytest.raises(ModelVersionError):
        SegmentModel.from_dict(d)
    with pytest.raises(ModelVersionError):
        SegmentModel.loads("{not json")


def test_fit_is_byte_deterministic(small_fit, small_cohort):
    fit, config = small_fit
    cohort = small_cohort[0]
    again = fit_model(cohort.definition, config, "sha256:test")
    assert again.model.dumps() == fit.model.dumps()


def test_model_records_metadata(small_fit):
    fit, config = small_fit
    d = json.loads(fit.model.dumps())
    assert d["metadata"]["seed"] == 3
    assert d["metadata"]["input_digest"] == "sha256:test"
    assert "model_path" not in d["config"]
    assert d["features"] == list(fit.model.features)
    assert RunConfig.from_dict({k: v for k, v in d["config"].items()}).seed == 3
