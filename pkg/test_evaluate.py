import numpy as np
import pandas as pd
import pytest

from data import SampleLayout, assemble_sample, gen_synthetic
from errors import ConfigError, DimensionError
from evaluate import (
    ensemble_predict,
    evaluate,
    format_report,
    lead_time_trend,
    normalized_score,
    persistence_predict,
    predict,
    score,
    write_report,
)
from models import ModelSpec, build_model

LAYOUT = SampleLayout(t_in=2, t_out=3)


def _model(seed):
    spec = ModelSpec(variant="unet_dsc", in_channels=11, out_channels=12, base_width=8, depth=3)
    return build_model(spec, seed=seed)


def test_persistence_repeats_last_frame_targets(tiny_dataset):
    layout = SampleLayout(t_in=3, t_out=4, target_channels=(0, 2))
    sample = assemble_sample(tiny_dataset, 5, layout)
    pred = persistence_predict(sample.input, layout, 4, 3)
    assert pred.shape == (8, 16, 16)
    last = sample.input.data[2 * 4:3 * 4]
    for lead in range(4):
        np.testing.assert_array_equal(pred[2 * lead], last[0])
        np.testing.assert_array_equal(pred[2 * lead + 1], last[2])


def test_persistence_ignores_earlier_frames(tiny_dataset):
    x = assemble_sample(tiny_dataset, 0, LAYOUT).input.data.copy()
    before = persistence_predict(x, LAYOUT, 4, 3)
    x[:4] += 100.0
    np.testing.assert_array_equal(persistence_predict(x, LAYOUT, 4, 3), before)


def test_score_and_normalization():
    t = np.arange(12.0).reshape(3, 2, 2)
    assert score(t, t) == 0.0
    assert score(t + 2, t) == 4.0
    assert normalized_score(0.5, 0.5) == 1.0
    assert normalized_score(0.0, 0.5) == 0.0
    assert normalized_score(0.3, 0.0) is None
    with pytest.raises(DimensionError):
        score(t, t[:2])


def test_ensemble_properties(rng):
    t = rng.standard_normal((2, 6, 4, 4)).astype(np.float32)
    p = rng.standard_normal((2, 6, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(ensemble_predict([p]), p)
    np.testing.assert_allclose(ensemble_predict([p, 2 * t - p]), t, atol=1e-6)
    members = [t + rng.standard_normal(t.shape).astype(np.float32) for _ in range(4)]
    mean_member = np.mean([score(m, t) for m in members])
    assert score(ensemble_predict(members), t) <= mean_member + 1e-6
    with pytest.raises(DimensionError):
        ensemble_predict([p, p[:1]])
    with pytest.raises(ConfigError):
        ensemble_predict([])


def test_ensemble_of_models_averages_predictions(tiny_dataset):
    x = assemble_sample(tiny_dataset, 0, LAYOUT).input.data[None]
    a, b = _model(1), _model(2)
    expected = (predict(a, x).astype(np.float64) + predict(b, x)) / 2
    np.testing.assert_allclose(ensemble_predict([a, b], x), expected, rtol=1e-6)


def test_lead_time_trend():
    assert lead_time_trend([0.1, 0.2, 0.4, 0.8]) == pytest.approx(1.0)
    assert lead_time_trend([0.8, 0.4, 0.2, 0.1]) == pytest.approx(-1.0)
    assert np.isnan(lead_time_trend([0.3, 0.3, 0.3]))


def test_evaluate_report_structure(tiny_dataset):
    models = [("a", _model(1)), ("b", _model(2))]
    report = evaluate(models, [("ab", ["a", "b"])], tiny_dataset, LAYOUT, batch_size=6)
    assert [r.name for r in report.rows] == ["persistence", "a", "b", "ab"]
    assert [r.kind for r in report.rows] == ["persistence", "model", "model", "ensemble"]
    assert report.rows[0].normalized == 1.0
    assert report.samples == 20
    assert not report.normalization_undefined
    for r in report.rows:
        assert len(r.curve) == 3
        assert r.raw >= 0
        assert np.mean(r.curve) == pytest.approx(r.raw, rel=1e-6, abs=1e-12)
    persistence = report.row("persistence").raw
    assert report.row("a").normalized == pytest.approx(report.row("a").raw / persistence)
    assert report.row("ab").raw <= (report.row("a").raw + report.row("b").raw) / 2 + 1e-6
    assert report.row("ab").members == ["a", "b"]


def test_evaluate_is_deterministic(tiny_dataset):
    models = [("a", _model(1))]
    first = evaluate(models, [], tiny_dataset, LAYOUT, batch_size=4)
    second = evaluate(models, [], tiny_dataset, LAYOUT, batch_size=4)
    assert [r.raw for r in first.rows] == [r.raw for r in second.rows]


def test_static_world_has_undefined_normalization():
    frozen = gen_synthetic(seed=3, T=10, H=16, W=16, velocity_range=0.0)
    report = evaluate([("a", _model(1))], [], frozen, LAYOUT)
    assert report.row("persistence").raw == 0.0
    assert report.row("persistence").normalized == 1.0
    assert report.normalization_undefined
    assert report.row("a").normalized is None
    assert "undefined" in format_report(report)


def test_evaluate_rejects_bad_inputs(tiny_dataset):
    short = gen_synthetic(seed=3, T=4, H=16, W=16)
    with pytest.raises(ConfigError):
        evaluate([], [], short, LAYOUT)
    with pytest.raises(ConfigError, match="layout"):
        evaluate([("a", _model(1))], [], tiny_dataset, SampleLayout(t_in=3, t_out=3))
    with pytest.raises(ConfigError, match="unknown"):
        evaluate([("a", _model(1))], [("e", ["a", "z"])], tiny_dataset, LAYOUT)


def test_write_report(tmp_path, tiny_dataset):
    report = evaluate([("a", _model(1))], [], tiny_dataset, LAYOUT)
    text_path, csv_path = write_report(report, tmp_path)
    text = open(text_path, encoding="utf-8").read()
    assert "persistence" in text and "1.000" in text
    frame = pd.read_csv(csv_path)
    assert list(frame.columns) == ["name", "kind", "raw_mse", "normalized", "members", "lead_1", "lead_2", "lead_3"]
    assert list(frame["name"]) == ["persistence", "a"]
    assert frame["normalized"][0] == 1.0
