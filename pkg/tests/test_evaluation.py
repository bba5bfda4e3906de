import math
from datetime import date

import numpy as np
import pytest

from v2nscale.evaluation import (
    EvalSettings,
    ExperimentSpec,
    PerfectForecaster,
    best_by_lookahead,
    expand_grid,
    grid_csv,
    hold_forecasts,
    make_forecaster,
    neural_forecasts,
    parse_forecaster,
    resolve_members,
    rmse,
    run_experiment,
    run_grid,
    series_forecasts,
    synth_series,
    synthetic_dataset,
)
from v2nscale.ingest import CleanDataset, ScenarioSplit, day_range
from v2nscale.neural import NetConfig
from v2nscale.smoothing import SmoothingConfig


def test_rmse_examples():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5))
    assert rmse([5], [7]) == 2.0
    with pytest.raises(ValueError, match="length mismatch"):
        rmse([1, 2], [1])
    with pytest.raises(ValueError):
        rmse([], [])


def test_spec_validation():
    with pytest.raises(ValueError, match="unknown technique"):
        ExperimentSpec("arima")
    with pytest.raises(ValueError):
        ExperimentSpec("tes", lookahead=0)
    with pytest.raises(ValueError):
        ExperimentSpec("tes", mode="batch")
    with pytest.raises(ValueError):
        ExperimentSpec("lstm", radius="q5")
    spec = ExperimentSpec.from_dict({"technique": "gru", "k": 6, "radius": "median"})
    assert spec.lookahead == 6 and ExperimentSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError, match="unknown"):
        ExperimentSpec.from_dict({"technique": "gru", "colour": 1})


# ------------------------------------------------------------ forecasts


def test_hold_k1_is_lag_difference():
    rng = np.random.default_rng(0)
    y = np.cumsum(rng.normal(size=500)) + 100
    f = hold_forecasts(y, 200, 1, online=True)
    assert rmse(y[200:], f) == pytest.approx(float(np.sqrt(np.mean(np.diff(y)[199:] ** 2))))


def test_hold_offline_and_online():
    y = np.arange(10.0)
    np.testing.assert_array_equal(hold_forecasts(y, 5, 2, online=True), [4, 4, 5, 6, 7])
    np.testing.assert_array_equal(hold_forecasts(y, 5, 2, online=False), [4] * 5)


@pytest.mark.parametrize("technique", ["hold", "des", "tes"])
@pytest.mark.parametrize("k", [1, 3, 12])
def test_offline_equals_online_until_first_absorption(technique, k):
    s = synth_series("seasonal", 4, 300, 10, seed=1).values
    cfg = SmoothingConfig(season_len=288)
    n_train = 2 * 288
    on = series_forecasts(technique, s, n_train, k, "online", cfg)
    off = series_forecasts(technique, s, n_train, k, "offline", cfg)
    np.testing.assert_array_equal(on[:k], off[:k])
    assert not np.array_equal(on, off)


@pytest.mark.parametrize("technique", ["hold", "des", "tes"])
def test_univariate_no_leakage(technique):
    s = synth_series("seasonal", 4, 300, 10, seed=2).values
    n_train = 2 * 288
    for k in (1, 6):
        base = series_forecasts(technique, s, n_train, k, "online", SmoothingConfig(season_len=288))
        for i in (n_train, n_train + 50, n_train + 300):
            cut = s.copy()
            cut[i + 1:] = 0.0
            f = series_forecasts(technique, cut, n_train, k, "online", SmoothingConfig(season_len=288))
            np.testing.assert_array_equal(f[:i - n_train + 1], base[:i - n_train + 1])


def test_series_forecasts_rejects_neural():
    with pytest.raises(ValueError, match="probe features"):
        series_forecasts("lstm", np.ones(10), 5, 1)


# -------------------------------------------------------------- neural

SMALL_SPLITS = (
    ScenarioSplit("non-COVID-19", (date(2020, 1, 28), date(2020, 1, 30)), (date(2020, 1, 31), date(2020, 1, 31))),
    ScenarioSplit("COVID-19", (date(2020, 1, 29), date(2020, 1, 31)), (date(2020, 2, 1), date(2020, 2, 1))),
)
TINY = {"neurons": 4, "epochs": 1, "history": 4, "online_window": 24}


@pytest.fixture(scope="module")
def small():
    return synthetic_dataset(days=5, probes=3, seed=3, break_date=None)


def _with_flow(clean: CleanDataset, flow: np.ndarray) -> CleanDataset:
    return CleanDataset(clean.probes, clean.info, clean.start, clean.interval, flow,
                        clean.speed.copy(), clean.accuracy.copy())


@pytest.mark.parametrize("model", ["gru", "tcn"])
def test_neural_no_leakage(small, model):
    train, test = day_range(small, SMALL_SPLITS[0].train), day_range(small, SMALL_SPLITS[0].test)
    test = slice(test.start, test.start + 40)
    cfg = NetConfig(model, seed=1, lookaheads=(3,), **TINY)
    members = small.probes
    base = neural_forecasts(small, "P000", members, train, test, 3, True, cfg, stride=4)
    i = test.start + 17
    flow = small.flow.copy()
    flow[:, i + 1:] = 0.0
    cut = neural_forecasts(_with_flow(small, flow), "P000", members, train, test, 3, True, cfg, stride=4)
    n = i - test.start + 1
    np.testing.assert_array_equal(cut[:n], base[:n])
    assert np.all(base >= 0)


def test_resolve_members(small):
    assert resolve_members(small, "P000", None) == ("P000",)
    assert set(resolve_members(small, "P000", "all")) == set(small.probes)
    assert resolve_members(small, "P000", 0.0) == ("P000",)
    assert resolve_members(small, "P000", "w2")[0] == "P000"


# ------------------------------------------------------------- experiments


def test_run_experiment_warmup_and_count(small):
    settings = EvalSettings(target="P001", splits=SMALL_SPLITS, smoothing=SmoothingConfig(season_len=96), warmup=None)
    res = run_experiment(ExperimentSpec("tes", "online", "non-COVID-19", 3), small, settings)
    assert settings.effective_warmup == 96
    assert res.n == 288 - 96 and res.first_index == day_range(small, SMALL_SPLITS[0].test).start + 96
    assert res.rmse >= 0 and res.rmse == rmse(res.actual, res.forecasts)


def test_run_experiment_warmup_too_long(small):
    settings = EvalSettings(splits=SMALL_SPLITS, warmup=300)
    with pytest.raises(ValueError, match="warmup"):
        run_experiment(ExperimentSpec("hold"), small, settings)


def test_grid_rows_and_determinism(small):
    settings = EvalSettings(splits=SMALL_SPLITS, smoothing=SmoothingConfig(season_len=96), warmup=12)
    specs = expand_grid(["hold", "des"], ["online"], ["COVID-19"], (1, 3, 6, 9, 12))
    assert len(specs) == 10
    res = run_grid(specs, small, settings)
    assert [r.spec for r in res] == specs
    again = run_grid(specs + specs[:1], small, settings, jobs=2)
    assert [r.rmse for r in again[:10]] == [r.rmse for r in res]
    assert again[10].rmse == again[0].rmse
    text = grid_csv(res)
    assert text.splitlines()[0].split(",")[:4] == ["technique", "mode", "scenario", "lookahead"]
    assert len(text.splitlines()) == 11
    assert run_grid(specs[:1], small, settings)[0].row()["lookahead_min"] == 5
    best = best_by_lookahead(res)
    assert set(best) == {("COVID-19", "online", k) for k in (1, 3, 6, 9, 12)}


def test_grid_records_failures(small):
    settings = EvalSettings(splits=SMALL_SPLITS, warmup=0)
    res = run_grid([ExperimentSpec("tes"), ExperimentSpec("hold")], small, settings)
    assert "TES needs at least 2 seasons" in res[0].error and math.isnan(res[0].rmse)
    assert res[0].row()["rmse"] == ""
    assert res[1].error is None
    with pytest.raises(ValueError):
        run_grid([], small, settings)


def test_neural_experiment_runs(small):
    settings = EvalSettings(splits=SMALL_SPLITS, neural=TINY, warmup=4, online_stride=48)
    res = run_experiment(ExperimentSpec("tcnlstm", "online", "COVID-19", 1, radius="all"), small, settings)
    assert res.n == 288 - 4 and np.isfinite(res.rmse)


# --------------------------------------------------------------- synthetics


def test_synth_seasonal_periodic():
    s = synth_series("seasonal", 3, 500.0, 0.0)
    v = s.values
    np.testing.assert_allclose(v[:288], v[288:576], atol=1e-9)
    assert v.min() >= 0 and s.step == 300 and len(s) == 3 * 288


def test_synth_trend_break_ratio():
    s = synth_series("trend_break", 9, 500.0, 0.0, break_day=6)
    pre = s.values[5 * 288:6 * 288].mean()
    post = s.values[6 * 288:7 * 288].mean()
    assert post == pytest.approx(0.42 * pre)


def test_synth_determinism_and_errors():
    a = synth_series("random_walk", 2, 100.0, 5.0, seed=4)
    b = synth_series("random_walk", 2, 100.0, 5.0, seed=4)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.values.min() >= 0
    with pytest.raises(ValueError):
        synth_series("seasonal", 2, -1.0)
    with pytest.raises(ValueError):
        synth_series("seasonal", 0, 1.0)
    with pytest.raises(ValueError):
        synth_series("sawtooth", 1, 1.0)


def test_synthetic_dataset_covers_default_splits():
    from v2nscale.ingest import split_scenarios

    clean = synthetic_dataset(days=48, probes=2)
    assert len(split_scenarios(clean)) == 2
    assert clean.probes == ("P000", "P001")


# ------------------------------------------------------ step-wise forecasters


def test_perfect_forecaster():
    f = PerfectForecaster([1.0, 2.0, 3.0, 4.0], start=1)
    assert f.forecast(1) == 2.0
    f.observe(2.0)
    assert f.forecast(2) == 4.0 and f.forecast(9) == 4.0


def test_parse_forecaster():
    assert parse_forecaster("tes-online") == ("tes", "online")
    assert parse_forecaster("GRU") == ("gru", "online")
    assert parse_forecaster("hold-offline") == ("hold", "offline")
    with pytest.raises(ValueError):
        parse_forecaster("tes-sometimes")
    with pytest.raises(ValueError):
        parse_forecaster("prophet")


def test_stepwise_matches_batch(small):
    """The step-wise forecaster reproduces the batch forecasts at a fixed lead."""
    settings = EvalSettings(splits=SMALL_SPLITS, smoothing=SmoothingConfig(season_len=96))
    train = day_range(small, SMALL_SPLITS[0].train)
    a = day_range(small, SMALL_SPLITS[0].test).start
    y = small.flow[0].astype(float)
    values = y[train.start:a + 20]
    batch = series_forecasts("tes", values, a - train.start, 1, "online", settings.smoothing)
    fc = make_forecaster("tes-online", small, "P000", train, a, (1,), settings)
    got = []
    for i in range(a, a + 20):
        got.append(fc.forecast(1))
        fc.observe(y[i])
    np.testing.assert_allclose(got, batch, rtol=1e-12)


def test_neural_stepwise_matches_batch(small):
    train = day_range(small, SMALL_SPLITS[0].train)
    a = day_range(small, SMALL_SPLITS[0].test).start
    settings = EvalSettings(splits=SMALL_SPLITS, neural=TINY)
    fc = make_forecaster("gru-offline", small, "P000", train, a, (2,), settings, seed=1)
    cfg = NetConfig("gru", seed=1, lookaheads=(2,), **TINY)
    batch = neural_forecasts(small, "P000", ("P000",), train, slice(a, a + 10), 2, False, cfg)
    # batch target a+j has origin a+j-2; the forecaster starts at origin a-1, i.e. batch[1]
    y = small.flow[0]
    got = []
    for i in range(a, a + 8):
        got.append(fc.forecast(2))
        fc.observe(y[i])
    np.testing.assert_allclose(got, batch[1:9], rtol=1e-12)
