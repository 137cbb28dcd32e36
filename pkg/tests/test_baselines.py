from statistics import NormalDist

import numpy as np
import pytest

from autodiff import Tape, backward
from baselines import (
    FAMILIES, LqrConfig, MlpConfig, calibrate_bands, lqr_model, mlp_model, naive_forecast,
)
from dataset import WindowSet, make_windows
from errors import ConfigError, InputError
from metrics import QUANTILES, aql, aql_node, aqcr
from mrinn import forward, load_checkpoint, save_checkpoint
from training import AdamState, adam_step, model_params


def window_set(p, y, delivery=None, **extra):
    p = np.asarray(p, dtype=float)
    p = p[:, None] if p.ndim == 1 else p
    n = len(p)
    stamps = np.zeros(n, dtype="datetime64[ns]")
    delivery = np.arange(n) % 96 if delivery is None else np.asarray(delivery)
    feats = {"p": p, **{k: np.asarray(v, dtype=float)[:, None] for k, v in extra.items()}}
    return WindowSet(15 * (p.shape[1] - 1), 15, feats, np.asarray(y, dtype=float), stamps, stamps, delivery)


def test_naive_forecast_persists_latest_value():
    w = window_set([[90.0, 100.0], [10.0, 20.0]], [0.0, 0.0], p_id15=[80.0, 5.0], p_id60=[70.0, 6.0])
    assert naive_forecast("price", w).tolist() == [100.0, 20.0]
    assert naive_forecast("id15", w).tolist() == [80.0, 5.0]
    with pytest.raises(ConfigError):
        naive_forecast("xgb", w)


def test_constant_series_has_zero_residuals():
    w = window_set(np.full(192, 42.0), np.full(192, 42.0))
    bands = calibrate_bands("price", w)
    assert np.all(bands.offsets == 0.0)
    assert bands.fallback_count == 0


def test_bands_median_offset_and_global_fallback(capsys):
    w = window_set(np.zeros(5), [-2.0, -1.0, 0.0, 1.0, 2.0], delivery=[7] * 5)
    bands = calibrate_bands("price", w)
    med = QUANTILES.index(0.50)
    assert bands.offsets[7, med] == 0.0
    assert bands.offsets[7, 0] == pytest.approx(np.percentile([-2, -1, 0, 1, 2], 10))
    assert not bands.pooled[7]
    assert bands.fallback_count == 95
    np.testing.assert_allclose(bands.offsets[8], bands.global_offsets)
    assert "global pool" in capsys.readouterr().err


def test_band_forecasts_never_cross(synth_frame):
    w = make_windows(synth_frame, 0, 15)
    train, test = w.take(np.arange(1200)), w.take(np.arange(1200, len(w)))
    for kind in ("price", "id15", "id60"):
        fc = calibrate_bands(kind, train).forecast(test)
        assert fc.shape == (len(test), 7)
        assert np.all(np.diff(fc, axis=1) >= 0)
        assert aqcr(fc) == 0.0
        assert set(calibrate_bands(kind, train).to_dict()) == {"kind", "offsets", "pooled", "global_offsets"}


def test_empty_training_data_is_rejected():
    with pytest.raises(InputError):
        calibrate_bands("price", window_set(np.empty(0), np.empty(0)))


def test_naive_aql_matches_noise_pinball_score():
    rng = np.random.default_rng(0)
    sigma = 4.0
    level = np.cumsum(rng.normal(0, 3, 30000))
    y = level + rng.normal(0, sigma, 30000)
    w = window_set(level, y)
    bands = calibrate_bands("price", w.take(np.arange(20000)))
    test = w.take(np.arange(20000, 30000))
    nd = NormalDist()
    expected = np.mean([sigma * nd.pdf(nd.inv_cdf(t)) for t in QUANTILES])
    assert aql(test.y, bands.forecast(test)) == pytest.approx(expected, rel=0.10)


def test_lqr_has_fourteen_parameters():
    assert lqr_model(LqrConfig()).param_count() == 2 * len(QUANTILES) == 14
    assert lqr_model(LqrConfig(lookback=60)).param_count() == 14


def test_lqr_recovers_linear_quantiles(identity_scalers):
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, 2000)
    y = 2.0 * x + 1.0 + rng.uniform(-0.05, 0.05, 2000)
    model = lqr_model(LqrConfig(seed=0), identity_scalers)
    params = model_params(model)
    state = AdamState.zeros_like(params)
    batch = {"p": x[:, None]}
    for lr in (0.05, 0.005, 0.0005):
        for _ in range(600):
            tape = Tape()
            outs, bound = model.build(tape, batch)
            grads = backward(tape, aql_node(tape.input(y), outs))
            flat = []
            for d in model.layers():
                flat += list(bound[d.name].gradient_arrays(grads))
            adam_step(params, flat, state, lr)
    for tau, head in zip(QUANTILES, model.heads):
        assert head.weights[0, 0] == pytest.approx(2.0, abs=1e-2)
        assert head.bias[0] == pytest.approx(1.0 - 0.05 + 0.1 * tau, abs=1e-2)


def test_mlp_outputs_seven_unconstrained_quantiles(identity_scalers):
    model = mlp_model(MlpConfig(lookback=30, hidden_size=4, n_layers=2, seed=3), identity_scalers)
    assert model.param_count() == (3 * 4 + 4) + (4 * 4 + 4) + 7 * (4 + 1)
    rng = np.random.default_rng(2)
    for d in model.heads:
        d.weights[...] = rng.normal(0, 3, d.weights.shape)
    q = forward({"p": rng.normal(0, 1, (500, 3))}, model)
    assert q.shape == (500, 7)
    assert aqcr(q) > 0.0
    with pytest.raises(ConfigError):
        forward({"p": rng.normal(0, 1, (5, 2))}, model)


def test_baseline_configs_validate():
    with pytest.raises(ConfigError):
        LqrConfig(lookback=7)
    with pytest.raises(ConfigError):
        MlpConfig(hidden_size=0)
    assert set(FAMILIES) == {"lqr", "mlp"}


def test_baseline_checkpoints_load_back(tmp_path, synth_frame):
    from scaling import UnitScalers
    scalers = UnitScalers().fit_frame(synth_frame.df)
    model = mlp_model(MlpConfig(hidden_size=3, n_layers=1, seed=5), scalers)
    again = load_checkpoint(save_checkpoint(model, tmp_path / "mlp.json"))
    assert again.family == "mlp" and again.config == model.config
    w = make_windows(synth_frame, 0, 15).take(np.arange(10))
    np.testing.assert_array_equal(forward(w.scaled(scalers), again), forward(w.scaled(scalers), model))
