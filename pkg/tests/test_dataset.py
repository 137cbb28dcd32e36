import numpy as np
import pandas as pd
import pytest

from artifacts import sha256_file
from dataset import (
    SCHEMA_COLUMNS, STEP, FeatureFrame, FoldSpec, SynthParams, delivery_index, generate_synthetic,
    load_csv, make_folds, make_windows, write_csv,
)
from errors import ConfigError, SchemaError
from pricing_engine import PricingConstants, price_frame


@pytest.fixture(scope="module")
def day(synth_frame):
    return FeatureFrame(synth_frame.df.iloc[:96].reset_index(drop=True))


@pytest.fixture
def day_csv(tmp_path, day):
    return write_csv(day, tmp_path / "day.csv")


def _edit(path, row, column, value):
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    cells = lines[row + 1].split(",")
    cells[header.index(column)] = value
    lines[row + 1] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------- load_csv ----------
def test_round_trip_is_exact(day, day_csv):
    frame = load_csv(day_csv)
    assert len(frame) == 96 and frame.dropped == 0
    assert list(frame.df.columns) == SCHEMA_COLUMNS
    assert list(frame.ts) == list(day.ts)
    cols = SCHEMA_COLUMNS[1:]
    assert (frame.df[cols].to_numpy() == day.df[cols].to_numpy()).all()


def test_missing_column_is_named(tmp_path, day):
    path = tmp_path / "no_v.csv"
    day.df.drop(columns=["v"]).assign(ts=day.df["ts"].dt.strftime("%Y-%m-%dT%H:%M:%SZ")).to_csv(path, index=False)
    with pytest.raises(SchemaError, match=r"missing column\(s\): v$"):
        load_csv(path)


def test_unexpected_column_is_rejected(tmp_path, day):
    path = tmp_path / "extra.csv"
    df = day.df.assign(ts=day.df["ts"].dt.strftime("%Y-%m-%dT%H:%M:%SZ"), wind=1.0)
    df.to_csv(path, index=False)
    with pytest.raises(SchemaError, match="wind"):
        load_csv(path)


def test_target_column_optional_for_pricing(tmp_path, day):
    path = tmp_path / "no_p.csv"
    day.df.drop(columns=["p"]).assign(ts=day.df["ts"].dt.strftime("%Y-%m-%dT%H:%M:%SZ")).to_csv(path, index=False)
    assert "p" not in load_csv(path, require_target=False).df.columns
    with pytest.raises(SchemaError, match=r"missing column\(s\): p$"):
        load_csv(path)


def test_nan_cell_strict_and_lenient(day_csv, capsys):
    _edit(day_csv, 10, "p_da", "NaN")
    with pytest.raises(SchemaError, match="row 12, column 'p_da'"):
        load_csv(day_csv)
    frame = load_csv(day_csv, strict=False)
    assert len(frame) == 95 and frame.dropped == 1
    assert "dropped 1 row(s)" in capsys.readouterr().err


def test_negative_volume(day_csv):
    _edit(day_csv, 3, "l_id60", "-5")
    with pytest.raises(SchemaError, match="negative"):
        load_csv(day_csv)
    assert load_csv(day_csv, strict=False).dropped == 1


def test_timestamp_errors(day_csv):
    original = day_csv.read_text()
    cases = [
        (4, "yesterday", "unparseable"),
        (4, "2022-01-01T00:45:00Z", "duplicate"),
        (4, "2021-12-31T00:00:00Z", "not increasing"),
        (4, "2022-01-01T01:05:00Z", "15-min grid"),
    ]
    for row, value, message in cases:
        day_csv.write_text(original)
        _edit(day_csv, row, "ts", value)
        with pytest.raises(SchemaError, match=message):
            load_csv(day_csv)


def test_gaps_rejected_or_forward_filled(tmp_path, day, capsys):
    gappy = FeatureFrame(day.df.drop(index=[20, 21]).reset_index(drop=True))
    path = write_csv(gappy, tmp_path / "gap.csv")
    with pytest.raises(SchemaError, match="gap"):
        load_csv(path)
    filled = load_csv(path, fill_gaps=True)
    assert len(filled) == 96
    assert filled.df.loc[21, "p"] == day.df.loc[19, "p"]
    assert "forward-filled 2 missing row(s)" in capsys.readouterr().err
    assert len(load_csv(path, strict=False)) == 94


def test_missing_file():
    with pytest.raises(SchemaError, match="not found"):
        load_csv("/nonexistent/market.csv")


# ---------- windows ----------
def test_window_count_formula_by_enumeration(synth_frame):
    for rows in (1, 2, 5, 17, 100, 200):
        frame = FeatureFrame(synth_frame.df.iloc[:rows].reset_index(drop=True))
        for n in (0, 15, 60, 180):
            for m in (15, 30, 60):
                w = make_windows(frame, n, m)
                assert len(w) == max(0, rows - n // 15 - m // 15)


def test_window_example_and_causality(synth_frame):
    frame = FeatureFrame(synth_frame.df.iloc[:100].reset_index(drop=True))
    w = make_windows(frame, 60, 15)
    assert len(w) == 95 and w.n_lags == 5
    assert w.features["p"].shape == (95, 5)
    ts = frame.df["ts"].to_numpy(dtype="datetime64[ns]")
    for i in range(len(w)):
        origin = int(np.flatnonzero(ts == w.origin[i])[0])
        np.testing.assert_array_equal(w.features["v"][i], frame.df["v"].to_numpy()[origin - 4:origin + 1])
        assert w.target[i] - w.origin[i] == np.timedelta64(15, "m")
        assert w.y[i] == frame.df.loc[origin + 1, "p"]
    assert np.all(w.origin < w.target)
    assert np.array_equal(w.delivery, delivery_index(w.target))


def test_windows_skip_gaps(day):
    gappy = FeatureFrame(day.df.drop(index=[50]).reset_index(drop=True))
    w = make_windows(gappy, 15, 15)
    assert len(w) == 95 - 2 - 2
    assert np.all(w.target - w.origin == np.timedelta64(15, "m"))


def test_window_argument_checks(day, capsys):
    with pytest.raises(ConfigError):
        make_windows(day, 10, 15)
    with pytest.raises(ConfigError):
        make_windows(day, 0, 0)
    assert len(make_windows(day, 1440, 15)) == 0
    assert "too short" in capsys.readouterr().err


def test_delivery_index():
    ts = pd.to_datetime(["2024-03-01T00:00:00Z", "2024-03-01T00:15:00Z", "2024-03-01T23:45:00Z"])
    assert delivery_index(ts).tolist() == [0, 1, 95]


# ---------- folds ----------
def test_calendar_fold_boundaries():
    spec = FoldSpec.calendar()
    d = lambda s: pd.Timestamp(s, tz="UTC")  # noqa: E731
    f1 = spec.folds[0]
    assert (f1.train_start, f1.val_start, f1.test_start, f1.test_end) == (
        d("2022-01-01"), d("2024-09-01"), d("2025-01-01"), d("2025-05-01"))
    assert spec.folds[2].test_end == d("2026-01-01")
    assert [f.train_start for f in spec.folds] == [d("2022-01-01")] * 3


def test_proportional_folds_on_synthetic_year():
    frame = generate_synthetic(360, seed=1)
    spec = FoldSpec.proportional_to(frame.ts.iloc[0], frame.ts.iloc[-1] + STEP)
    folds = make_folds(frame, spec)
    assert len(folds) == 3 and spec.proportional
    for a, b in zip(folds, folds[1:]):
        assert len(a.train) < len(b.train)
        assert a.train.df["ts"].isin(b.train.df["ts"]).all()
        assert a.test.ts.iloc[-1] + STEP == b.test.ts.iloc[0]
    for f in folds:
        assert f.val.ts.iloc[0] > f.train.ts.iloc[-1]
        assert f.test.ts.iloc[0] > f.val.ts.iloc[-1]
        assert not f.val.df["ts"].isin(f.test.df["ts"]).any()
    assert folds[-1].test.ts.iloc[-1] == frame.ts.iloc[-1]


def test_fold_coverage_gap_is_reported(synth_frame):
    with pytest.raises(SchemaError, match="2022-01-01"):
        make_folds(FeatureFrame(synth_frame.df.iloc[10:].reset_index(drop=True)), FoldSpec.calendar())


# ---------- synthetic market ----------
def test_synthetic_is_deterministic(tmp_path):
    a = write_csv(generate_synthetic(10, seed=7), tmp_path / "a.csv")
    b = write_csv(generate_synthetic(10, seed=7), tmp_path / "b.csv")
    c = write_csv(generate_synthetic(10, seed=8), tmp_path / "c.csv")
    assert sha256_file(a) == sha256_file(b) != sha256_file(c)
    assert len(load_csv(a)) == 960


def test_synthetic_target_is_rule_consistent(synth_frame):
    out = price_frame(synth_frame.df, PricingConstants())
    assert (out["p_final"].to_numpy() == synth_frame.df["p"].to_numpy()).all()


def test_synthetic_respects_constant_overrides():
    c = PricingConstants(c7=100.0)
    frame = generate_synthetic(3, seed=2, constants=c)
    assert (price_frame(frame.df, c)["p_final"].to_numpy() == frame.df["p"].to_numpy()).all()


def test_synthetic_marginals(synth_frame):
    df = synth_frame.df
    p = SynthParams()
    phi = 1.0 - p.v_theta
    long_run_sd = p.v_stationary_sd() * np.sqrt((1 + phi) / (1 - phi))
    assert abs(df["v"].mean()) <= 3 * long_run_sd / np.sqrt(len(df))
    for col in ("e_afrr_pos", "e_afrr_neg", "e_mfrr_pos", "e_mfrr_neg", "l_id15", "l_id60"):
        assert (df[col] >= 0).all()
    assert (df["p_voaa_pos"] <= df[["p_afrr_pos", "p_mfrr_pos"]].max(axis=1)).all()
    assert (df.loc[df["v"] > 100, "e_afrr_pos"].mean() > df.loc[df["v"] > 100, "e_afrr_neg"].mean())


def test_synthetic_rejects_empty_request():
    with pytest.raises(ConfigError):
        generate_synthetic(0, seed=0)
