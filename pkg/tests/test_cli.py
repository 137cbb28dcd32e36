import json

import pandas as pd
import pytest

import experiment
import mrinn_cli
from artifacts import sha256_file
from errors import TrainingDivergence


def run(*argv):
    return mrinn_cli.main(list(argv))


@pytest.fixture
def market_csv(tmp_path):
    path = tmp_path / "market.csv"
    assert run("synth", "--days", "1", "--seed", "5", "--output", str(path)) == 0
    return path


def test_synth_row_count_and_determinism(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("synth", "--days", "10", "--seed", "2", "--output", str(a)) == 0
    assert run("synth", "--days", "10", "--seed", "2", "--output", str(b)) == 0
    assert len(pd.read_csv(a)) == 960
    assert sha256_file(a) == sha256_file(b)


def test_synth_rejects_zero_days(tmp_path, capsys):
    assert run("synth", "--days", "0", "--output", str(tmp_path / "x.csv")) == 2
    assert "[cli] ERROR" in capsys.readouterr().err


def test_price_reproduces_synthetic_target(market_csv, tmp_path):
    out = tmp_path / "priced.csv"
    assert run("price", "--input", str(market_csv), "--output", str(out)) == 0
    priced = pd.read_csv(out)
    market = pd.read_csv(market_csv)
    assert len(priced) == 96
    assert priced["ts"].tolist() == market["ts"].tolist()
    assert (priced["p_final"] == market["p"]).all()


def test_price_constants_override_changes_ramp_inside_new_width(market_csv, tmp_path):
    base, wide = tmp_path / "base.csv", tmp_path / "wide.csv"
    overrides = tmp_path / "c.json"
    overrides.write_text('{"c4": 100.0}')
    assert run("price", "--input", str(market_csv), "--output", str(base)) == 0
    assert run("price", "--input", str(market_csv), "--output", str(wide), "--constants", str(overrides)) == 0
    v = pd.read_csv(market_csv)["v"].abs()
    r0, r1 = pd.read_csv(base)["ramp"], pd.read_csv(wide)["ramp"]
    assert (r0[v >= 100] == r1[v >= 100]).all()
    inside = (v > 0) & (v < 100)
    assert inside.any()
    assert (r0[inside] != r1[inside]).all()


def test_price_malformed_row_exits_2(market_csv, tmp_path, capsys):
    lines = market_csv.read_text().splitlines()
    header = lines[0].split(",")
    cells = lines[5].split(",")
    cells[header.index("v")] = "abc"
    lines[5] = ",".join(cells)
    market_csv.write_text("\n".join(lines) + "\n")
    assert run("price", "--input", str(market_csv), "--output", str(tmp_path / "o.csv")) == 2
    assert "row 6, column 'v'" in capsys.readouterr().err
    assert run("price", "--input", str(market_csv), "--output", str(tmp_path / "o.csv"), "--lenient") == 0
    assert len(pd.read_csv(tmp_path / "o.csv")) == 95


def test_unknown_config_key_exits_2(tmp_path, capsys):
    assert run("train", "--set", "model.colour=red", "--out", str(tmp_path)) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_divergence_exits_3(tmp_path, monkeypatch, capsys):
    def diverge(cfg, out, jobs):
        raise TrainingDivergence("non-finite loss", "mrinn-0123abcd-s0-f1", 3, 7)
    monkeypatch.setattr(experiment, "cmd_train", diverge)
    assert run("train", "--out", str(tmp_path)) == 3
    assert "run=mrinn-0123abcd-s0-f1" in capsys.readouterr().err


def test_validate_rejects_unknown_directory(tmp_path, capsys):
    assert run("validate", str(tmp_path)) == 2
    assert "neither a run directory nor an output root" in capsys.readouterr().err


def test_etl_requires_index(tmp_path):
    assert run("etl", str(tmp_path)) == 2


def test_size_reports_params_and_sites(capsys):
    assert run("size") == 0
    report = json.loads(capsys.readouterr().out)
    assert report["params"] == 701
    assert report["sites"]["cond6"] == 1
    assert run("size", "--ablation", "drop_everything") == 2


def test_size_of_checkpoint_includes_bytes(tmp_path, capsys, identity_scalers):
    from mrinn import MrinnConfig, MrinnModel, save_checkpoint
    path = save_checkpoint(MrinnModel(MrinnConfig(h=2), identity_scalers), tmp_path / "checkpoint.json")
    assert run("size", "--checkpoint", str(path)) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["bytes"] == path.stat().st_size
    assert report["config"]["h"] == 2
