import json

import pandas as pd
import pytest

from artifacts import read_json
from errors import ConfigError
from experiment import (
    OUTPUT_ENV, ExperimentConfig, cmd_ablate, cmd_baseline, cmd_evaluate, cmd_sweep, cmd_train, load_data,
)
from mrinn import MrinnConfig, MrinnModel, save_checkpoint
from pricing_engine import PricingConstants
from run_etl import run_etl
from scaling import UnitScalers
from validate import validate_tree

TINY = """
# two-week market, one fold, one seed
synth.days = 20
synth.seed = 3
folds.use = 1
model.h = 2
model.n_layers = 1
train.max_epochs = 2
train.batch_size = 512
train.lr = 0.01
train.patience = 2
"""


# ---------- config ----------
def test_defaults_and_comments():
    cfg = ExperimentConfig.parse("synth.days = 12   # short\n\n# nothing here\n")
    assert cfg.get("synth.days") == 12
    assert cfg.get("train.max_epochs") == 70
    assert cfg.get("sweep.lookbacks") == (0, 60, 180, 1440)
    assert len(cfg.get("sweep.horizons")) == 11


def test_unknown_keys_and_bad_values_are_rejected():
    with pytest.raises(ConfigError, match="unknown config key 'model.depth'"):
        ExperimentConfig.parse("model.depth = 3")
    with pytest.raises(ConfigError, match="train.lr"):
        ExperimentConfig.parse("train.lr = fast")
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        ExperimentConfig.parse("just words")
    with pytest.raises(ConfigError):
        ExperimentConfig.parse("model.family = xgb")
    with pytest.raises(ConfigError):
        ExperimentConfig.load("/nonexistent.cfg")


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "x.cfg"
    path.write_text("seeds = 0,1\nmodel.h = 4\n")
    cfg = ExperimentConfig.load(str(path), ["model.h=16", "constants.c4 = 100"])
    assert cfg.get("seeds") == (0, 1)
    assert cfg.get("model.h") == 16
    assert cfg.constants() == PricingConstants(c4=100.0)
    assert "model.h = 16" in cfg.resolved()


def test_dynamic_sections():
    cfg = ExperimentConfig.parse("synth.v_sigma = 50\nsynth.start = 2023-06-01\n"
                                 "units.energy_mwh = \nunits.power_mw = v,l_id15,l_id60,e_afrr_pos,e_afrr_neg,"
                                 "e_mfrr_pos,e_mfrr_neg,c4,c5,c6,c7,c8,c9")
    assert cfg.synth_params().v_sigma == 50.0
    assert cfg.synth_params().start == "2023-06-01"
    groups = {g.name: g for g in cfg.unit_groups()}
    assert "e_mfrr_neg" in groups["power_mw"].features
    with pytest.raises(ConfigError):
        ExperimentConfig.parse("synth.wind = 3")


def test_model_values_and_grid():
    cfg = ExperimentConfig.parse("grid.mrinn.h = 8,32\nwindow.lookback = 60\nseeds = 4,5")
    assert cfg.grid("mrinn") == {"h": (8, 32)}
    assert cfg.grid("lqr") == {}
    values = cfg.model_values("mrinn", ablation="drop_mkt")
    assert values["lookback"] == 60 and values["seed"] == 4 and values["ablation"] == "drop_mkt"
    assert "h" not in cfg.model_values("lqr")


def test_output_root_precedence(monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    cfg = ExperimentConfig.parse("")
    assert str(cfg.output_root()) == "out"
    monkeypatch.setenv(OUTPUT_ENV, "/tmp/env-root")
    assert str(cfg.output_root()) == "/tmp/env-root"
    assert str(ExperimentConfig.parse("output = cfg-root").output_root()) == "cfg-root"
    assert str(cfg.output_root("cli-root")) == "cli-root"


def test_load_data_synthetic_and_csv(tmp_path):
    cfg = ExperimentConfig.parse("synth.days = 2\nsynth.seed = 1")
    data = load_data(cfg)
    assert data.info["source"] == "synthetic" and data.info["rows"] == 192
    from dataset import write_csv
    path = write_csv(data.frame, tmp_path / "m.csv")
    again = load_data(cfg.with_values({"data.path": str(path)}))
    assert again.info["source"] == "csv" and again.info["rows"] == 192 and len(again.info["sha256"]) == 64


def test_unknown_fold_is_rejected(tmp_path):
    cfg = ExperimentConfig.parse(TINY).with_values({"folds.use": "4"})
    with pytest.raises(ConfigError, match="folds.use"):
        cmd_train(cfg, tmp_path)


def test_evaluate_echoes_resolved_config(tmp_path):
    cfg = ExperimentConfig.parse(TINY)
    frame = load_data(cfg).frame
    model = MrinnModel(MrinnConfig(h=2, n_layers=1), UnitScalers().fit_frame(frame.df))
    ckpt = save_checkpoint(model, tmp_path / "checkpoint.json")
    reports = cmd_evaluate(str(ckpt), cfg, tmp_path / "eval", split="val")
    assert set(reports) == {"f1"}
    resolved = tmp_path / "eval" / "config.resolved.cfg"
    assert resolved.read_text() == cfg.resolved()
    assert (tmp_path / "eval" / "evaluate_f1_val" / "eval_report.json").exists()


# ---------- pipelines ----------
@pytest.mark.slow
def test_train_writes_valid_deterministic_runs(tmp_path):
    cfg = ExperimentConfig.parse(TINY)
    a, b = tmp_path / "a", tmp_path / "b"
    summary = cmd_train(cfg, a)
    cmd_train(cfg, b)
    assert summary.loc[0, "family"] == "mrinn" and summary.loc[0, "n_runs"] == 1
    assert validate_tree(a) == []
    runs = sorted(p.name for p in (a / "runs").iterdir())
    assert len(runs) == 1
    assert (a / "runs" / runs[0] / "checksums.txt").read_text() == (b / "runs" / runs[0] / "checksums.txt").read_text()
    assert "timing.json" not in (a / "runs" / runs[0] / "checksums.txt").read_text()
    assert (a / "config.resolved.cfg").exists()
    index = read_json(a / "index.json")
    assert index["runs"][0]["selected"] is True

    record = read_json(a / "runs" / runs[0] / "record.json")
    reports = cmd_evaluate(str(a / "runs" / runs[0] / "checkpoint.json"), cfg, tmp_path / "eval")
    assert reports["f1"] == pytest.approx(record["test"]["aql"], rel=1e-12)

    (a / "runs" / runs[0] / "record.json").write_text(json.dumps({**record, "seed": 99}))
    assert any("checksum mismatch" in p for p in validate_tree(a))


@pytest.mark.slow
def test_baselines_grid_and_comparison(tmp_path):
    cfg = ExperimentConfig.parse(TINY + "grid.mlp.hidden_size = 2,3\nbaselines = price,id15,id60,lqr,mlp\n")
    table = cmd_baseline(cfg, tmp_path)
    assert set(table["family"]) == {"naive_price", "naive_id15", "naive_id60", "lqr", "mlp"}
    assert not (tmp_path / "comparison.csv").exists()
    assert (tmp_path / "grid_mlp_f1.csv").exists()
    cmd_train(cfg, tmp_path)
    comparison = pd.read_csv(tmp_path / "comparison.csv")
    assert set(comparison["model"]) == {"naive_price", "naive_id15", "naive_id60", "lqr", "mlp", "mrinn"}
    assert comparison.set_index("model").loc["lqr", "params"] == 14
    naive = comparison.set_index("model").loc["naive_price"]
    assert naive["aqcr"] == 0.0
    assert validate_tree(tmp_path) == []

    runs = run_etl(tmp_path, tmp_path / "etl")
    assert len(runs) == len(read_json(tmp_path / "index.json")["runs"]) == 3 + 1 + 2 + 1
    artifacts = pd.read_csv(tmp_path / "etl" / "artifacts.csv")
    assert "timing.json" not in set(artifacts["name"])


@pytest.mark.slow
def test_ablation_table(tmp_path):
    df = cmd_ablate(ExperimentConfig.parse(TINY + "train.max_epochs = 1\n"), tmp_path)
    assert df["variant"].tolist() == ["All", "w/o P_bal", "w/o P_mkt", "w/o P_scar"]
    assert df.set_index("ablation").loc["none", "params"] > df.set_index("ablation").loc["drop_bal", "params"]
    assert sorted(df["rank"]) == sorted(df["aql"].rank(method="min").astype(int))
    assert (df["aqcr"] == 0.0).all()


@pytest.mark.slow
def test_sweep_tables(tmp_path):
    cfg = ExperimentConfig.parse(TINY + "train.max_epochs = 1\nsweep.lookbacks = 0,30\nsweep.horizons = 15,60\n")
    df = cmd_sweep(cfg, tmp_path)
    assert list(df.columns) == ["n", "m", "aql", "aqcr", "mae", "rmse", "n_runs", "seconds"]
    assert len(df) == 4
    assert (df["seconds"] > 0).all()
    on_disk = pd.read_csv(tmp_path / "sweep.csv")
    assert list(on_disk.columns) == list(df.columns)
    assert not (tmp_path / "sweep_timing.csv").exists()


@pytest.mark.slow
def test_sweep_loss_grows_with_horizon(tmp_path):
    cfg = ExperimentConfig.parse(
        "synth.days = 60\nsynth.seed = 1\nfolds.use = 1\nmodel.h = 4\nmodel.n_layers = 1\n"
        "train.max_epochs = 8\ntrain.batch_size = 512\ntrain.lr = 0.01\ntrain.patience = 3\n"
        "sweep.lookbacks = 0,60\nsweep.horizons = 15,180,720\n")
    df = cmd_sweep(cfg, tmp_path)
    rho = df.groupby("n").apply(lambda g: g["m"].rank().corr(g["aql"].rank()))
    assert len(rho) == 2
    assert (rho > 0).all(), rho.to_dict()


@pytest.mark.slow
def test_mrinn_beats_best_naive_baseline(tmp_path):
    # 330 days -> fold 1 trains on 220 days, above 20k quarter-hour windows
    cfg = ExperimentConfig.parse(
        "synth.days = 330\nsynth.seed = 0\nfolds.use = 1\nmodel.h = 8\nmodel.n_layers = 2\n"
        "train.max_epochs = 70\ntrain.batch_size = 1024\ntrain.lr = 0.01\ntrain.patience = 10\n"
        "baselines = price,id15,id60\n")
    cmd_baseline(cfg, tmp_path)
    cmd_train(cfg, tmp_path)
    run = next(p for p in (tmp_path / "runs").iterdir() if p.name.startswith("mrinn-"))
    assert read_json(run / "manifest.json")["samples"]["train"] >= 20000
    comparison = pd.read_csv(tmp_path / "comparison.csv").set_index("model")
    naive = comparison.loc[["naive_price", "naive_id15", "naive_id60"], "aql"]
    assert comparison.loc["mrinn", "aql"] < naive.min()
    assert comparison.loc["mrinn", "aqcr"] == 0.0
