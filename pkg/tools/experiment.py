#!/usr/bin/env python3
"""
experiment.py
Experiment configs and the run-directory pipeline behind mrinn_cli.

Config format: flat `key = value` lines, `#` starts a comment, dotted keys
name sections, lists are comma-separated. Unknown keys are rejected. Keys
(defaults in KEYS below):

  output, jobs
  data.path, data.strict, data.fill_gaps       real CSV input (empty path = synthetic)
  synth.days, synth.seed, synth.<field>        synthetic market (see dataset.SynthParams)
  folds.mode (proportional|calendar), folds.use   fold layout and which folds to run
  model.family, model.h, model.n_layers, model.hidden_size, model.ablation
  window.lookback, window.horizon              N and M in minutes
  train.*                                      see training.TrainConfig
  seeds                                        e.g. 0,1,2,3,4
  grid.mrinn.h, grid.mrinn.n_layers            grid search dimensions
  grid.mlp.hidden_size, grid.mlp.n_layers
  sweep.lookbacks, sweep.horizons
  ablations, baselines
  constants.c0 .. constants.c10                rulebook overrides
  units.<group>                                unit-group membership overrides

Run directory (<output>/runs/<run_id>/): manifest.json, record.json,
eval_report.json, checkpoint.json (trainable families), forecasts.csv,
per_quantile.csv, curve.csv, timing.json, checksums.txt. Everything except
timing.json is byte-deterministic and listed in checksums.txt.
"""

from __future__ import annotations

import os
import platform
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from artifacts import (ensure_dir, read_json, sha256_file, write_checksums, write_frame_csv, write_json,
                       write_text_atomic)
from baselines import NAIVE_COLUMNS
from dataset import FeatureFrame, FoldSpec, STEP, SynthParams, generate_synthetic, load_csv, make_folds, make_windows
from errors import ConfigError
from metrics import QUANTILES, eval_report, per_quantile_pinball
from mrinn import ABLATIONS, load_checkpoint, save_checkpoint
from pricing_engine import CONSTANT_NAMES, PricingConstants
from scaling import DEFAULT_GROUPS, groups_with_overrides
from training import (GridResult, MODEL_FAMILIES, RunRecord, Splits, TrainConfig, aggregate, build_config,
                      config_hash, grid_search, make_splits, naive_record, predict)

OUTPUT_ENV = "MRINN_OUTPUT_ROOT"
DEFAULT_OUTPUT = "out"
FORECAST_COLUMNS = [f"q{tau:.2f}" for tau in QUANTILES]
GRID_DIMS = {"mrinn": ("h", "n_layers"), "mlp": ("hidden_size", "n_layers"), "lqr": ()}
NO_GRID = {"grid.mrinn.h": "", "grid.mrinn.n_layers": ""}
VARIANT_LABELS = {"none": "All", "drop_bal": "w/o P_bal", "drop_mkt": "w/o P_mkt", "drop_scar": "w/o P_scar"}


# ---------- config ----------
_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _bool(s: str) -> bool:
    if s.lower() not in _BOOL:
        raise ValueError(f"expected true/false, got '{s}'")
    return _BOOL[s.lower()]


def _ints(s: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _strs(s: str) -> Tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _choice(*allowed: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}, got '{s}'")
        return s
    return parse


KEYS: Dict[str, Tuple[Callable[[str], object], str]] = {
    "output": (str, ""),
    "jobs": (int, "1"),
    "data.path": (str, ""),
    "data.strict": (_bool, "true"),
    "data.fill_gaps": (_bool, "false"),
    "synth.days": (int, "60"),
    "synth.seed": (int, "0"),
    "folds.mode": (_choice("proportional", "calendar"), "proportional"),
    "folds.use": (_ints, "1,2,3"),
    "model.family": (_choice(*MODEL_FAMILIES), "mrinn"),
    "model.h": (int, "8"),
    "model.n_layers": (int, "2"),
    "model.hidden_size": (int, "8"),
    "model.ablation": (_choice(*ABLATIONS), "none"),
    "window.lookback": (int, "0"),
    "window.horizon": (int, "15"),
    "train.max_epochs": (int, "70"),
    "train.batch_size": (int, "1024"),
    "train.lr": (float, "0.001"),
    "train.beta1": (float, "0.9"),
    "train.beta2": (float, "0.999"),
    "train.eps": (float, "1e-08"),
    "train.patience": (int, "10"),
    "train.shuffle": (_bool, "true"),
    "train.verbose": (_bool, "false"),
    "seeds": (_ints, "0"),
    "grid.mrinn.h": (_ints, ""),
    "grid.mrinn.n_layers": (_ints, ""),
    "grid.mlp.hidden_size": (_ints, ""),
    "grid.mlp.n_layers": (_ints, ""),
    "sweep.lookbacks": (_ints, "0,60,180,1440"),
    "sweep.horizons": (_ints, "15,30,45,60,120,180,360,540,720,1080,1440"),
    "ablations": (_strs, ",".join(ABLATIONS)),
    "baselines": (_strs, "price,id15,id60,lqr,mlp"),
}
_SYNTH_FIELDS = {f.name: f.type for f in fields(SynthParams)}
_GROUP_NAMES = [g.name for g in DEFAULT_GROUPS]


def _dynamic_parser(key: str) -> Optional[Callable[[str], object]]:
    section, _, name = key.partition(".")
    if section == "synth" and name in _SYNTH_FIELDS:
        return str if name == "start" else float
    if section == "constants" and name in CONSTANT_NAMES:
        return float
    if section == "units" and name in _GROUP_NAMES:
        return _strs
    return None


def _parser(key: str) -> Callable[[str], object]:
    if key in KEYS:
        return KEYS[key][0]
    p = _dynamic_parser(key)
    if p is None:
        raise ConfigError(f"unknown config key '{key}'")
    return p


@dataclass
class ExperimentConfig:
    raw: Dict[str, str] = field(default_factory=dict)
    source: str = "<defaults>"

    def __post_init__(self):
        self.values: Dict[str, object] = {}
        for key in sorted(set(KEYS) | set(self.raw)):
            text = self.raw.get(key, KEYS[key][1] if key in KEYS else "")
            try:
                self.values[key] = _parser(key)(text)
            except ValueError as e:
                raise ConfigError(f"{self.source}: {key} = {text}: {e}") from None

    @classmethod
    def parse(cls, text: str, source: str = "<string>") -> "ExperimentConfig":
        raw: Dict[str, str] = {}
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected 'key = value', got '{line}'")
            key, value = (s.strip() for s in line.split("=", 1))
            _parser(key)
            raw[key] = value
        return cls(raw, source)

    @classmethod
    def load(cls, path: Optional[str], overrides: Sequence[str] = ()) -> "ExperimentConfig":
        text = ""
        if path:
            if not os.path.exists(path):
                raise ConfigError(f"config file not found: {path}")
            text = Path(path).read_text(encoding="utf-8")
        cfg = cls.parse(text, path or "<cli>")
        extra = cls.parse("\n".join(overrides), "--set")
        return cls({**cfg.raw, **extra.raw}, cfg.source)

    def get(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key '{key}'")
        return self.values[key]

    def with_values(self, pairs: Mapping[str, str]) -> "ExperimentConfig":
        return ExperimentConfig({**self.raw, **pairs}, self.source)

    def resolved(self) -> str:
        lines = []
        for key in sorted(self.values):
            text = self.raw.get(key, KEYS[key][1] if key in KEYS else "")
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"

    def output_root(self, cli_value: Optional[str] = None) -> Path:
        return Path(cli_value or self.get("output") or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            max_epochs=self.get("train.max_epochs"), batch_size=self.get("train.batch_size"),
            lr=self.get("train.lr"), beta1=self.get("train.beta1"), beta2=self.get("train.beta2"),
            eps=self.get("train.eps"), patience=self.get("train.patience"), seeds=self.get("seeds"),
            shuffle=self.get("train.shuffle"), verbose=self.get("train.verbose"),
        )

    def constants(self) -> PricingConstants:
        overrides = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("constants.")}
        return PricingConstants().replace(**overrides)

    def synth_params(self) -> SynthParams:
        overrides = {k.split(".", 1)[1]: v for k, v in self.values.items()
                     if k.startswith("synth.") and k not in ("synth.days", "synth.seed")}
        return replace(SynthParams(), **overrides)

    def unit_groups(self):
        overrides = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("units.")}
        return groups_with_overrides(overrides) if overrides else list(DEFAULT_GROUPS)

    def model_values(self, family: str, **overrides) -> Dict[str, object]:
        values: Dict[str, object] = {"lookback": self.get("window.lookback"), "horizon": self.get("window.horizon"),
                                     "seed": self.get("seeds")[0]}
        if family == "mrinn":
            values.update(h=self.get("model.h"), n_layers=self.get("model.n_layers"),
                          ablation=self.get("model.ablation"))
        elif family == "mlp":
            values.update(hidden_size=self.get("model.hidden_size"), n_layers=self.get("model.n_layers"))
        values.update(overrides)
        return values

    def grid(self, family: str) -> Dict[str, Tuple[int, ...]]:
        return {dim: self.get(f"grid.{family}.{dim}") for dim in GRID_DIMS.get(family, ())
                if self.get(f"grid.{family}.{dim}")}


# ---------- data ----------
@dataclass
class DataSource:
    frame: FeatureFrame
    info: Dict[str, object]


def load_data(cfg: ExperimentConfig) -> DataSource:
    path = cfg.get("data.path")
    if path:
        frame = load_csv(path, strict=cfg.get("data.strict"), fill_gaps=cfg.get("data.fill_gaps"))
        info = {"source": "csv", "path": str(path), "sha256": sha256_file(path), "rows": len(frame),
                "dropped": frame.dropped}
    else:
        params = cfg.synth_params()
        frame = generate_synthetic(cfg.get("synth.days"), cfg.get("synth.seed"), params, cfg.constants())
        info = {"source": "synthetic", "days": cfg.get("synth.days"), "seed": cfg.get("synth.seed"),
                "params": params.as_dict(), "rows": len(frame)}
    return DataSource(frame, info)


def fold_spec(cfg: ExperimentConfig, frame: FeatureFrame) -> FoldSpec:
    if cfg.get("folds.mode") == "calendar":
        return FoldSpec.calendar()
    return FoldSpec.proportional_to(frame.ts.iloc[0], frame.ts.iloc[-1] + STEP)


def fold_splits(cfg: ExperimentConfig, data: DataSource, lookback: int, horizon: int) -> List[Splits]:
    folds = make_folds(data.frame, fold_spec(cfg, data.frame))
    use = cfg.get("folds.use")
    bad = [k for k in use if not 1 <= k <= len(folds)]
    if bad:
        raise ConfigError(f"folds.use: no fold(s) {bad} (have {len(folds)})")
    return [make_splits(folds[k - 1], lookback, horizon, cfg.unit_groups()) for k in use]


# ---------- run directories ----------
def _env() -> Dict[str, str]:
    return {"python": platform.python_version(), "numpy": np.__version__, "pandas": pd.__version__}


def forecast_frame(windows, forecasts: np.ndarray) -> pd.DataFrame:
    df = pd.DataFrame({
        "ts_origin": pd.DatetimeIndex(windows.origin).strftime("%Y-%m-%dT%H:%M:%SZ"),
        "ts_target": pd.DatetimeIndex(windows.target).strftime("%Y-%m-%dT%H:%M:%SZ"),
        "delivery": windows.delivery,
        "y": windows.y,
    })
    for j, col in enumerate(FORECAST_COLUMNS):
        df[col] = forecasts[:, j]
    return df


def write_run(out: Path, command: str, record: RunRecord, splits: Splits, data: DataSource,
              model=None, forecasts: Optional[np.ndarray] = None) -> Path:
    run_dir = ensure_dir(out / "runs" / record.run_id)
    if model is not None:
        save_checkpoint(model, run_dir / "checkpoint.json")
        forecasts = predict(model, splits.test)
    write_json(run_dir / "record.json", record.to_dict(), schema="run_record")
    write_json(run_dir / "eval_report.json", record.test.to_dict(), schema="eval_report")
    write_frame_csv(run_dir / "forecasts.csv", forecast_frame(splits.test, forecasts))
    pq = per_quantile_pinball(splits.test.y, forecasts)
    write_frame_csv(run_dir / "per_quantile.csv",
                    pd.DataFrame({"quantile": list(QUANTILES), "pinball": [pq[f"q{t:.2f}"] for t in QUANTILES]}))
    if record.curve:
        write_frame_csv(run_dir / "curve.csv", pd.DataFrame(record.curve, columns=["epoch", "train_aql", "val_aql"]))
    outputs = sorted(p.name for p in run_dir.iterdir() if p.is_file() and not p.name.startswith("."))
    outputs = [n for n in outputs if n not in ("manifest.json", "timing.json", "checksums.txt")]
    manifest = {
        "run_id": record.run_id, "command": command, "family": record.family, "fold": record.fold,
        "seed": record.seed, "config_hash": config_hash(record.config), "config": record.config,
        "window": {"lookback": splits.train.n_minutes, "horizon": splits.train.m_minutes},
        "samples": {"train": len(splits.train), "val": len(splits.val), "test": len(splits.test)},
        "data": data.info, "env": _env(), "outputs": outputs + ["manifest.json"],
    }
    write_json(run_dir / "manifest.json", manifest, schema="manifest")
    write_json(run_dir / "timing.json", record.timing())
    write_checksums(run_dir, outputs + ["manifest.json"])
    return run_dir


def update_index(out: Path, command: str, records: Sequence[RunRecord], selected: Sequence[bool]) -> Path:
    path = out / "index.json"
    entries = {e["run_id"]: e for e in read_json(path)["runs"]} if path.exists() else {}
    for rec, sel in zip(records, selected):
        entries[rec.run_id] = {"run_id": rec.run_id, "family": rec.family, "command": command,
                               "fold": rec.fold, "seed": rec.seed, "selected": bool(sel)}
    doc = {"runs": [entries[k] for k in sorted(entries)]}
    return write_json(path, doc, schema="run_index")


def write_resolved(out: Path, cfg: ExperimentConfig) -> Path:
    return write_text_atomic(ensure_dir(out) / "config.resolved.cfg", cfg.resolved())


# ---------- commands ----------
def train_family(cfg: ExperimentConfig, family: str, data: DataSource, out: Path, command: str,
                 jobs: int = 1, **model_overrides) -> List[RunRecord]:
    """Grid search per fold; every run is written, the best configuration's runs are marked selected."""
    values = cfg.model_values(family, **model_overrides)
    build_config(family, values)
    selected_records: List[RunRecord] = []
    for splits in fold_splits(cfg, data, values["lookback"], values["horizon"]):
        result: GridResult = grid_search(family, cfg.grid(family), splits, cfg.train_config(), base=values,
                                         constants=cfg.constants(), jobs=jobs)
        chosen = set(result.selected())
        for rec, model in zip(result.records, result.models):
            write_run(out, command, rec, splits, data, model=model)
        update_index(out, command, result.records, [i in chosen for i in range(len(result.records))])
        if len(result.records) > 1:
            write_frame_csv(out / f"grid_{family}_f{splits.fold}.csv", result.table())
        selected_records += [result.records[i] for i in sorted(chosen)]
    return selected_records


def cmd_train(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> pd.DataFrame:
    write_resolved(out, cfg)
    data = load_data(cfg)
    family = cfg.get("model.family")
    records = train_family(cfg, family, data, out, "train", jobs)
    summary = aggregate(records, ["family"])
    write_frame_csv(out / "summary.csv", summary)
    write_comparison(out)
    return summary


def cmd_baseline(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> pd.DataFrame:
    write_resolved(out, cfg)
    data = load_data(cfg)
    kinds = cfg.get("baselines")
    unknown = [k for k in kinds if k not in NAIVE_COLUMNS and k not in ("lqr", "mlp")]
    if unknown:
        raise ConfigError(f"baselines: unknown kind(s) {', '.join(unknown)}")
    records: List[RunRecord] = []
    naive = [k for k in kinds if k in NAIVE_COLUMNS]
    if naive:
        for splits in fold_splits(cfg, data, cfg.get("window.lookback"), cfg.get("window.horizon")):
            recs = []
            for kind in naive:
                rec, fc = naive_record(kind, splits)
                write_run(out, "baseline", rec, splits, data, forecasts=fc)
                recs.append(rec)
            update_index(out, "baseline", recs, [True] * len(recs))
            records += recs
    for family in (k for k in kinds if k in ("lqr", "mlp")):
        records += train_family(cfg, family, data, out, "baseline", jobs)
    table = aggregate(records, ["family"])
    write_frame_csv(out / "baselines.csv", table)
    write_comparison(out)
    return table


def load_records(out: Path, selected_only: bool = True) -> List[RunRecord]:
    path = out / "index.json"
    if not path.exists():
        return []
    runs = read_json(path)["runs"]
    return [RunRecord.from_dict(read_json(out / "runs" / e["run_id"] / "record.json"))
            for e in runs if e["selected"] or not selected_only]


def write_comparison(out: Path) -> Optional[Path]:
    """Side-by-side table of every family's selected runs, once an MRINN run exists."""
    records = load_records(out)
    if not any(r.family == "mrinn" for r in records):
        return None
    table = aggregate(records, ["family"])
    df = pd.DataFrame({"model": table["family"], "aql": table["aql_mean"], "aqcr": table["aqcr_mean"],
                       "mae": table["mae_mean"], "rmse": table["rmse_mean"],
                       "params": table["param_count_mean"].round().astype(int)})
    return write_frame_csv(out / "comparison.csv", df.sort_values("aql", kind="mergesort"))


def cmd_ablate(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> pd.DataFrame:
    write_resolved(out, cfg)
    data = load_data(cfg)
    rows = []
    for tag in cfg.get("ablations"):
        if tag not in ABLATIONS:
            raise ConfigError(f"ablations: unknown tag '{tag}'")
        records = train_family(cfg.with_values(NO_GRID),
                               "mrinn", data, out, "ablate", jobs, ablation=tag)
        agg = aggregate(records, ["family"]).iloc[0]
        rows.append({"variant": VARIANT_LABELS[tag], "ablation": tag, "aql": agg["aql_mean"],
                     "aqcr": agg["aqcr_mean"], "mae": agg["mae_mean"], "rmse": agg["rmse_mean"],
                     "params": int(round(agg["param_count_mean"])), "n_runs": int(agg["n_runs"])})
    df = pd.DataFrame(rows)
    df["rank"] = df["aql"].rank(method="min").astype(int)
    write_frame_csv(out / "ablation.csv", df)
    return df


def cmd_sweep(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> pd.DataFrame:
    write_resolved(out, cfg)
    data = load_data(cfg)
    base = cfg.with_values(NO_GRID)
    rows = []
    for n in cfg.get("sweep.lookbacks"):
        for m in cfg.get("sweep.horizons"):
            records = train_family(base, "mrinn", data, out, "sweep", jobs, lookback=n, horizon=m)
            agg = aggregate(records, ["family"]).iloc[0]
            rows.append({"n": n, "m": m, "aql": agg["aql_mean"], "aqcr": agg["aqcr_mean"],
                         "mae": agg["mae_mean"], "rmse": agg["rmse_mean"], "n_runs": int(agg["n_runs"]),
                         "seconds": float(np.mean([r.wall_seconds for r in records]))})
    df = pd.DataFrame(rows)
    write_frame_csv(out / "sweep.csv", df)
    return df


def cmd_evaluate(checkpoint: str, cfg: ExperimentConfig, out: Path, split: str = "test") -> Dict[str, float]:
    write_resolved(out, cfg)
    model = load_checkpoint(checkpoint)
    data = load_data(cfg)
    folds = make_folds(data.frame, fold_spec(cfg, data.frame))
    reports = {}
    for k in cfg.get("folds.use"):
        if not 1 <= k <= len(folds):
            raise ConfigError(f"folds.use: no fold {k}")
        w = make_windows(getattr(folds[k - 1], split), model.config.lookback, model.config.horizon)
        fc = predict(model, w)
        rep = eval_report(w.y, fc)
        fold_dir = ensure_dir(out / f"evaluate_f{k}_{split}")
        write_json(fold_dir / "eval_report.json", rep.to_dict(), schema="eval_report")
        write_frame_csv(fold_dir / "forecasts.csv", forecast_frame(w, fc))
        write_checksums(fold_dir, ["eval_report.json", "forecasts.csv"])
        reports[f"f{k}"] = rep.aql
    return reports
