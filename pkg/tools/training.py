#!/usr/bin/env python3
"""
training.py
Seeded mini-batch Adam on the average quantile loss, validation-based
checkpoint selection with early stopping, grid search and seed/fold
aggregation.

Determinism: the sample order of epoch e is default_rng([seed, e]).permutation,
model init uses the config seed, and every run owns its tape, model and RNG.
Grid cells run in a process pool when jobs > 1; records come back in
submission order.

Losses are computed in the price-scaled space; reported AQL values are in
EUR/MWh (pinball loss is shift invariant and scales with the price IQR).
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from autodiff import Tape, backward
from baselines import FAMILIES as BASELINE_FAMILIES, calibrate_bands
from dataset import Fold, WindowSet, make_windows
from errors import ConfigError, InputError, NumericalError, TrainingDivergence
from metrics import EvalReport, aql, aql_node, eval_report
from mrinn import MrinnConfig, MrinnModel, forward
from pricing_engine import PricingConstants
from scaling import DEFAULT_GROUPS, UnitScalers, transform

MODEL_FAMILIES = {"mrinn": (MrinnConfig, MrinnModel), **BASELINE_FAMILIES}
METRICS = ["aql", "aqcr", "mae", "rmse"]


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 70
    batch_size: int = 1024
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    seeds: Tuple[int, ...] = (0,)
    shuffle: bool = True
    verbose: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size={self.batch_size}: must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs={self.max_epochs}: must be >= 1")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigError(f"patience={self.patience}: must be in [1, max_epochs={self.max_epochs}]")
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ConfigError(f"lr={self.lr}: must be finite and >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam needs beta1, beta2 in [0, 1) and eps > 0")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")

    def as_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d.pop("verbose")
        return d


# ---------- optimizer ----------
@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @staticmethod
    def zeros_like(params: Sequence[np.ndarray]) -> "AdamState":
        return AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place Adam update with bias correction."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ConfigError("adam_step: parameter and gradient shapes differ")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence("non-finite gradient")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def model_params(model) -> List[np.ndarray]:
    out = []
    for d in model.layers():
        out += [d.weights, d.bias]
    return out


# ---------- splits ----------
@dataclass
class Splits:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    scalers: UnitScalers
    fold: int = 1


def make_splits(fold: Fold, n_minutes: int, m_minutes: int, groups=DEFAULT_GROUPS) -> Splits:
    """Windows per split; scalers see the training rows only."""
    scalers = UnitScalers(groups).fit_frame(fold.train.df)
    parts = [make_windows(f, n_minutes, m_minutes) for f in (fold.train, fold.val, fold.test)]
    for name, w in zip(("train", "val", "test"), parts):
        if len(w) == 0:
            raise InputError(f"fold {fold.index}: {name} split has no windows for N={n_minutes}, M={m_minutes}")
    return Splits(*parts, scalers=scalers, fold=fold.index)


# ---------- runs ----------
def config_hash(config: Mapping[str, object]) -> str:
    payload = {k: v for k, v in config.items() if k != "seed"}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:8]


def run_id(family: str, config: Mapping[str, object], seed: int, fold: int) -> str:
    return f"{family}-{config_hash(config)}-s{seed}-f{fold}"


@dataclass
class RunRecord:
    run_id: str
    family: str
    config: Dict[str, object]
    train_config: Dict[str, object]
    seed: int
    fold: int
    curve: List[Dict[str, float]]
    initial: Dict[str, float]
    best_epoch: int
    stopped_epoch: int
    test: EvalReport
    param_count: int
    wall_seconds: float = field(default=0.0, compare=False)
    inference_seconds: float = field(default=0.0, compare=False)

    @property
    def best_val_aql(self) -> float:
        if not self.curve:
            return self.initial["val_aql"]
        return next(c["val_aql"] for c in self.curve if c["epoch"] == self.best_epoch)

    def to_dict(self) -> Dict[str, object]:
        """Deterministic part only; timings go to timing.json."""
        return {
            "run_id": self.run_id, "family": self.family, "config": self.config,
            "train_config": self.train_config, "seed": self.seed, "fold": self.fold,
            "curve": self.curve, "initial": self.initial, "best_epoch": self.best_epoch,
            "best_val_aql": self.best_val_aql, "stopped_epoch": self.stopped_epoch,
            "test": self.test.to_dict(), "param_count": self.param_count,
        }

    @staticmethod
    def from_dict(d: Mapping[str, object]) -> "RunRecord":
        return RunRecord(
            run_id=d["run_id"], family=d["family"], config=dict(d["config"]),
            train_config=dict(d["train_config"]), seed=int(d["seed"]), fold=int(d["fold"]),
            curve=[dict(c) for c in d["curve"]], initial=dict(d["initial"]),
            best_epoch=int(d["best_epoch"]), stopped_epoch=int(d["stopped_epoch"]),
            test=EvalReport.from_dict(d["test"]), param_count=int(d["param_count"]),
        )

    def timing(self) -> Dict[str, float]:
        return {"wall_seconds": self.wall_seconds, "inference_seconds": self.inference_seconds}


def make_model(family: str, config, scalers: Optional[UnitScalers] = None,
               constants: Optional[PricingConstants] = None):
    if family not in MODEL_FAMILIES:
        raise ConfigError(f"unknown model family '{family}' (expected one of {', '.join(MODEL_FAMILIES)})")
    _, model_cls = MODEL_FAMILIES[family]
    return model_cls(config, scalers, constants)


def build_config(family: str, values: Mapping[str, object]):
    if family not in MODEL_FAMILIES:
        raise ConfigError(f"unknown model family '{family}'")
    config_cls, _ = MODEL_FAMILIES[family]
    try:
        return config_cls(**values)
    except TypeError as e:
        raise ConfigError(f"{family}: {e}") from None


def predict(model, windows: WindowSet, batch_size: int = 4096) -> np.ndarray:
    """(n, 7) forecast matrix in EUR/MWh."""
    scaled = windows.scaled(model._require_scalers())
    n = len(windows)
    out = []
    for lo in range(0, n, batch_size):
        out.append(forward({f: x[lo:lo + batch_size] for f, x in scaled.items()}, model))
    return np.vstack(out) if out else np.empty((0, 7))


def _snapshot(model) -> List[np.ndarray]:
    return [p.copy() for p in model_params(model)]


def _restore(model, snap: Sequence[np.ndarray]) -> None:
    for p, s in zip(model_params(model), snap):
        p[...] = s


def train(model, splits: Splits, config: TrainConfig, rid: str = "") -> RunRecord:
    """Adam on AQL; best-by-val checkpoint restored and scored once on test."""
    if model.scalers is None or not model.scalers.fitted:
        raise InputError("train: model scalers must be fitted on the training split first")
    t0 = time.perf_counter()
    seed = int(getattr(model.config, "seed", 0))
    rid = rid or run_id(model.family, model.config.as_dict(), seed, splits.fold)
    price = model.scalers.for_feature("p")
    X = splits.train.scaled(model.scalers)
    y = transform(splits.train.y, price)
    n = len(y)
    params = model_params(model)
    state = AdamState.zeros_like(params)

    def score(windows: WindowSet, epoch: int) -> float:
        try:
            value = aql(windows.y, predict(model, windows))
        except NumericalError as e:
            raise TrainingDivergence(f"evaluation failed: {e}", rid, epoch) from None
        if not math.isfinite(value):
            raise TrainingDivergence("non-finite evaluation loss", rid, epoch)
        return value

    initial = {"train_aql": score(splits.train, 0), "val_aql": score(splits.val, 0)}
    curve: List[Dict[str, float]] = []
    best_val, best_epoch, best = math.inf, 0, _snapshot(model)
    stale, epoch = 0, 0
    for epoch in range(1, config.max_epochs + 1):
        total = 0.0
        order = np.random.default_rng([seed, epoch]).permutation(n) if config.shuffle else np.arange(n)
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            tape = Tape()
            try:
                outs, bound = model.build(tape, {f: x[idx] for f, x in X.items()})
                loss = aql_node(tape.input(y[idx]), outs)
            except NumericalError as e:
                raise TrainingDivergence(f"forward pass failed: {e}", rid, epoch, b) from None
            if not math.isfinite(float(loss.data)):
                raise TrainingDivergence("non-finite loss", rid, epoch, b)
            total += float(loss.data) * len(idx)
            grads = backward(tape, loss)
            flat = []
            for d in model.layers():
                flat += list(bound[d.name].gradient_arrays(grads))
            try:
                adam_step(params, flat, state, config.lr, config.beta1, config.beta2, config.eps)
            except TrainingDivergence as e:
                raise TrainingDivergence(str(e), rid, epoch, b) from None
        # batch losses are in scaled units; the running mean is the epoch train AQL
        point = {"epoch": epoch, "train_aql": total / n * price.scale, "val_aql": score(splits.val, epoch)}
        curve.append(point)
        if config.verbose:
            print(f"[train] {rid} epoch {epoch}: train_aql={point['train_aql']:.4f} val_aql={point['val_aql']:.4f}")
        if point["val_aql"] < best_val:
            best_val, best_epoch, best, stale = point["val_aql"], epoch, _snapshot(model), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    _restore(model, best)
    t1 = time.perf_counter()
    test = eval_report(splits.test.y, predict(model, splits.test))
    t2 = time.perf_counter()
    return RunRecord(rid, model.family, model.config.as_dict(), config.as_dict(), seed, splits.fold,
                     curve, initial, best_epoch, epoch, test, model.param_count(),
                     wall_seconds=t2 - t0, inference_seconds=t2 - t1)


def naive_record(kind: str, splits: Splits) -> Tuple[RunRecord, np.ndarray]:
    """Naive band baseline as a run record (no curve), plus its test forecasts."""
    bands = calibrate_bands(kind, splits.train)
    family = f"naive_{kind}"
    cfg = {"kind": kind, "lookback": splits.train.n_minutes, "horizon": splits.train.m_minutes}
    initial = {"train_aql": aql(splits.train.y, bands.forecast(splits.train)),
               "val_aql": aql(splits.val.y, bands.forecast(splits.val))}
    fc = bands.forecast(splits.test)
    rec = RunRecord(run_id(family, cfg, 0, splits.fold), family, cfg, {}, 0, splits.fold, [], initial,
                    0, 0, eval_report(splits.test.y, fc), 0)
    return rec, fc


# ---------- grid search ----------
@dataclass
class GridResult:
    best: RunRecord
    records: List[RunRecord]
    skipped: List[Tuple[Dict[str, object], str]]
    models: List[object] = field(default_factory=list, repr=False)

    def best_model(self):
        return next(m for r, m in zip(self.records, self.models) if r is self.best)

    def selected(self) -> List[int]:
        """Indices of every seed of the best configuration."""
        h = config_hash(self.best.config)
        return [i for i, r in enumerate(self.records) if config_hash(r.config) == h]

    def table(self) -> pd.DataFrame:
        return records_frame(self.records)


def expand_grid(grid: Mapping[str, Sequence[object]]) -> List[Dict[str, object]]:
    empty = [k for k, v in grid.items() if len(v) == 0]
    if empty:
        raise ConfigError(f"grid dimension(s) without values: {', '.join(empty)}")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _run_task(task) -> Tuple[RunRecord, object]:
    family, config, splits, train_config, constants = task
    model = make_model(family, config, splits.scalers, constants)
    return train(model, splits, train_config), model


def run_tasks(tasks: Sequence[tuple], jobs: int = 1) -> List[Tuple[RunRecord, object]]:
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_task, tasks))


def _selection_key(rec: RunRecord):
    return (rec.best_val_aql, rec.param_count, json.dumps(rec.config, sort_keys=True))


def select_best(records: Sequence[RunRecord]) -> RunRecord:
    if not records:
        raise ConfigError("no runs to select from")
    return min(records, key=_selection_key)


def grid_search(family: str, grid: Mapping[str, Sequence[object]], splits: Splits, config: TrainConfig,
                base: Optional[Mapping[str, object]] = None, constants: Optional[PricingConstants] = None,
                jobs: int = 1) -> GridResult:
    """Every valid combination x every seed; invalid combinations are skipped with a reason."""
    base = dict(base or {})
    tasks, skipped = [], []
    for combo in expand_grid(grid):
        values = {**base, **combo}
        try:
            cfg = build_config(family, values)
            if cfg.n_lags != splits.train.n_lags:
                raise ConfigError(f"lookback={cfg.lookback} does not match the windows "
                                  f"(N={splits.train.n_minutes})")
            if cfg.horizon != splits.train.m_minutes:
                raise ConfigError(f"horizon={cfg.horizon} does not match the windows (M={splits.train.m_minutes})")
        except ConfigError as e:
            print(f"[grid] WARN: skipping {family} {json.dumps(combo, sort_keys=True)}: {e}", file=sys.stderr)
            skipped.append((combo, str(e)))
            continue
        for s in config.seeds:
            tasks.append((family, replace(cfg, seed=s), splits, config, constants))
    if not tasks:
        raise ConfigError(f"{family}: every grid combination is invalid")
    done = run_tasks(tasks, jobs)
    records = [r for r, _ in done]
    best = select_best(records)
    print(f"[grid] {family}: {len(records)} run(s), {len(skipped)} skipped, best {best.run_id} "
          f"val_aql={best.best_val_aql:.4f}")
    return GridResult(best, records, skipped, [m for _, m in done])


# ---------- aggregation ----------
def records_frame(records: Sequence[RunRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        row = {"run_id": r.run_id, "family": r.family, "seed": r.seed, "fold": r.fold,
               "param_count": r.param_count, "best_epoch": r.best_epoch, "val_aql": r.best_val_aql}
        row.update({f"cfg.{k}": v for k, v in sorted(r.config.items()) if k != "seed"})
        row.update({m: getattr(r.test, m) for m in METRICS})
        rows.append(row)
    return pd.DataFrame(rows)


def aggregate(records: Sequence[RunRecord], keys: Sequence[str] = ("family",)) -> pd.DataFrame:
    """Per-group mean and population std (ddof=0) of each test metric."""
    if not records:
        raise InputError("aggregate: no records")
    df = records_frame(records)
    keys = list(keys)
    missing = [k for k in keys if k not in df.columns]
    if missing:
        raise ConfigError(f"aggregate: unknown group key(s) {', '.join(missing)}")
    g = df.groupby(keys, sort=True, dropna=False)
    mean = g[METRICS + ["param_count"]].mean().add_suffix("_mean")
    std = g[METRICS].std(ddof=0).add_suffix("_std")
    out = mean.join(std)
    out["n_runs"] = g.size()
    return out.reset_index()
