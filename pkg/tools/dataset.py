#!/usr/bin/env python3
"""
dataset.py
CSV ingestion with schema validation, causal rolling windows for (N, M)
configurations, the 3-fold expanding-window protocol, and a seeded synthetic
market whose target column comes from the exact pricing engine.

Input CSV header (exact order):
  ts, v, e_afrr_pos, e_afrr_neg, e_mfrr_pos, e_mfrr_neg, p_afrr_pos, p_afrr_neg,
  p_mfrr_pos, p_mfrr_neg, p_voaa_pos, p_voaa_neg, p_id15, p_id60, p_da,
  l_id15, l_id60, p
Timestamps are ISO-8601 UTC on the 15-min grid. v is MW-equivalent,
activation volumes MWh, liquidity MW, prices EUR/MWh.

Lag convention: a look-back of N minutes feeds lags {t-N, ..., t-15, t}, i.e.
N/15 + 1 values per feature; the target is p at t + M.
"""

from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from errors import ConfigError, SchemaError
from pricing_engine import NONNEGATIVE_FIELDS, SNAPSHOT_FIELDS, PricingConstants, imbalance_price, MarketSnapshot
from scaling import FEATURES, UnitScalers, transform

SCHEMA_COLUMNS = ["ts", *SNAPSHOT_FIELDS, "p"]
NUMERIC_COLUMNS = SCHEMA_COLUMNS[1:]
STEP = pd.Timedelta(minutes=15)
SLOTS_PER_DAY = 96


def delivery_index(ts) -> np.ndarray:
    """Quarter-hour-of-day index 0..95."""
    t = pd.DatetimeIndex(ts)
    return np.asarray(t.hour * 4 + t.minute // 15, dtype=np.int64)


@dataclass
class FeatureFrame:
    df: pd.DataFrame
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.df)

    @property
    def ts(self) -> pd.Series:
        return self.df["ts"]

    def between(self, start, end) -> "FeatureFrame":
        m = (self.df["ts"] >= start) & (self.df["ts"] < end)
        return FeatureFrame(self.df.loc[m].reset_index(drop=True))


# ---------- CSV ----------
def _fail_or_drop(df: pd.DataFrame, bad: pd.Series, what: str, strict: bool, warnings: List[str]) -> pd.DataFrame:
    if not bad.any():
        return df
    if strict:
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise SchemaError(f"row {int(df.index[i]) + 2}: {what}")
    warnings.append(f"dropped {int(bad.sum())} row(s): {what}")
    return df.loc[~bad]


def load_csv(path, strict: bool = True, fill_gaps: bool = False, require_target: bool = True) -> FeatureFrame:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"{path}: file not found")
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    wanted = SCHEMA_COLUMNS if require_target else SCHEMA_COLUMNS[:-1]
    missing = [c for c in wanted if c not in raw.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s): {', '.join(missing)}")
    extra = [c for c in raw.columns if c not in SCHEMA_COLUMNS]
    if extra:
        raise SchemaError(f"{path}: unexpected column(s): {', '.join(extra)}")
    cols = [c for c in SCHEMA_COLUMNS if c in raw.columns]
    raw = raw[cols]

    ts = pd.to_datetime(raw["ts"], utc=True, errors="coerce", format="ISO8601")
    if ts.isna().any():
        i = int(np.flatnonzero(ts.isna().to_numpy())[0])
        raise SchemaError(f"row {i + 2}, column 'ts': unparseable timestamp '{raw['ts'].iloc[i]}'")
    df = pd.DataFrame({"ts": ts})
    for c in cols[1:]:
        df[c] = pd.to_numeric(raw[c], errors="coerce").astype(np.float64)
        if strict:
            bad = ~np.isfinite(df[c].to_numpy())
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise SchemaError(f"row {i + 2}, column '{c}': not a finite number ('{raw[c].iloc[i]}')")

    warnings: List[str] = []
    n0 = len(df)
    values = df[cols[1:]].to_numpy(dtype=np.float64)
    df = _fail_or_drop(df, pd.Series(~np.isfinite(values).all(axis=1), index=df.index),
                       "non-finite value", strict, warnings)
    negative = (df[NONNEGATIVE_FIELDS] < 0).any(axis=1)
    df = _fail_or_drop(df, negative, "negative volume or liquidity", strict, warnings)

    t = df["ts"]
    dup = t.duplicated(keep="first")
    if dup.any():
        i = int(np.flatnonzero(dup.to_numpy())[0])
        raise SchemaError(f"row {int(df.index[i]) + 2}: duplicate timestamp {t.iloc[i].isoformat()}")
    order = t.diff().dt.total_seconds().to_numpy()[1:]
    if (order < 0).any():
        i = int(np.flatnonzero(order < 0)[0]) + 1
        raise SchemaError(f"row {int(df.index[i]) + 2}: timestamps not increasing at {t.iloc[i].isoformat()}")
    misaligned = (t.dt.minute % 15 != 0) | (t.dt.second != 0) | (t.dt.microsecond != 0)
    if misaligned.any():
        i = int(np.flatnonzero(misaligned.to_numpy())[0])
        raise SchemaError(f"row {int(df.index[i]) + 2}: timestamp {t.iloc[i].isoformat()} not on the 15-min grid")

    df = df.reset_index(drop=True)
    dropped = n0 - len(df)
    gaps = np.flatnonzero(df["ts"].diff().to_numpy()[1:] > STEP.to_timedelta64()) + 1
    if len(gaps):
        first = f"{(df['ts'].iloc[gaps[0] - 1] + STEP).isoformat()} .. {df['ts'].iloc[gaps[0]].isoformat()}"
        if fill_gaps:
            grid = pd.date_range(df["ts"].iloc[0], df["ts"].iloc[-1], freq=STEP)
            filled = len(grid) - len(df)
            df = df.set_index("ts").reindex(grid).ffill().rename_axis("ts").reset_index()
            warnings.append(f"forward-filled {filled} missing row(s), first missing {first}")
        elif strict:
            raise SchemaError(f"{path}: {len(gaps)} gap(s) in the 15-min grid, first missing {first}")
        else:
            warnings.append(f"{len(gaps)} gap(s) kept, first missing {first}")
    for w in warnings:
        print(f"[dataset] WARN: {path.name}: {w}", file=sys.stderr)
    return FeatureFrame(df, dropped=dropped)


def write_csv(frame: FeatureFrame, path) -> Path:
    from artifacts import write_frame_csv
    df = frame.df.copy()
    df["ts"] = df["ts"].dt.strftime("%Y-%m-%dT%H:%M:%SZ")
    return write_frame_csv(path, df[[c for c in SCHEMA_COLUMNS if c in df.columns]])


# ---------- windows ----------
def _check_minutes(name: str, minutes: int, minimum: int) -> int:
    if minutes % 15 or minutes < minimum:
        raise ConfigError(f"{name}={minutes}: must be a multiple of 15 and >= {minimum}")
    return minutes // 15


@dataclass
class WindowSet:
    n_minutes: int
    m_minutes: int
    features: Dict[str, np.ndarray]
    y: np.ndarray
    origin: np.ndarray
    target: np.ndarray
    delivery: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_lags(self) -> int:
        return self.n_minutes // 15 + 1

    def take(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(self.n_minutes, self.m_minutes, {k: v[idx] for k, v in self.features.items()},
                         self.y[idx], self.origin[idx], self.target[idx], self.delivery[idx])

    def scaled(self, scalers: UnitScalers) -> Dict[str, np.ndarray]:
        return {k: transform(v, scalers.for_feature(k)) for k, v in self.features.items()}


def make_windows(frame: FeatureFrame, n_minutes: int, m_minutes: int,
                 features: Sequence[str] = FEATURES) -> WindowSet:
    lags = _check_minutes("N", n_minutes, 0) + 1
    steps = _check_minutes("M", m_minutes, 15)
    df = frame.df
    count = len(df) - (lags - 1) - steps
    empty_feats = {f: np.empty((0, lags)) for f in features}
    if count <= 0:
        print(f"[dataset] WARN: {len(df)} row(s) too short for N={n_minutes}, M={m_minutes}; no windows",
              file=sys.stderr)
        e = np.empty(0)
        return WindowSet(n_minutes, m_minutes, empty_feats, e, e.astype("datetime64[ns]"),
                         e.astype("datetime64[ns]"), e.astype(np.int64))
    ts = df["ts"].to_numpy(dtype="datetime64[ns]")
    start = np.arange(count)
    origin = start + lags - 1
    target = origin + steps
    span = np.timedelta64(n_minutes + m_minutes, "m")
    keep = (ts[target] - ts[start]) == span
    feats = {}
    for f in features:
        win = np.lib.stride_tricks.sliding_window_view(df[f].to_numpy(dtype=np.float64), lags)
        feats[f] = np.ascontiguousarray(win[:count][keep])
    return WindowSet(n_minutes, m_minutes, feats, df["p"].to_numpy(dtype=np.float64)[target[keep]],
                     ts[origin[keep]], ts[target[keep]], delivery_index(ts[target[keep]]))


# ---------- folds ----------
@dataclass(frozen=True)
class FoldBounds:
    train_start: pd.Timestamp
    val_start: pd.Timestamp
    test_start: pd.Timestamp
    test_end: pd.Timestamp


@dataclass(frozen=True)
class FoldSpec:
    folds: tuple
    proportional: bool = False

    @property
    def start(self) -> pd.Timestamp:
        return min(f.train_start for f in self.folds)

    @property
    def end(self) -> pd.Timestamp:
        return max(f.test_end for f in self.folds)

    @staticmethod
    def calendar() -> "FoldSpec":
        d = lambda s: pd.Timestamp(s, tz="UTC")
        edges = ["2024-09-01", "2025-01-01", "2025-05-01", "2025-09-01", "2026-01-01"]
        return FoldSpec(tuple(FoldBounds(d("2022-01-01"), d(edges[k]), d(edges[k + 1]), d(edges[k + 2]))
                              for k in range(3)))

    @staticmethod
    def proportional_to(start, end) -> "FoldSpec":
        """The 48-month layout (32/4/4 months, shifted by 4) rescaled onto [start, end)."""
        start, end = pd.Timestamp(start), pd.Timestamp(end)
        span = end - start

        def at(month: int) -> pd.Timestamp:
            return (start + span * (month / 48.0)).floor("15min")

        return FoldSpec(tuple(FoldBounds(at(0), at(32 + 4 * k), at(36 + 4 * k), at(40 + 4 * k))
                              for k in range(3)), proportional=True)


@dataclass
class Fold:
    index: int
    train: FeatureFrame
    val: FeatureFrame
    test: FeatureFrame
    bounds: FoldBounds = field(repr=False, default=None)


def make_folds(frame: FeatureFrame, spec: FoldSpec) -> List[Fold]:
    ts = frame.ts
    first, last = ts.iloc[0], ts.iloc[-1] + STEP
    if first > spec.start:
        raise SchemaError(f"frame does not cover the fold range: missing {spec.start.isoformat()} .. {first.isoformat()}")
    if last < spec.end:
        raise SchemaError(f"frame does not cover the fold range: missing {last.isoformat()} .. {spec.end.isoformat()}")
    out = []
    for k, b in enumerate(spec.folds, start=1):
        out.append(Fold(k, frame.between(b.train_start, b.val_start), frame.between(b.val_start, b.test_start),
                        frame.between(b.test_start, b.test_end), b))
    return out


# ---------- synthetic market ----------
@dataclass(frozen=True)
class SynthParams:
    start: str = "2022-01-01"
    v_theta: float = 0.1
    v_sigma: float = 110.0
    da_mean: float = 80.0
    da_amp: float = 35.0
    da_noise: float = 12.0
    id_noise: float = 10.0
    liq15_median: float = 150.0
    liq60_median: float = 250.0
    liq_sigma: float = 0.8
    act_noise: float = 4.0
    mfrr_share: float = 0.35
    spread: float = 40.0

    def v_stationary_sd(self) -> float:
        phi = 1.0 - self.v_theta
        return self.v_sigma / math.sqrt(1.0 - phi * phi)

    def as_dict(self) -> Dict[str, object]:
        return asdict(self)


def _mean_reverting(rng: np.random.Generator, n: int, p: SynthParams) -> np.ndarray:
    phi = 1.0 - p.v_theta
    eps = rng.normal(0.0, p.v_sigma, size=n)
    v = np.empty(n)
    v[0] = rng.normal(0.0, p.v_stationary_sd())
    for i in range(1, n):
        v[i] = phi * v[i - 1] + eps[i]
    return v


def generate_synthetic(n_days: int, seed: int, params: Optional[SynthParams] = None,
                       constants: Optional[PricingConstants] = None) -> FeatureFrame:
    if n_days < 1:
        raise ConfigError(f"n_days={n_days}: must be >= 1")
    p = params or SynthParams()
    c = constants or PricingConstants()
    rng = np.random.default_rng(seed)
    n = n_days * SLOTS_PER_DAY
    ts = pd.date_range(pd.Timestamp(p.start, tz="UTC"), periods=n, freq=STEP)
    q = delivery_index(ts)

    v = _mean_reverting(rng, n, p)
    p_da = p.da_mean + p.da_amp * np.sin(2 * np.pi * (q - 30) / SLOTS_PER_DAY) + rng.normal(0, p.da_noise, n)
    p_id15 = p_da + rng.normal(0, p.id_noise, n)
    p_id60 = p_da + rng.normal(0, 0.7 * p.id_noise, n)
    l_id15 = rng.lognormal(math.log(p.liq15_median), p.liq_sigma, n)
    l_id60 = rng.lognormal(math.log(p.liq60_median), p.liq_sigma, n)

    up, down = np.maximum(v, 0.0) / 4.0, np.maximum(-v, 0.0) / 4.0
    mfrr_on = rng.random((2, n)) < p.mfrr_share
    e_afrr_pos = np.maximum(0.0, (1 - p.mfrr_share) * up + rng.normal(0, p.act_noise, n))
    e_afrr_neg = np.maximum(0.0, (1 - p.mfrr_share) * down + rng.normal(0, p.act_noise, n))
    e_mfrr_pos = np.where(mfrr_on[0], np.maximum(0.0, p.mfrr_share * up + rng.normal(0, p.act_noise, n)), 0.0)
    e_mfrr_neg = np.where(mfrr_on[1], np.maximum(0.0, p.mfrr_share * down + rng.normal(0, p.act_noise, n)), 0.0)

    spread = rng.gamma(2.0, p.spread / 2.0, size=(4, n))
    p_afrr_pos = p_id15 + spread[0]
    p_mfrr_pos = p_id15 + 1.5 * spread[1]
    p_afrr_neg = p_id15 - spread[2]
    p_mfrr_neg = p_id15 - 1.5 * spread[3]

    df = pd.DataFrame({
        "ts": ts, "v": v,
        "e_afrr_pos": e_afrr_pos, "e_afrr_neg": e_afrr_neg, "e_mfrr_pos": e_mfrr_pos, "e_mfrr_neg": e_mfrr_neg,
        "p_afrr_pos": p_afrr_pos, "p_afrr_neg": p_afrr_neg, "p_mfrr_pos": p_mfrr_pos, "p_mfrr_neg": p_mfrr_neg,
        "p_voaa_pos": np.minimum(p_afrr_pos, p_mfrr_pos), "p_voaa_neg": np.maximum(p_afrr_neg, p_mfrr_neg),
        "p_id15": p_id15, "p_id60": p_id60, "p_da": p_da, "l_id15": l_id15, "l_id60": l_id60,
    })
    df[SNAPSHOT_FIELDS] = df[SNAPSHOT_FIELDS].round(3)
    df["p"] = [imbalance_price(MarketSnapshot.from_row(r), c).p_final for r in df.to_dict("records")]
    return FeatureFrame(df)
