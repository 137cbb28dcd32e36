#!/usr/bin/env python3
"""
pricing_engine.py
Exact imbalance settlement rulebook: the imbalance price of a 15-min period is
the min (V<0) or max (V>=0) over a balancing-energy component, an exchange
market-reference component and a scarcity component.

All arithmetic is float64 with no rounding of intermediates. Every function is
pure, so the engine can be called from any number of threads.

v is an average-power signal (MW-equivalent) on the same scale as the
thresholds c4..c9. v == 0 takes the ">= 0" branch in both the final extremum
and the balancing component (so no activation at v == 0 prices at p_voaa_pos).
"""

from __future__ import annotations

import argparse
import json
import math
from dataclasses import asdict, dataclass, fields
from datetime import datetime
from typing import Dict, List, Mapping, Optional, Tuple

from errors import ConfigError, PricingError, SchemaError

CONSTANT_NAMES = ["c0", "c1", "c2", "c3", "c4", "c5", "c6", "c7", "c8", "c9", "c10"]

SNAPSHOT_FIELDS = [
    "v",
    "e_afrr_pos", "e_afrr_neg", "e_mfrr_pos", "e_mfrr_neg",
    "p_afrr_pos", "p_afrr_neg", "p_mfrr_pos", "p_mfrr_neg",
    "p_voaa_pos", "p_voaa_neg",
    "p_id15", "p_id60", "p_da",
    "l_id15", "l_id60",
]
NONNEGATIVE_FIELDS = ["e_afrr_pos", "e_afrr_neg", "e_mfrr_pos", "e_mfrr_neg", "l_id15", "l_id60"]

BREAKDOWN_COLUMNS = ["ts", "p_bal", "p_mkt", "p_scar", "p_base", "w_id15", "w_id60", "w_da", "ramp", "p_final"]


@dataclass(frozen=True)
class PricingConstants:
    c0: float = 0.1
    c1: float = 5.0
    c2: float = 10.0
    c3: float = 15.0
    c4: float = 50.0
    c5: float = 200.0
    c6: float = 200.0
    c7: float = 200.0
    c8: float = 800.0
    c9: float = 1000.0
    c10: float = 1000.0

    def __post_init__(self):
        for name in CONSTANT_NAMES:
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ConfigError(f"constant {name}={val} must be finite and > 0")
        if not (self.c7 < self.c8 < self.c9):
            raise ConfigError(f"constants need c7 < c8 < c9, got {self.c7}, {self.c8}, {self.c9}")

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)

    def replace(self, **overrides: float) -> "PricingConstants":
        unknown = sorted(set(overrides) - set(CONSTANT_NAMES))
        if unknown:
            raise ConfigError(f"unknown constant(s): {', '.join(unknown)}")
        merged = {**self.as_dict(), **{k: float(v) for k, v in overrides.items()}}
        return PricingConstants(**merged)


@dataclass(frozen=True)
class MarketSnapshot:
    ts: datetime
    v: float
    e_afrr_pos: float
    e_afrr_neg: float
    e_mfrr_pos: float
    e_mfrr_neg: float
    p_afrr_pos: float
    p_afrr_neg: float
    p_mfrr_pos: float
    p_mfrr_neg: float
    p_voaa_pos: float
    p_voaa_neg: float
    p_id15: float
    p_id60: float
    p_da: float
    l_id15: float
    l_id60: float
    p_observed: Optional[float] = None

    def validate(self) -> "MarketSnapshot":
        for name in SNAPSHOT_FIELDS:
            val = getattr(self, name)
            if not math.isfinite(val):
                raise SchemaError(f"{self.ts}: field '{name}' is not finite ({val})")
        for name in NONNEGATIVE_FIELDS:
            if getattr(self, name) < 0:
                raise SchemaError(f"{self.ts}: field '{name}' must be >= 0 ({getattr(self, name)})")
        if self.p_observed is not None and not math.isfinite(self.p_observed):
            raise SchemaError(f"{self.ts}: field 'p' is not finite ({self.p_observed})")
        ts = self.ts
        if ts.minute % 15 or ts.second or ts.microsecond:
            raise SchemaError(f"timestamp {ts} is not aligned to the 15-min grid")
        return self

    @classmethod
    def from_row(cls, row: Mapping[str, object]) -> "MarketSnapshot":
        missing = [k for k in ["ts", *SNAPSHOT_FIELDS] if k not in row]
        if missing:
            raise SchemaError(f"snapshot row missing column(s): {', '.join(missing)}")
        p = row.get("p")
        kwargs = {k: float(row[k]) for k in SNAPSHOT_FIELDS}
        return cls(ts=row["ts"], p_observed=None if p is None else float(p), **kwargs)


@dataclass(frozen=True)
class PriceBreakdown:
    p_bal: float
    p_mkt: float
    p_scar: float
    p_base: float
    p_act_pos: Optional[float]
    p_act_neg: Optional[float]
    i_pos: bool
    i_neg: bool
    w_id15: float
    w_id60: float
    w_da: float
    ramp_value: float
    p_final: float

    def row(self, ts) -> Dict[str, object]:
        return {"ts": ts, "p_bal": self.p_bal, "p_mkt": self.p_mkt, "p_scar": self.p_scar,
                "p_base": self.p_base, "w_id15": self.w_id15, "w_id60": self.w_id60,
                "w_da": self.w_da, "ramp": self.ramp_value, "p_final": self.p_final}


# ---------- balancing-energy component ----------
def activation_price(e_afrr: float, p_afrr: float, e_mfrr: float, p_mfrr: float) -> float:
    total = e_afrr + e_mfrr
    if not total > 0:
        raise PricingError("no activation in direction")
    return (e_afrr * p_afrr + e_mfrr * p_mfrr) / total


def activation_indicator(e_afrr: float, e_mfrr: float) -> bool:
    return e_afrr + e_mfrr > 0


def _activation_prices(s: MarketSnapshot) -> Tuple[bool, bool, Optional[float], Optional[float]]:
    i_pos = activation_indicator(s.e_afrr_pos, s.e_mfrr_pos)
    i_neg = activation_indicator(s.e_afrr_neg, s.e_mfrr_neg)
    p_pos = activation_price(s.e_afrr_pos, s.p_afrr_pos, s.e_mfrr_pos, s.p_mfrr_pos) if i_pos else None
    p_neg = activation_price(s.e_afrr_neg, s.p_afrr_neg, s.e_mfrr_neg, s.p_mfrr_neg) if i_neg else None
    return i_pos, i_neg, p_pos, p_neg


def select_balancing(i_pos: bool, i_neg: bool, v: float, p_act_pos: Optional[float],
                     p_act_neg: Optional[float], p_voaa_pos: float, p_voaa_neg: float) -> float:
    """The six rows of the balancing rule, keyed on the two indicators and sign(v)."""
    if i_pos and i_neg:
        return p_act_pos if v >= 0 else p_act_neg
    if i_pos:
        return p_act_pos
    if i_neg:
        return p_act_neg
    return p_voaa_pos if v >= 0 else p_voaa_neg


def balancing_component(s: MarketSnapshot) -> float:
    i_pos, i_neg, p_pos, p_neg = _activation_prices(s)
    return select_balancing(i_pos, i_neg, s.v, p_pos, p_neg, s.p_voaa_pos, s.p_voaa_neg)


# ---------- market-reference component ----------
def ramp(v: float, c: PricingConstants) -> float:
    if v < -c.c4:
        return -1.0
    if v > c.c4:
        return 1.0
    return v / c.c4


def marked_price(p: float, v: float, floor_offset: float, c: PricingConstants) -> float:
    return p + ramp(v, c) * max(floor_offset, c.c0 * abs(p))


def liquidity_weights(l_id15: float, l_id60: float, c: PricingConstants) -> Tuple[float, float, float]:
    w15 = min(1.0, l_id15 / c.c5)
    w60 = min(1.0 - w15, l_id60 / c.c6)
    return w15, w60, 1.0 - w15 - w60


def market_component(s: MarketSnapshot, c: PricingConstants) -> float:
    w15, w60, wda = liquidity_weights(s.l_id15, s.l_id60, c)
    return (w15 * marked_price(s.p_id15, s.v, c.c1, c)
            + w60 * marked_price(s.p_id60, s.v, c.c2, c)
            + wda * marked_price(s.p_da, s.v, c.c3, c))


def base_price(s: MarketSnapshot, c: PricingConstants) -> float:
    w15, w60, wda = liquidity_weights(s.l_id15, s.l_id60, c)
    return w15 * s.p_id15 + w60 * s.p_id60 + wda * s.p_da


# ---------- scarcity component ----------
def scarcity_adjustment(v: float, c: PricingConstants) -> float:
    a = abs(v)
    if a <= c.c7:
        return 0.0
    reach = min(a, c.c8)
    sign = 1.0 if v > 0 else -1.0
    return sign * c.c10 * ((reach - c.c7) / (c.c9 - c.c7)) ** 3


def scarcity_component(s: MarketSnapshot, c: PricingConstants) -> float:
    return base_price(s, c) + scarcity_adjustment(s.v, c)


# ---------- final price ----------
def extremum(v: float, p_bal: float, p_mkt: float, p_scar: float) -> float:
    if v < 0:
        return min(p_bal, p_mkt, p_scar)
    return max(p_bal, p_mkt, p_scar)


def imbalance_price(s: MarketSnapshot, c: PricingConstants) -> PriceBreakdown:
    i_pos, i_neg, p_pos, p_neg = _activation_prices(s)
    p_bal = select_balancing(i_pos, i_neg, s.v, p_pos, p_neg, s.p_voaa_pos, s.p_voaa_neg)
    w15, w60, wda = liquidity_weights(s.l_id15, s.l_id60, c)
    p_mkt = (w15 * marked_price(s.p_id15, s.v, c.c1, c)
             + w60 * marked_price(s.p_id60, s.v, c.c2, c)
             + wda * marked_price(s.p_da, s.v, c.c3, c))
    p_base = w15 * s.p_id15 + w60 * s.p_id60 + wda * s.p_da
    p_scar = p_base + scarcity_adjustment(s.v, c)
    return PriceBreakdown(
        p_bal=p_bal, p_mkt=p_mkt, p_scar=p_scar, p_base=p_base,
        p_act_pos=p_pos, p_act_neg=p_neg, i_pos=i_pos, i_neg=i_neg,
        w_id15=w15, w_id60=w60, w_da=wda, ramp_value=ramp(s.v, c),
        p_final=extremum(s.v, p_bal, p_mkt, p_scar),
    )


# ---------- batch mode ----------
def load_constants(path: Optional[str], base: Optional[PricingConstants] = None) -> PricingConstants:
    """Read a JSON overrides file (any subset of c0..c10), schema-checked."""
    base = base or PricingConstants()
    if not path:
        return base
    from artifacts import read_json, validate_json
    overrides = read_json(path)
    validate_json(overrides, "constants")
    return base.replace(**overrides)


def price_rows(rows: List[Mapping[str, object]], c: PricingConstants) -> List[Dict[str, object]]:
    out = []
    for i, row in enumerate(rows):
        try:
            snap = MarketSnapshot.from_row(row).validate()
        except SchemaError as e:
            raise SchemaError(f"row {i}: {e}") from None
        out.append(imbalance_price(snap, c).row(row["ts"]))
    return out


def price_frame(frame, c: PricingConstants):
    """Breakdown DataFrame (BREAKDOWN_COLUMNS) for a frame with the snapshot columns."""
    import pandas as pd
    rows = price_rows(frame.to_dict("records"), c)
    return pd.DataFrame(rows, columns=BREAKDOWN_COLUMNS)


def main():
    ap = argparse.ArgumentParser(description="Price one snapshot given as JSON.")
    ap.add_argument("snapshot", help="JSON object with ts and the snapshot fields")
    ap.add_argument("--constants", default=None, help="JSON overrides for c0..c10")
    args = ap.parse_args()
    row = json.loads(args.snapshot)
    row["ts"] = datetime.fromisoformat(row["ts"])
    snap = MarketSnapshot.from_row(row).validate()
    bd = imbalance_price(snap, load_constants(args.constants))
    print(json.dumps({f.name: getattr(bd, f.name) for f in fields(bd)}, indent=2))


if __name__ == "__main__":
    main()
