#!/usr/bin/env python3
"""
baselines.py
Reference forecasters:
  - naive persistence of the imbalance price, the ID15 index or the ID60
    index, widened into quantiles by residual percentiles per delivery time
  - linear quantile regression (LQR): one affine map a_tau * x + b_tau per
    quantile on the latest price, 14 parameters
  - MLP: tanh trunk on the lagged price vector with 7 independent linear
    heads (no ordering constraint, so quantiles may cross)

LQR and MLP expose the same graph interface as MrinnModel (layers,
param_count, build) and train with the same loop.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from autodiff import Dense, DenseLayer, Tape, Value, dense_apply
from errors import ConfigError, InputError
from metrics import QUANTILES
from pricing_engine import PricingConstants
from scaling import UnitScalers

NAIVE_COLUMNS = {"price": "p", "id15": "p_id15", "id60": "p_id60"}
N_DELIVERY = 96


# ---------- naive persistence ----------
def naive_forecast(kind: str, window) -> np.ndarray:
    """Latest value of the persisted column, one per sample."""
    if kind not in NAIVE_COLUMNS:
        raise ConfigError(f"unknown naive kind '{kind}' (expected one of {', '.join(NAIVE_COLUMNS)})")
    return np.asarray(window.features[NAIVE_COLUMNS[kind]][:, -1], dtype=np.float64)


@dataclass
class ResidualBands:
    kind: str
    offsets: np.ndarray
    pooled: np.ndarray
    global_offsets: np.ndarray = field(repr=False)

    @property
    def fallback_count(self) -> int:
        return int(self.pooled.sum())

    def forecast(self, window) -> np.ndarray:
        point = naive_forecast(self.kind, window)
        return point[:, None] + self.offsets[np.asarray(window.delivery, dtype=np.int64)]

    def to_dict(self) -> Dict[str, object]:
        return {"kind": self.kind, "offsets": self.offsets.tolist(), "pooled": self.pooled.tolist(),
                "global_offsets": self.global_offsets.tolist()}


def _percentiles(residuals) -> np.ndarray:
    return np.percentile(np.asarray(residuals, dtype=np.float64), [100.0 * q for q in QUANTILES])


def calibrate_bands(kind: str, train) -> ResidualBands:
    """Residual percentiles at every quantile level, one row per delivery time (train windows only)."""
    if len(train) == 0:
        raise InputError(f"naive-{kind}: no training windows to calibrate bands")
    res = pd.DataFrame({"delivery": np.asarray(train.delivery, dtype=np.int64),
                        "r": train.y - naive_forecast(kind, train)})
    per_slot = res.groupby("delivery")["r"].quantile(list(QUANTILES)).unstack()
    global_offsets = _percentiles(res["r"])
    offsets = np.tile(global_offsets, (N_DELIVERY, 1))
    pooled = np.ones(N_DELIVERY, dtype=bool)
    idx = per_slot.index.to_numpy(dtype=np.int64)
    offsets[idx] = per_slot.to_numpy(dtype=np.float64)
    pooled[idx] = False
    if pooled.any():
        print(f"[baselines] WARN: naive-{kind}: {int(pooled.sum())} delivery time(s) without training "
              f"residuals use the global pool", file=sys.stderr)
    return ResidualBands(kind, offsets, pooled, global_offsets)


# ---------- trainable baselines ----------
@dataclass(frozen=True)
class LqrConfig:
    lookback: int = 0
    horizon: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.lookback < 0 or self.lookback % 15:
            raise ConfigError(f"lookback={self.lookback}: must be a non-negative multiple of 15")
        if self.horizon < 15 or self.horizon % 15:
            raise ConfigError(f"horizon={self.horizon}: must be a positive multiple of 15")

    @property
    def n_lags(self) -> int:
        return self.lookback // 15 + 1

    def as_dict(self) -> Dict[str, object]:
        return asdict(self)


@dataclass(frozen=True)
class MlpConfig(LqrConfig):
    hidden_size: int = 8
    n_layers: int = 2

    def __post_init__(self):
        super().__post_init__()
        if self.hidden_size < 1:
            raise ConfigError(f"hidden_size={self.hidden_size}: must be >= 1")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers={self.n_layers}: must be >= 1")


class _PriceHistoryModel:
    """Shared plumbing for models that read only the lagged price."""
    family = ""
    features = ["p"]

    def __init__(self, config, scalers: Optional[UnitScalers] = None,
                 constants: Optional[PricingConstants] = None):
        self.config = config
        self.scalers = scalers
        self.constants = constants or PricingConstants()

    @property
    def n_lags(self) -> int:
        return self.config.n_lags

    def layers(self) -> List[Dense]:
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(d.param_count() for d in self.layers())

    def bind(self, tape: Tape) -> Dict[str, DenseLayer]:
        return {d.name: d.bind(tape) for d in self.layers()}

    def _require_scalers(self) -> UnitScalers:
        if self.scalers is None or not self.scalers.fitted:
            raise InputError("model scalers are not fitted")
        return self.scalers

    def _price_inputs(self, tape: Tape, batch: Mapping[str, np.ndarray]) -> List[Value]:
        if "p" not in batch:
            raise ConfigError("feature 'p' missing from the input window")
        x = np.asarray(batch["p"], dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        return [tape.input(x[:, j]) for j in range(x.shape[1])]


class LqrModel(_PriceHistoryModel):
    family = "lqr"

    def __init__(self, config: LqrConfig, scalers=None, constants=None):
        super().__init__(config, scalers, constants)
        rng = np.random.default_rng(config.seed)
        self.heads = [Dense.glorot(f"lqr.q{tau:.2f}", 1, 1, rng) for tau in QUANTILES]

    def layers(self) -> List[Dense]:
        return list(self.heads)

    def build(self, tape: Tape, batch) -> Tuple[List[Value], Dict[str, DenseLayer]]:
        bound = self.bind(tape)
        x = self._price_inputs(tape, batch)[-1:]
        return [dense_apply(bound[d.name], x)[0] for d in self.heads], bound


class MlpModel(_PriceHistoryModel):
    family = "mlp"

    def __init__(self, config: MlpConfig, scalers=None, constants=None):
        super().__init__(config, scalers, constants)
        rng = np.random.default_rng(config.seed)
        width = config.hidden_size
        dims = [config.n_lags] + [width] * config.n_layers
        self.trunk = [Dense.glorot(f"mlp.{i}", dims[i], dims[i + 1], rng) for i in range(config.n_layers)]
        self.heads = [Dense.glorot(f"mlp.head.q{tau:.2f}", width, 1, rng) for tau in QUANTILES]

    def layers(self) -> List[Dense]:
        return [*self.trunk, *self.heads]

    def build(self, tape: Tape, batch) -> Tuple[List[Value], Dict[str, DenseLayer]]:
        bound = self.bind(tape)
        z = self._price_inputs(tape, batch)
        if len(z) != self.n_lags:
            raise ConfigError(f"mlp expects {self.n_lags} price lag(s), got {len(z)}")
        for d in self.trunk:
            z = [v.tanh() for v in dense_apply(bound[d.name], z)]
        return [dense_apply(bound[d.name], z)[0] for d in self.heads], bound


def lqr_model(config: LqrConfig, scalers=None, constants=None) -> LqrModel:
    return LqrModel(config, scalers, constants)


def mlp_model(config: MlpConfig, scalers=None, constants=None) -> MlpModel:
    return MlpModel(config, scalers, constants)


FAMILIES = {"lqr": (LqrConfig, LqrModel), "mlp": (MlpConfig, MlpModel)}
