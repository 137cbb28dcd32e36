#!/usr/bin/env python3
"""
metrics.py
Probabilistic and pointwise scores for quantile forecasts.

AQCR is the adjacent-pair crossing rate: the share (in percent) of adjacent
quantile pairs with y_hat[tau_i] > y_hat[tau_{i+1}], strict, no tolerance.
Pointwise scores use the tau = 0.50 column as the point forecast.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Sequence

import numpy as np

from autodiff import Value, mean, vsum
from errors import InputError

QUANTILES = (0.10, 0.25, 0.45, 0.50, 0.55, 0.75, 0.90)
MEDIAN_INDEX = QUANTILES.index(0.50)


def quantile_levels() -> tuple:
    return QUANTILES


def _check_tau(tau: float) -> None:
    if not 0.0 < tau < 1.0:
        raise InputError(f"quantile level {tau} outside (0, 1)")


def pinball(y, y_hat, tau: float):
    _check_tau(tau)
    d = np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64)
    out = np.where(d >= 0, tau * d, (tau - 1.0) * d)
    return float(out) if out.ndim == 0 else out


def _aligned(truths, forecasts) -> tuple:
    y = np.asarray(truths, dtype=np.float64).ravel()
    f = np.asarray(forecasts, dtype=np.float64)
    if y.size == 0:
        raise InputError("no samples to score")
    if f.ndim != 2 or f.shape != (y.size, len(QUANTILES)):
        raise InputError(f"forecast shape {f.shape} does not match ({y.size}, {len(QUANTILES)})")
    return y, f


def per_quantile_pinball(truths, forecasts) -> Dict[str, float]:
    y, f = _aligned(truths, forecasts)
    return {f"q{tau:.2f}": float(np.mean(pinball(y, f[:, j], tau))) for j, tau in enumerate(QUANTILES)}


def aql(truths, forecasts) -> float:
    y, f = _aligned(truths, forecasts)
    total = sum(float(np.sum(pinball(y, f[:, j], tau))) for j, tau in enumerate(QUANTILES))
    return total / (y.size * len(QUANTILES))


def aqcr(forecasts) -> float:
    f = np.asarray(forecasts, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise InputError("no forecasts to check for crossing")
    crossings = int(np.sum(f[:, :-1] > f[:, 1:]))
    return 100.0 * crossings / (f.shape[0] * (f.shape[1] - 1))


def _errors(truths, medians) -> np.ndarray:
    y = np.asarray(truths, dtype=np.float64).ravel()
    m = np.asarray(medians, dtype=np.float64).ravel()
    if y.size == 0:
        raise InputError("no samples to score")
    if y.shape != m.shape:
        raise InputError(f"length mismatch: {y.size} truths vs {m.size} forecasts")
    return y - m


def mae(truths, medians) -> float:
    return float(np.mean(np.abs(_errors(truths, medians))))


def rmse(truths, medians) -> float:
    return float(math.sqrt(np.mean(_errors(truths, medians) ** 2)))


@dataclass(frozen=True)
class EvalReport:
    aql: float
    aqcr: float
    mae: float
    rmse: float
    n: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @staticmethod
    def from_dict(d) -> "EvalReport":
        return EvalReport(aql=float(d["aql"]), aqcr=float(d["aqcr"]), mae=float(d["mae"]),
                          rmse=float(d["rmse"]), n=int(d["n"]))


def eval_report(truths, forecasts) -> EvalReport:
    y, f = _aligned(truths, forecasts)
    med = f[:, MEDIAN_INDEX]
    return EvalReport(aql=aql(y, f), aqcr=aqcr(f), mae=mae(y, med), rmse=rmse(y, med), n=int(y.size))


# ---------- graph form (training objective) ----------
def pinball_node(y: Value, y_hat: Value, tau: float) -> Value:
    _check_tau(tau)
    d = y - y_hat
    return tau * d + (-d).relu()


def aql_node(y: Value, quantiles: Sequence[Value]) -> Value:
    """Batch-mean AQL of the |Q| predicted quantile nodes as one scalar node."""
    if len(quantiles) != len(QUANTILES):
        raise InputError(f"expected {len(QUANTILES)} quantile outputs, got {len(quantiles)}")
    per_sample = vsum([pinball_node(y, q, tau) for q, tau in zip(quantiles, QUANTILES)])
    return mean(per_sample) * (1.0 / len(QUANTILES))
