#!/usr/bin/env python3
"""
soft_ops.py
Differentiable stand-ins for the hard operators of the settlement rulebook,
applied element-wise over latent vectors (lists of h Values on one tape).

  max  -> b + softplus(a - b)         (>= max, gap <= ln 2)
  min  -> -soft_max(-a, -b)
  |a|  -> sqrt(a^2 + EPS)
  sgn  -> tanh
  a/b  -> a / (b + EPS)
  if/else -> softmax-weighted blend of branches, weights from a dense selector

soft_cond weights are scalar per branch: w_i multiplies every channel of
branch i.
"""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from autodiff import DenseLayer, Tape, Value, dense_apply, softplus, vsum
from errors import DimensionError

EPS = 1e-7

LatentVector = List[Value]


def _same_length(op: str, a: Sequence[Value], b: Sequence[Value]) -> None:
    if len(a) != len(b):
        raise DimensionError(f"{op}: length mismatch {len(a)} vs {len(b)}")


def broadcast(tape: Tape, x: float, h: int) -> LatentVector:
    """A scalar constant replicated over h channels (non-parameter nodes)."""
    c = tape.constant(x)
    return [c] * h


def soft_max(a: LatentVector, b: LatentVector) -> LatentVector:
    _same_length("soft_max", a, b)
    return [bi + softplus(ai - bi) for ai, bi in zip(a, b)]


def soft_min(a: LatentVector, b: LatentVector) -> LatentVector:
    _same_length("soft_min", a, b)
    return [-(-bi + softplus(bi - ai)) for ai, bi in zip(a, b)]


def soft_max3(a: LatentVector, b: LatentVector, c: LatentVector) -> LatentVector:
    return soft_max(soft_max(a, b), c)


def soft_min3(a: LatentVector, b: LatentVector, c: LatentVector) -> LatentVector:
    return soft_min(soft_min(a, b), c)


def smooth_abs(a: LatentVector) -> LatentVector:
    return [(ai * ai + EPS).sqrt() for ai in a]


def soft_sign(a: LatentVector) -> LatentVector:
    return [ai.tanh() for ai in a]


def safe_div(a: LatentVector, b: LatentVector) -> LatentVector:
    _same_length("safe_div", a, b)
    return [ai / (bi + EPS) for ai, bi in zip(a, b)]


def softmax(x: Sequence[Value]) -> List[Value]:
    """Shift-by-max stabilised; the shift is a per-sample constant."""
    if not x:
        raise DimensionError("softmax of an empty vector")
    tape = x[0].tape
    shift = tape.constant(np.max(np.stack(np.broadcast_arrays(*[v.data for v in x])), axis=0))
    e = [(v - shift).exp() for v in x]
    total = vsum(e)
    return [ei / total for ei in e]


def selector_weights(conditions: Sequence[LatentVector], selector: DenseLayer) -> List[Value]:
    concat = [v for cond in conditions for v in cond]
    return softmax(dense_apply(selector, concat))


def soft_cond(branches: Sequence[LatentVector], conditions: Sequence[LatentVector],
              selector: DenseLayer) -> LatentVector:
    if len(branches) < 2:
        raise DimensionError(f"soft_cond needs >= 2 branches, got {len(branches)}")
    if len(selector.weights) != len(branches):
        raise DimensionError(f"{selector.name}: {len(selector.weights)} outputs for {len(branches)} branches")
    h = len(branches[0])
    for br in branches:
        _same_length("soft_cond", branches[0], br)
    w = selector_weights(conditions, selector)
    return [vsum([br[j] * wi for br, wi in zip(branches, w)]) for j in range(h)]
