#!/usr/bin/env python3
"""
scaling.py
Unit-grouped robust scaling. Features sharing a physical unit are concatenated
along the sample axis and get one median/IQR scaler, fitted on the training
split only. The rulebook constants c1..c10 are mapped through the scaler of
their own unit group and broadcast to the latent width; c0 is a ratio and
passes through unscaled.

Percentiles use linear interpolation between order statistics (numpy default).
A zero IQR falls back to scale 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from errors import ConfigError, InputError
from pricing_engine import CONSTANT_NAMES, PricingConstants
from soft_ops import LatentVector, broadcast

FEATURES = [
    "v",
    "e_afrr_pos", "e_afrr_neg", "e_mfrr_pos", "e_mfrr_neg",
    "p_afrr_pos", "p_afrr_neg", "p_mfrr_pos", "p_mfrr_neg",
    "p_voaa_pos", "p_voaa_neg",
    "p_id15", "p_id60", "p_da",
    "l_id15", "l_id60",
    "p",
]

DIMENSIONLESS = "dimensionless"


@dataclass(frozen=True)
class UnitGroup:
    name: str
    features: tuple
    constants: tuple


DEFAULT_GROUPS = (
    UnitGroup("price_eur_mwh",
              ("p_afrr_pos", "p_afrr_neg", "p_mfrr_pos", "p_mfrr_neg", "p_voaa_pos", "p_voaa_neg",
               "p_id15", "p_id60", "p_da", "p"),
              ("c1", "c2", "c3", "c10")),
    UnitGroup("power_mw", ("v", "l_id15", "l_id60"), ("c4", "c5", "c6", "c7", "c8", "c9")),
    UnitGroup("energy_mwh", ("e_afrr_pos", "e_afrr_neg", "e_mfrr_pos", "e_mfrr_neg"), ()),
    UnitGroup(DIMENSIONLESS, (), ("c0",)),
)


@dataclass(frozen=True)
class RobustScalerParams:
    center: float
    scale: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @staticmethod
    def from_dict(d: Mapping[str, float]) -> "RobustScalerParams":
        return RobustScalerParams(center=float(d["center"]), scale=float(d["scale"]))


IDENTITY = RobustScalerParams(0.0, 1.0)


def check_groups(groups: Sequence[UnitGroup]) -> None:
    """Every feature and every constant must belong to exactly one group."""
    for kind, universe, attr in (("feature", FEATURES, "features"), ("constant", CONSTANT_NAMES, "constants")):
        seen: Dict[str, str] = {}
        for g in groups:
            for name in getattr(g, attr):
                if name not in universe:
                    raise ConfigError(f"unit group '{g.name}': unknown {kind} '{name}'")
                if name in seen:
                    raise ConfigError(f"{kind} '{name}' is in groups '{seen[name]}' and '{g.name}'")
                seen[name] = g.name
        missing = [n for n in universe if n not in seen]
        if missing:
            raise ConfigError(f"{kind}(s) without a unit group: {', '.join(missing)}")


def groups_with_overrides(overrides: Mapping[str, Iterable[str]]) -> List[UnitGroup]:
    """Rebuild the grouping from {group name: members}; unnamed groups keep their defaults."""
    groups = []
    for g in DEFAULT_GROUPS:
        if g.name in overrides:
            members = [m.strip() for m in overrides[g.name] if m.strip()]
            groups.append(UnitGroup(g.name, tuple(m for m in members if m in FEATURES),
                                    tuple(m for m in members if m in CONSTANT_NAMES)))
        else:
            groups.append(g)
    unknown = sorted(set(overrides) - {g.name for g in DEFAULT_GROUPS})
    if unknown:
        raise ConfigError(f"unknown unit group(s): {', '.join(unknown)}")
    check_groups(groups)
    return groups


def fit(group: UnitGroup, columns: Sequence[Sequence[float]]) -> RobustScalerParams:
    if group.name == DIMENSIONLESS:
        return IDENTITY
    arrays = [np.asarray(c, dtype=np.float64).ravel() for c in columns]
    data = np.concatenate(arrays) if arrays else np.empty(0)
    if data.size == 0:
        raise InputError(f"cannot fit scaler for '{group.name}': no training values")
    q25, q50, q75 = np.percentile(data, [25.0, 50.0, 75.0])
    iqr = float(q75 - q25)
    return RobustScalerParams(center=float(q50), scale=iqr if iqr > 0 else 1.0)


def transform(x, params: RobustScalerParams):
    return (np.asarray(x, dtype=np.float64) - params.center) / params.scale


def inverse_transform(y, params: RobustScalerParams):
    return np.asarray(y, dtype=np.float64) * params.scale + params.center


class UnitScalers:
    """Fitted params per unit group, with feature/constant lookups."""

    def __init__(self, groups: Sequence[UnitGroup] = DEFAULT_GROUPS,
                 params: Optional[Mapping[str, RobustScalerParams]] = None):
        check_groups(groups)
        self.groups = list(groups)
        self.params: Dict[str, RobustScalerParams] = dict(params or {})
        self._feature_group = {f: g.name for g in self.groups for f in g.features}
        self._constant_group = {c: g.name for g in self.groups for c in g.constants}

    @property
    def fitted(self) -> bool:
        return all(g.name in self.params for g in self.groups)

    def fit_frame(self, train) -> "UnitScalers":
        """Fit every group on the training split (a DataFrame); nothing else is read."""
        params = {}
        for g in self.groups:
            cols = [train[f].to_numpy(dtype=np.float64) for f in g.features if f in train.columns]
            params[g.name] = fit(g, cols)
        self.params = params
        return self

    def _lookup(self, group: str) -> RobustScalerParams:
        if group == DIMENSIONLESS:
            return self.params.get(group, IDENTITY)
        if group not in self.params:
            raise InputError(f"scaler for unit group '{group}' is not fitted")
        return self.params[group]

    def for_feature(self, name: str) -> RobustScalerParams:
        if name not in self._feature_group:
            raise ConfigError(f"unknown feature '{name}'")
        return self._lookup(self._feature_group[name])

    def for_constant(self, name: str) -> RobustScalerParams:
        if name not in self._constant_group:
            raise ConfigError(f"unknown constant '{name}'")
        return self._lookup(self._constant_group[name])

    def scaled_constant(self, name: str, c: PricingConstants) -> float:
        return float(transform(getattr(c, name), self.for_constant(name)))

    def to_dict(self) -> Dict[str, object]:
        return {
            "groups": [{"name": g.name, "features": list(g.features), "constants": list(g.constants)}
                       for g in self.groups],
            "params": {k: v.to_dict() for k, v in sorted(self.params.items())},
        }

    @staticmethod
    def from_dict(d: Mapping[str, object]) -> "UnitScalers":
        groups = [UnitGroup(g["name"], tuple(g["features"]), tuple(g["constants"])) for g in d["groups"]]
        params = {k: RobustScalerParams.from_dict(v) for k, v in d["params"].items()}
        return UnitScalers(groups, params)


def transform_constant(name: str, c: PricingConstants, scalers: UnitScalers, tape, h: int) -> LatentVector:
    if name not in CONSTANT_NAMES:
        raise ConfigError(f"unknown constant '{name}'")
    return broadcast(tape, scalers.scaled_constant(name, c), h)
