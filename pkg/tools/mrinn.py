#!/usr/bin/env python3
"""
mrinn.py
Market-rule-informed quantile network. Every raw feature is projected into an
h-wide latent vector; the settlement rulebook is then replayed in latent
space with soft_ops blocks (balancing, market-reference and scarcity
components, ramp, liquidity weights, final extremum); a tanh trunk and a
hierarchical quantile head turn the latent price into 7 ordered quantiles.

Wiring:
  - feature k's lag vector (N/15 + 1 scaled values) -> its own dense layer -> h
  - the lagged observed price `p` is projected too and added to the latent
    price before the trunk
  - 6-way balancing cond on (e+ total, e- total, v); ramp, scarcity and the
    final extremum are conditioned on latent v
  - division by rulebook constants uses build-time reciprocals of the scaled
    constants, so only the two activation prices go through safe_div
  - ablation removes one component with its selectors and exclusive features;
    the final extremum then becomes a plain soft min / soft max of two

Checkpoints are JSON documents (format "mrinn-checkpoint", version 1) holding
the family, config, constants, scaler params and every dense layer's
weights; see schemas/checkpoint.schema.json.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from autodiff import Dense, DenseLayer, Tape, Value, dense_apply, softplus
from errors import ConfigError, DimensionError, InputError, SchemaError
from metrics import MEDIAN_INDEX, QUANTILES
from pricing_engine import PricingConstants
from scaling import FEATURES, IDENTITY, UnitScalers, inverse_transform, transform_constant
from soft_ops import (LatentVector, broadcast, safe_div, smooth_abs, soft_cond, soft_max, soft_max3,
                      soft_min, soft_min3, soft_sign)

CHECKPOINT_FORMAT = "mrinn-checkpoint"
CHECKPOINT_VERSION = 1

ABLATIONS = ("none", "drop_bal", "drop_mkt", "drop_scar")
COMPONENTS = ("bal", "mkt", "scar")
BALANCING_FEATURES = (
    "e_afrr_pos", "e_afrr_neg", "e_mfrr_pos", "e_mfrr_neg",
    "p_afrr_pos", "p_afrr_neg", "p_mfrr_pos", "p_mfrr_neg",
    "p_voaa_pos", "p_voaa_neg",
)
_DROPS = {"drop_bal": "bal", "drop_mkt": "mkt", "drop_scar": "scar"}
_MIN_RECIPROCAL_BASE = 1e-3

Batch = Mapping[str, np.ndarray]


@dataclass(frozen=True)
class MrinnConfig:
    h: int = 8
    n_layers: int = 2
    lookback: int = 0
    horizon: int = 15
    ablation: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.h < 1:
            raise ConfigError(f"h={self.h}: must be >= 1")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers={self.n_layers}: must be >= 1")
        if self.lookback < 0 or self.lookback % 15:
            raise ConfigError(f"lookback={self.lookback}: must be a non-negative multiple of 15")
        if self.horizon < 15 or self.horizon % 15:
            raise ConfigError(f"horizon={self.horizon}: must be a positive multiple of 15")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation '{self.ablation}' (expected one of {', '.join(ABLATIONS)})")

    @property
    def n_lags(self) -> int:
        return self.lookback // 15 + 1

    @property
    def components(self) -> Tuple[str, ...]:
        return tuple(c for c in COMPONENTS if _DROPS.get(self.ablation) != c)

    @property
    def features(self) -> List[str]:
        if self.ablation == "drop_bal":
            return [f for f in FEATURES if f not in BALANCING_FEATURES]
        return list(FEATURES)

    def as_dict(self) -> Dict[str, object]:
        return asdict(self)


def _reciprocal(x: float) -> float:
    if abs(x) < _MIN_RECIPROCAL_BASE:
        x = _MIN_RECIPROCAL_BASE if x >= 0 else -_MIN_RECIPROCAL_BASE
    return 1.0 / x


def _add(a: LatentVector, b: LatentVector) -> LatentVector:
    return [x + y for x, y in zip(a, b)]


def _sub(a: LatentVector, b: LatentVector) -> LatentVector:
    return [x - y for x, y in zip(a, b)]


def _mul(a: LatentVector, b: LatentVector) -> LatentVector:
    return [x * y for x, y in zip(a, b)]


def _scale(a: LatentVector, k: float) -> LatentVector:
    return [x * k for x in a]


class MrinnModel:
    family = "mrinn"

    def __init__(self, config: MrinnConfig, scalers: Optional[UnitScalers] = None,
                 constants: Optional[PricingConstants] = None):
        self.config = config
        self.scalers = scalers
        self.constants = constants or PricingConstants()
        rng = np.random.default_rng(config.seed)
        h = config.h
        self.projections: Dict[str, Dense] = {
            f: Dense.glorot(f"proj.{f}", config.n_lags, h, rng) for f in config.features
        }
        comps = config.components
        self.selectors: Dict[str, Dense] = {}
        if "bal" in comps:
            self.selectors["cond_bal"] = Dense.glorot("cond_bal", 3 * h, 6, rng)
        if "mkt" in comps:
            self.selectors["cond_ramp"] = Dense.glorot("cond_ramp", h, 3, rng)
        if "scar" in comps:
            self.selectors["cond_scar"] = Dense.glorot("cond_scar", h, 3, rng)
        if len(comps) == 3:
            self.selectors["cond_final"] = Dense.glorot("cond_final", h, 2, rng)
        self.trunk = [Dense.glorot(f"trunk.{i}", h, h, rng) for i in range(config.n_layers)]
        self.heads = [Dense.glorot(f"head.q{tau:.2f}", h, 1, rng) for tau in QUANTILES]
        self.sites: Tuple[str, ...] = ()

    @property
    def features(self) -> List[str]:
        return self.config.features

    @property
    def n_lags(self) -> int:
        return self.config.n_lags

    def layers(self) -> List[Dense]:
        return [*self.projections.values(), *self.selectors.values(), *self.trunk, *self.heads]

    def param_count(self) -> int:
        return sum(d.param_count() for d in self.layers())

    def bind(self, tape: Tape) -> Dict[str, DenseLayer]:
        return {d.name: d.bind(tape) for d in self.layers()}

    def _require_scalers(self) -> UnitScalers:
        if self.scalers is None or not self.scalers.fitted:
            raise InputError("model scalers are not fitted")
        return self.scalers

    def build(self, tape: Tape, batch: Batch) -> Tuple[List[Value], Dict[str, DenseLayer]]:
        """Graph for one scaled batch: 7 quantile nodes (scaled price units) and the bound layers."""
        bound = self.bind(tape)
        latents = project_features(batch, self, tape, bound)
        H = latent_price(latents, self, tape, bound)
        return quantile_head(H, self, bound), bound

    def price_params(self):
        return self._require_scalers().for_feature("p")


# ---------- operations ----------
def project_features(window: Batch, model: MrinnModel, tape: Tape,
                     bound: Mapping[str, DenseLayer]) -> Dict[str, LatentVector]:
    latents = {}
    for f in model.features:
        if f not in window:
            raise ConfigError(f"feature '{f}' missing from the input window")
        x = np.asarray(window[f], dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != model.n_lags:
            raise DimensionError(f"feature '{f}': {x.shape[1]} lag value(s), model expects {model.n_lags}")
        inputs = [tape.input(x[:, j]) for j in range(x.shape[1])]
        latents[f] = dense_apply(bound[f"proj.{f}"], inputs)
    return latents


def _latent(latents: Mapping[str, LatentVector], name: str) -> LatentVector:
    if name not in latents:
        raise ConfigError(f"latent '{name}' requested but its feature is not projected")
    return latents[name]


def _balancing(L, model: MrinnModel, bound, sites: List[str]) -> LatentVector:
    e_pos = _add(_latent(L, "e_afrr_pos"), _latent(L, "e_mfrr_pos"))
    e_neg = _add(_latent(L, "e_afrr_neg"), _latent(L, "e_mfrr_neg"))
    act_pos = safe_div(_add(_mul(L["e_afrr_pos"], _latent(L, "p_afrr_pos")),
                            _mul(L["e_mfrr_pos"], _latent(L, "p_mfrr_pos"))), e_pos)
    act_neg = safe_div(_add(_mul(L["e_afrr_neg"], _latent(L, "p_afrr_neg")),
                            _mul(L["e_mfrr_neg"], _latent(L, "p_mfrr_neg"))), e_neg)
    sites += ["safe_div:act_pos", "safe_div:act_neg"]
    branches = [act_pos, act_neg, act_pos, act_neg, _latent(L, "p_voaa_pos"), _latent(L, "p_voaa_neg")]
    sites.append("cond6:balancing")
    return soft_cond(branches, [e_pos, e_neg, L["v"]], bound["cond_bal"])


def _weights(L, k: Dict[str, float], tape: Tape, h: int, sites: List[str]):
    one = broadcast(tape, 1.0, h)
    w15 = soft_min(one, _scale(_latent(L, "l_id15"), _reciprocal(k["c5"])))
    w60 = soft_min(_sub(one, w15), _scale(_latent(L, "l_id60"), _reciprocal(k["c6"])))
    wda = _sub(_sub(one, w15), w60)
    sites += ["soft_min:w_id15", "soft_min:w_id60"]
    return w15, w60, wda


def _market(L, weights, model: MrinnModel, k, tape: Tape, bound, sites: List[str]) -> LatentVector:
    h = model.config.h
    v = L["v"]
    ramp = soft_cond([broadcast(tape, -1.0, h), _scale(v, _reciprocal(k["c4"])), broadcast(tape, 1.0, h)],
                     [v], bound["cond_ramp"])
    sites.append("cond3:ramp")
    c = model.constants
    scalers = model.scalers
    marked = []
    for feat, cname in (("p_id15", "c1"), ("p_id60", "c2"), ("p_da", "c3")):
        p = _latent(L, feat)
        floor = soft_max(transform_constant(cname, c, scalers, tape, h), _scale(smooth_abs(p), k["c0"]))
        sites += [f"smooth_abs:{feat}", f"soft_max:floor_{feat}"]
        marked.append(_add(p, _mul(ramp, floor)))
    w15, w60, wda = weights
    return _add(_add(_mul(w15, marked[0]), _mul(w60, marked[1])), _mul(wda, marked[2]))


def _scarcity(L, weights, model: MrinnModel, k, tape: Tape, bound, sites: List[str]) -> LatentVector:
    h = model.config.h
    v = L["v"]
    w15, w60, wda = weights
    base = _add(_add(_mul(w15, _latent(L, "p_id15")), _mul(w60, _latent(L, "p_id60"))),
                _mul(wda, _latent(L, "p_da")))
    r97 = _reciprocal(k["c9"] - k["c7"])
    c10 = transform_constant("c10", model.constants, model.scalers, tape, h)
    sign = soft_sign(v)
    sites += ["soft_sign:v", "smooth_abs:v"]
    ramped = [(x - k["c7"]) * r97 for x in smooth_abs(v)]
    cubic = _mul(_mul(sign, c10), [x * x * x for x in ramped])
    capped_level = ((k["c8"] - k["c7"]) * r97) ** 3
    capped = _scale(_mul(sign, c10), capped_level)
    adj = soft_cond([broadcast(tape, 0.0, h), cubic, capped], [v], bound["cond_scar"])
    sites.append("cond3:scarcity")
    return _add(base, adj)


def latent_price(latents: Mapping[str, LatentVector], model: MrinnModel, tape: Tape,
                 bound: Mapping[str, DenseLayer]) -> LatentVector:
    """Latent imbalance price H_t; records the soft-op sites on model.sites."""
    scalers = model._require_scalers()
    c = model.constants
    k = {name: scalers.scaled_constant(name, c) for name in ("c0", "c4", "c5", "c6", "c7", "c8", "c9")}
    h = model.config.h
    comps = model.config.components
    sites: List[str] = []
    _latent(latents, "v")

    parts: List[LatentVector] = []
    if "bal" in comps:
        parts.append(_balancing(latents, model, bound, sites))
    weights = _weights(latents, k, tape, h, sites)
    if "mkt" in comps:
        parts.append(_market(latents, weights, model, k, tape, bound, sites))
    if "scar" in comps:
        parts.append(_scarcity(latents, weights, model, k, tape, bound, sites))

    if len(parts) == 3:
        final = soft_cond([soft_min3(*parts), soft_max3(*parts)], [latents["v"]], bound["cond_final"])
        sites.append("cond2:extremum")
    else:
        final = gated_extremum(parts, latents["v"])
        sites.append("soft_minmax:extremum")
    model.sites = tuple(sites)
    return _add(final, _latent(latents, "p"))


def gated_extremum(parts: Sequence[LatentVector], v: LatentVector) -> LatentVector:
    """Two remaining components: soft min for v < 0, soft max otherwise, blended by a sigmoid of v."""
    lo = soft_min(parts[0], parts[1])
    hi = soft_max(parts[0], parts[1])
    gate = [x.sigmoid() for x in v]
    return [g * b + (1.0 - g) * a for g, a, b in zip(gate, lo, hi)]


def hierarchical_quantiles(raw: Sequence[Value]) -> List[Value]:
    """Median plus outward softplus increments; ordered by construction."""
    if len(raw) != len(QUANTILES):
        raise DimensionError(f"expected {len(QUANTILES)} head outputs, got {len(raw)}")
    m = MEDIAN_INDEX
    out: List[Optional[Value]] = [None] * len(raw)
    out[m] = raw[m]
    for j in range(m - 1, -1, -1):
        out[j] = out[j + 1] - softplus(raw[j])
    for j in range(m + 1, len(raw)):
        out[j] = out[j - 1] + softplus(raw[j])
    return out


def trunk_apply(H: LatentVector, trunk: Sequence[DenseLayer]) -> LatentVector:
    z = list(H)
    for layer in trunk:
        z = [x.tanh() for x in dense_apply(layer, z)]
    return z


def quantile_head(H: LatentVector, model: MrinnModel, bound: Mapping[str, DenseLayer]) -> List[Value]:
    z = trunk_apply(H, [bound[d.name] for d in model.trunk])
    raw = [dense_apply(bound[d.name], z)[0] for d in model.heads]
    return hierarchical_quantiles(raw)


def _graph_forecast(outs: Sequence[Value], n: int) -> np.ndarray:
    return np.column_stack([np.broadcast_to(o.data, (n,)) for o in outs])


def forward(window, model) -> np.ndarray:
    """(n, 7) quantile forecast in EUR/MWh for a WindowSet (raw units) or a scaled batch dict."""
    scalers = model._require_scalers()
    batch = window.scaled(scalers) if hasattr(window, "scaled") else window
    n = len(next(iter(batch.values())))
    outs, _ = model.build(Tape(), batch)
    return inverse_transform(_graph_forecast(outs, n), scalers.for_feature("p"))


def param_count(model) -> int:
    return model.param_count()


def ablate(config: MrinnConfig, tag: str, scalers: Optional[UnitScalers] = None,
           constants: Optional[PricingConstants] = None) -> MrinnModel:
    if tag not in _DROPS:
        raise ConfigError(f"unknown ablation '{tag}' (expected one of {', '.join(_DROPS)})")
    return MrinnModel(replace(config, ablation=tag), scalers, constants)


def site_audit(model: MrinnModel) -> Dict[str, int]:
    """Soft-op site counts by kind, from a one-sample build."""
    probe = model
    if model.scalers is None or not model.scalers.fitted:
        s = UnitScalers()
        s.params = {g.name: IDENTITY for g in s.groups}
        probe = MrinnModel(model.config, s, model.constants)
    batch = {f: np.zeros((1, model.n_lags)) for f in model.features}
    probe.build(Tape(), batch)
    model.sites = probe.sites
    return dict(sorted(Counter(s.split(":")[0] for s in probe.sites).items()))


# ---------- checkpoints ----------
def checkpoint_doc(model) -> Dict[str, object]:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "family": model.family,
        "config": model.config.as_dict(),
        "constants": model.constants.as_dict(),
        "scalers": model._require_scalers().to_dict(),
        "param_count": model.param_count(),
        "layers": {d.name: {"weights": d.weights.tolist(), "bias": d.bias.tolist()} for d in model.layers()},
    }


def set_weights(model, layers: Mapping[str, Mapping[str, list]]) -> None:
    expected = {d.name: d for d in model.layers()}
    missing = sorted(set(expected) - set(layers))
    extra = sorted(set(layers) - set(expected))
    if missing or extra:
        raise SchemaError(f"checkpoint layers do not match the model (missing={missing}, unexpected={extra})")
    for name, d in expected.items():
        W = np.asarray(layers[name]["weights"], dtype=np.float64)
        b = np.asarray(layers[name]["bias"], dtype=np.float64)
        if W.shape != d.weights.shape or b.shape != d.bias.shape:
            raise SchemaError(f"layer '{name}': shape {W.shape}/{b.shape}, expected {d.weights.shape}/{d.bias.shape}")
        d.weights[...] = W
        d.bias[...] = b


def save_checkpoint(model, path) -> Path:
    from artifacts import write_json
    return write_json(path, checkpoint_doc(model), schema="checkpoint")


def model_from_doc(doc: Mapping[str, object]):
    from artifacts import validate_json
    validate_json(doc, "checkpoint")
    if doc["format"] != CHECKPOINT_FORMAT or doc["version"] != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported checkpoint {doc['format']} v{doc['version']}")
    scalers = UnitScalers.from_dict(doc["scalers"])
    constants = PricingConstants(**doc["constants"])
    family = doc["family"]
    if family == MrinnModel.family:
        model = MrinnModel(MrinnConfig(**doc["config"]), scalers, constants)
    else:
        from baselines import FAMILIES
        if family not in FAMILIES:
            raise SchemaError(f"unknown model family '{family}'")
        config_cls, model_cls = FAMILIES[family]
        model = model_cls(config_cls(**doc["config"]), scalers, constants)
    set_weights(model, doc["layers"])
    return model


def load_checkpoint(path):
    from artifacts import read_json
    return model_from_doc(read_json(path))


def model_size(model, checkpoint_path=None) -> Dict[str, int]:
    out = {"params": model.param_count()}
    if checkpoint_path is not None and os.path.exists(checkpoint_path):
        out["bytes"] = os.path.getsize(checkpoint_path)
    return out
