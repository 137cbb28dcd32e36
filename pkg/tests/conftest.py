import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

TOOLS = Path(__file__).resolve().parents[1] / "tools"
sys.path.insert(0, str(TOOLS))

from dataset import generate_synthetic  # noqa: E402
from pricing_engine import MarketSnapshot, SNAPSHOT_FIELDS  # noqa: E402
from scaling import IDENTITY, UnitScalers  # noqa: E402


@pytest.fixture(scope="session")
def synth_frame():
    """Twenty synthetic days (1920 rows), fixed seed, as a FeatureFrame."""
    return generate_synthetic(20, seed=3)


@pytest.fixture
def identity_scalers():
    s = UnitScalers()
    s.params = {g.name: IDENTITY for g in s.groups}
    return s


def make_snapshot(**fields):
    base = {f: 0.0 for f in SNAPSHOT_FIELDS}
    base.update(fields)
    return MarketSnapshot(ts=pd.Timestamp("2024-01-01T00:00:00Z"), **base)


def random_snapshots(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        row = {
            "v": float(rng.normal(0, 500)),
            "p_afrr_pos": float(rng.normal(120, 80)), "p_afrr_neg": float(rng.normal(20, 80)),
            "p_mfrr_pos": float(rng.normal(150, 100)), "p_mfrr_neg": float(rng.normal(0, 100)),
            "p_voaa_pos": float(rng.normal(110, 60)), "p_voaa_neg": float(rng.normal(30, 60)),
            "p_id15": float(rng.normal(80, 60)), "p_id60": float(rng.normal(80, 50)),
            "p_da": float(rng.normal(80, 40)),
            "l_id15": float(rng.exponential(200)), "l_id60": float(rng.exponential(250)),
        }
        for name in ("e_afrr_pos", "e_afrr_neg", "e_mfrr_pos", "e_mfrr_neg"):
            row[name] = float(rng.exponential(20)) if rng.random() < 0.6 else 0.0
        # exact thresholds and zero imbalance show up on purpose
        if i % 50 == 0:
            row["v"] = float(rng.choice([0.0, 50.0, -50.0, 200.0, -200.0, 800.0, -800.0]))
        out.append(make_snapshot(**row))
    return out
