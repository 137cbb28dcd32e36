#!/usr/bin/env python3
"""
run_etl.py
Flattens an output root into tidy tables:
  runs.csv       one row per run (family, fold, seed, config, selection, test metrics)
  artifacts.csv  one row per file in each run directory (type, bytes, sha256)
Rows are sorted by run id so repeated ETL over the same runs is byte-stable.
"""

from __future__ import annotations

import mimetypes
import sys
from pathlib import Path

import pandas as pd

from artifacts import CHECKSUMS, ensure_dir, read_json, sha256_file, write_frame_csv
from errors import SchemaError

RUN_FIELDS = ["run_id", "family", "command", "fold", "seed", "selected", "config_hash", "param_count",
              "best_epoch", "stopped_epoch", "best_val_aql", "aql", "aqcr", "mae", "rmse", "n"]


def _artifact_type(name: str) -> str:
    if name.endswith(".csv"):
        return "CSV"
    if name.endswith(".json"):
        return "JSON"
    return "Other"


def run_etl(root: Path, dest: Path):
    index_path = root / "index.json"
    if not index_path.exists():
        raise SchemaError(f"{root}: index.json not found")
    ensure_dir(dest)
    runs, arts = [], []
    for entry in read_json(index_path)["runs"]:
        run_dir = root / "runs" / entry["run_id"]
        rec = read_json(run_dir / "record.json")
        man = read_json(run_dir / "manifest.json")
        runs.append({
            "run_id": rec["run_id"], "family": rec["family"], "command": entry["command"],
            "fold": rec["fold"], "seed": rec["seed"], "selected": entry["selected"],
            "config_hash": man["config_hash"], "param_count": rec["param_count"],
            "best_epoch": rec["best_epoch"], "stopped_epoch": rec["stopped_epoch"],
            "best_val_aql": rec["best_val_aql"], **rec["test"],
        })
        for path in sorted(run_dir.iterdir()):
            if not path.is_file() or path.name in (CHECKSUMS, "timing.json"):
                continue
            arts.append({"run_id": rec["run_id"], "name": path.name, "type": _artifact_type(path.name),
                         "mime": mimetypes.guess_type(path.name)[0] or "", "bytes": path.stat().st_size,
                         "sha256": sha256_file(path)})
    runs_df = pd.DataFrame(runs, columns=RUN_FIELDS).sort_values("run_id", kind="mergesort")
    arts_df = pd.DataFrame(arts, columns=["run_id", "name", "type", "mime", "bytes", "sha256"])
    write_frame_csv(dest / "runs.csv", runs_df)
    write_frame_csv(dest / "artifacts.csv", arts_df.sort_values(["run_id", "name"], kind="mergesort"))
    print(f"[etl] {len(runs_df)} run(s), {len(arts_df)} artifact(s) -> {dest}")
    return runs_df


if __name__ == "__main__":
    if len(sys.argv) not in (2, 3):
        print("Usage: python tools/run_etl.py <OUTPUT_ROOT> [<DEST_DIR>]")
        sys.exit(1)
    run_etl(Path(sys.argv[1]), Path(sys.argv[-1]))
