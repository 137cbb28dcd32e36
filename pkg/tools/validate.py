#!/usr/bin/env python3
"""
validate.py
Schema and checksum checks for run directories. Accepts a single run
directory (has manifest.json) or an output root (has runs/ and index.json).
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import List

from artifacts import read_json, schema_errors, verify_checksums

RUN_DOCUMENTS = {
    "manifest.json": "manifest",
    "record.json": "run_record",
    "eval_report.json": "eval_report",
    "checkpoint.json": "checkpoint",
}


def validate_run(run_dir: Path) -> List[str]:
    problems = []
    if not (run_dir / "manifest.json").exists():
        return [f"{run_dir}: manifest.json not found"]
    for name, schema in RUN_DOCUMENTS.items():
        path = run_dir / name
        if not path.exists():
            if name != "checkpoint.json":
                problems.append(f"{run_dir.name}/{name}: missing")
            continue
        problems += [f"{run_dir.name}/{name}: {e}" for e in schema_errors(read_json(path), schema)]
    manifest = read_json(run_dir / "manifest.json")
    for name in manifest.get("outputs", []):
        if not (run_dir / name).exists():
            problems.append(f"{run_dir.name}/{name}: listed in manifest but missing")
    problems += [f"{run_dir.name}/{p}" for p in verify_checksums(run_dir)]
    return problems


def validate_tree(path: Path) -> List[str]:
    if (path / "manifest.json").exists():
        return validate_run(path)
    runs = path / "runs"
    if not runs.is_dir():
        return [f"{path}: neither a run directory nor an output root"]
    problems = []
    index = path / "index.json"
    if index.exists():
        doc = read_json(index)
        problems += [f"index.json: {e}" for e in schema_errors(doc, "run_index")]
        for entry in doc.get("runs", []):
            if not (runs / entry.get("run_id", "")).is_dir():
                problems.append(f"index.json: run {entry.get('run_id')} has no directory")
    for run_dir in sorted(p for p in runs.iterdir() if p.is_dir()):
        problems += validate_run(run_dir)
    return problems


def main(path):
    problems = validate_tree(Path(path))
    for p in problems:
        print(f"[validate] ERROR: {p}", file=sys.stderr)
    if problems:
        sys.exit(2)
    print(f"[validate] OK: {path} validates against the artifact schemas.")


if __name__ == "__main__":
    if len(sys.argv) != 2:
        print("Usage: python tools/validate.py <RUN_DIR|OUTPUT_ROOT>")
        sys.exit(1)
    main(sys.argv[1])
