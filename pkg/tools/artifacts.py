#!/usr/bin/env python3
"""
artifacts.py
Run-directory plumbing: schema-checked JSON, atomic writes, sha256 checksums.

JSON is written with sorted keys and a fixed indent so two identical runs
produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Iterable, List

from jsonschema import Draft7Validator

ROOT = Path(__file__).resolve().parents[1]
SCHEMA_DIR = ROOT / "schemas"

CHECKSUMS = "checksums.txt"


def ensure_dir(p) -> Path:
    p = Path(p)
    p.mkdir(parents=True, exist_ok=True)
    return p


def read_json(path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


@lru_cache(maxsize=None)
def load_schema(name: str) -> Dict[str, Any]:
    schema = read_json(SCHEMA_DIR / f"{name}.schema.json")
    Draft7Validator.check_schema(schema)
    return schema


def schema_errors(obj: Any, name: str) -> List[str]:
    v = Draft7Validator(load_schema(name))
    return [f"{'/'.join(str(p) for p in e.path) or '<root>'}: {e.message}"
            for e in sorted(v.iter_errors(obj), key=lambda e: list(e.path))]


def validate_json(obj: Any, name: str) -> None:
    from errors import SchemaError
    errs = schema_errors(obj, name)
    if errs:
        raise SchemaError(f"{name} document invalid: " + "; ".join(errs[:5]))


def write_text_atomic(path, text: str) -> Path:
    path = Path(path)
    ensure_dir(path.parent)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return path


def write_json(path, obj: Any, schema: str = "") -> Path:
    if schema:
        validate_json(obj, schema)
    return write_text_atomic(path, dumps(obj))


def write_frame_csv(path, df) -> Path:
    return write_text_atomic(path, df.to_csv(index=False, lineterminator="\n"))


def sha256_file(p) -> str:
    h = hashlib.sha256()
    with open(p, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_checksums(run_dir, names: Iterable[str] = ()) -> Path:
    """checksums.txt lists '<sha256> <name>' for every regular file (or `names`)."""
    run_dir = Path(run_dir)
    names = sorted(names) or sorted(p.name for p in run_dir.iterdir()
                                    if p.is_file() and p.name != CHECKSUMS and not p.name.startswith("."))
    lines = [f"{sha256_file(run_dir / n)} {n}" for n in names]
    return write_text_atomic(run_dir / CHECKSUMS, "\n".join(lines) + "\n")


def verify_checksums(run_dir) -> List[str]:
    run_dir = Path(run_dir)
    path = run_dir / CHECKSUMS
    if not path.exists():
        return [f"{path}: missing"]
    bad = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        digest, name = line.split(" ", 1)
        target = run_dir / name
        if not target.exists():
            bad.append(f"{name}: missing")
        elif sha256_file(target) != digest:
            bad.append(f"{name}: checksum mismatch")
    return bad
