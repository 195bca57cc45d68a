"""Canonical JSON serialization.

All JSON this package writes goes through dump_canonical so identical data
produces identical bytes: sorted keys, two-space indent, trailing newline,
shortest-repr floats. Byte-for-byte reproducibility of run artifacts depends
on every writer using these helpers.
"""

from __future__ import annotations

import json
from pathlib import Path


def dump_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(dump_canonical(obj), encoding="utf-8")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
