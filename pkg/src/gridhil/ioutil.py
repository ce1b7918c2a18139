"""Canonical JSON serialization and content hashing.

Every artifact that participates in determinism checks (datasets, reports,
manifests) goes through :func:`canonical_dumps` so that equal values produce
byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def canonical_dumps(obj) -> str:
    """JSON with sorted keys, compact separators, and no NaN/inf leakage."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_text(text: str) -> str:
    return sha256_bytes(text.encode("utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_json(path, obj, indent: int | None = None) -> None:
    if indent is None:
        write_text(path, canonical_dumps(obj) + "\n")
    else:
        text = json.dumps(obj, sort_keys=True, indent=indent, allow_nan=False)
        write_text(path, text + "\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
