"""Named-tensor container: a text manifest plus one little-endian float32 blob.

A container is a directory holding ``manifest.tsv`` and ``tensors.bin``.
The manifest starts with a version line, may carry ``#key=value`` metadata
lines, and then lists one tensor per line as
``name<TAB>f32<TAB>comma-separated shape<TAB>byte offset``.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

MAGIC = "#bartfusion-tensors v1"
MANIFEST = "manifest.tsv"
BLOB = "tensors.bin"
_LE_F32 = np.dtype("<f4")


def save_tensors(path, tensors: Mapping[str, np.ndarray], meta: Optional[Mapping[str, str]] = None) -> Path:
    """Write ``tensors`` in insertion order; returns the container directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        if "\n" in str(value) or "=" in key:
            raise ValueError(f"metadata entry {key!r} cannot be stored")
        lines.append(f"#{key}={value}")
    offset = 0
    chunks = []
    for name, value in tensors.items():
        if not name or any(c in name for c in "\t\n\r") or name.startswith("#"):
            raise ValueError(f"tensor name {name!r} cannot be stored")
        arr = np.ascontiguousarray(value, dtype=_LE_F32)
        shape = ",".join(str(n) for n in arr.shape)
        lines.append(f"{name}\tf32\t{shape}\t{offset}")
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    tmp = path / (BLOB + ".tmp")
    with open(tmp, "wb") as fh:
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path / BLOB)
    (path / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> tuple:
    """Return ``(entries, meta)`` where entries are ``(name, shape, offset)``."""
    text = (Path(path) / MANIFEST).read_text(encoding="utf-8")
    rows = text.splitlines()
    if not rows or rows[0] != MAGIC:
        raise ValueError(f"{path}: not a tensor container")
    meta, entries = {}, []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if row.startswith("#"):
            key, _, value = row[1:].partition("=")
            meta[key] = value
            continue
        parts = row.split("\t")
        if len(parts) != 4 or parts[1] != "f32":
            raise ValueError(f"{path}: malformed manifest line {lineno}")
        shape = tuple(int(n) for n in parts[2].split(",")) if parts[2] else ()
        entries.append((parts[0], shape, int(parts[3])))
    return entries, meta


def load_tensors(path) -> tuple:
    """Return ``(tensors, meta)``; tensors keep manifest order."""
    entries, meta = read_manifest(path)
    blob = (Path(path) / BLOB).read_bytes()
    tensors = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise ValueError(f"{path}: blob too short for {name}")
        tensors[name] = np.frombuffer(blob, dtype=_LE_F32, count=count, offset=offset).reshape(shape).astype(np.float32)
    return tensors, meta
