"""Report writers: JSON, CSV with 17 significant digits, 8-bit PGM, manifest."""

from __future__ import annotations

import hashlib
import json
import math
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grid import Grid


def _plain(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats into JSON values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (complex, np.complexfloating)):
        return {"re": _plain(obj.real), "im": _plain(obj.imag)}
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps(obj))
    return path


def write_csv(path, header: Sequence[str], columns: Iterable) -> Path:
    """Columns of equal length; floats in ``%.17g`` so they round-trip exactly."""
    cols = [np.asarray(c).ravel() for c in columns]
    if len(cols) != len(header):
        raise ValueError("header and columns differ in length")
    n = cols[0].size
    if any(c.size != n for c in cols):
        raise ValueError("columns differ in length")
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*cols):
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def _fmt(v) -> str:
    if isinstance(v, (np.integer, int)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (np.bool_, bool)):
        return "1" if v else "0"
    return "%.17g" % float(v)


def write_field_csv(path, grid: Grid, **fields) -> Path:
    """One row per node: x, y and each named ``(nx, ny)`` or flat field."""
    X, Y = grid.mesh()
    names = list(fields)
    cols = [X.ravel(), Y.ravel()] + [np.asarray(fields[k]).ravel() for k in names]
    return write_csv(path, ["x", "y"] + names, cols)


def to_gray(values: np.ndarray) -> np.ndarray:
    """Linear map onto 0..255 with the maximum at 255 (the minimum at 0 unless constant)."""
    a = np.asarray(values, dtype=float)
    lo, hi = float(np.min(a)), float(np.max(a))
    if hi <= lo:
        return np.full(a.shape, 255 if hi > 0 else 0, dtype=np.uint8)
    return np.rint(255.0 * (a - lo) / (hi - lo)).astype(np.uint8)


def write_pgm(path, values: np.ndarray) -> Path:
    """Binary PGM (P5) of an ``(nx, ny)`` node array, y increasing upwards."""
    img = to_gray(np.asarray(values, dtype=float).T[::-1])
    h, w = img.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, mx = int(parts[1]), int(parts[2]), int(parts[3])
    if mx != 255:
        raise ValueError("only 8-bit PGM supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def sha256(path) -> str:
    d = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            d.update(chunk)
    return d.hexdigest()


def write_manifest(directory, files: Iterable, extra: dict | None = None) -> Path:
    """manifest.json listing each file (relative to ``directory``) with size and sha256."""
    directory = Path(directory)
    entries = []
    for f in sorted({Path(f) for f in files}):
        p = f if f.is_absolute() else directory / f
        entries.append({"file": os.path.relpath(p, directory), "bytes": p.stat().st_size, "sha256": sha256(p)})
    body = {"files": entries}
    if extra:
        body.update(extra)
    return write_json(directory / "manifest.json", body)
