"""Directory containers: ``manifest.json`` plus raw little-endian float64 arrays.

Every array ``name`` lives in ``<dir>/<name>.bin``; its shape and memory
order are recorded under ``manifest["arrays"][name]``.  Arrays are written in
C (row-major) order unless ``order="F"`` is requested for a given array.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

_DTYPE = np.dtype("<f8")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_container(path, manifest: dict, arrays: dict, orders: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    orders = orders or {}
    meta = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=_DTYPE)
        order = orders.get(name, "C")
        (path / f"{name}.bin").write_bytes(arr.tobytes(order=order))
        meta[name] = {"shape": list(arr.shape), "dtype": "float64-le", "order": order}
    full = dict(_jsonable(manifest))
    full["arrays"] = meta
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(full, indent=2, sort_keys=True))
    os.replace(tmp, path / "manifest.json")
    return path


def read_container(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    arrays = {}
    for name, meta in manifest.get("arrays", {}).items():
        raw = np.frombuffer((path / f"{name}.bin").read_bytes(), dtype=_DTYPE)
        arrays[name] = raw.reshape(meta["shape"], order=meta.get("order", "C")).copy()
    return manifest, arrays


def content_hash(*items) -> str:
    """sha256 over arrays (raw bytes + shape) and JSON-able objects."""
    h = hashlib.sha256()
    for item in items:
        if isinstance(item, np.ndarray):
            h.update(str(item.shape).encode())
            h.update(np.ascontiguousarray(item, dtype=_DTYPE).tobytes())
        else:
            h.update(json.dumps(_jsonable(item), sort_keys=True).encode())
    return h.hexdigest()


def hash_directory(path, exclude=("timing.json",)) -> str:
    """sha256 over relative names and bytes of every file, skipping ``exclude`` names."""
    h = hashlib.sha256()
    for f in sorted(Path(path).rglob("*")):
        if f.is_file() and f.name not in exclude:
            h.update(str(f.relative_to(path)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def hash_path(path) -> str:
    """sha256 of a file's bytes, or of a directory tree via :func:`hash_directory`."""
    path = Path(path)
    if path.is_dir():
        return hash_directory(path)
    return hashlib.sha256(path.read_bytes()).hexdigest()
