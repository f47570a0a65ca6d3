"""Raw f32 matrix files and parameter checkpoints.

Matrices are raw little-endian float32 with a JSON sidecar carrying
{frames, dim} plus whatever extra metadata the writer adds. Checkpoints
are one f32 blob plus a manifest listing (name, shape, offset) per array
and a free-form meta object (config snapshot, step, rng state, ...).
"""
from __future__ import annotations

import json

import numpy as np


def save_matrix(path, arr: np.ndarray, **meta) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("save_matrix expects a 2-D array")
    with open(path, "wb") as fh:
        fh.write(arr.astype("<f4").tobytes())
    sidecar = {"frames": int(arr.shape[0]), "dim": int(arr.shape[1]), **meta}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh)


def load_matrix(path):
    """Returns (float32 array (frames, dim), sidecar metadata dict).

    The width key may be 'dim' or 'F' (external feature files use F).
    """
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if "frames" not in meta or ("dim" not in meta and "F" not in meta):
        raise ValueError(f"{path}: sidecar must declare 'frames' and 'dim' (or 'F')")
    frames, dim = int(meta["frames"]), int(meta.get("dim", meta.get("F")))
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != frames * dim:
        raise ValueError(f"{path}: expected {frames * dim} floats, found {raw.size}")
    return raw.reshape(frames, dim), meta


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write <path> (f32 blob) and <path>.json (manifest)."""
    entries = []
    offset = 0
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            blob = np.asarray(arr).astype("<f4").tobytes()
            fh.write(blob)
            entries.append({"name": name, "shape": list(np.asarray(arr).shape), "offset": offset})
            offset += len(blob)
    manifest = {"meta": meta, "params": entries}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh)


def load_checkpoint(path):
    """Returns (dict name -> float32 array, meta dict)."""
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if "params" not in manifest or "meta" not in manifest:
        raise ValueError(f"{path}: not a checkpoint manifest")
    with open(path, "rb") as fh:
        blob = fh.read()
    arrays = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        piece = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        if piece.size != count:
            raise ValueError(f"{path}: truncated checkpoint at '{entry['name']}'")
        arrays[entry["name"]] = piece.reshape(shape).copy()
    return arrays, manifest["meta"]
