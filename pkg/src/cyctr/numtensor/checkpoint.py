"""Checkpoint files: a JSON manifest plus one little-endian float64 blob.

``save(params, "run/model")`` writes ``run/model.json`` and ``run/model.bin``.
The manifest maps each parameter name to its shape, dtype and byte offset.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .module import Parameter

FORMAT = "cyctr-checkpoint"


class CheckpointError(ValueError):
    pass


def _paths(path: Union[str, Path]):
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def save(params: Mapping[str, Parameter], path: Union[str, Path]) -> Path:
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = {}, [], 0
    for name, p in params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries[name] = {"shape": list(p.shape), "dtype": "float64", "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "version": 1,
        "byteorder": "little",
        "blob": blob_path.name,
        "nbytes": len(blob),
        "crc32": zlib.crc32(blob),
        "params": entries,
    }
    blob_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_arrays(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    manifest_path, blob_path = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{manifest_path} is not a {FORMAT} manifest")
    blob = (manifest_path.parent / manifest.get("blob", blob_path.name)).read_bytes()
    if len(blob) != manifest["nbytes"] or zlib.crc32(blob) != manifest["crc32"]:
        raise CheckpointError(f"checkpoint blob {blob_path} failed its size/CRC32 check")
    out = {}
    for name, entry in manifest["params"].items():
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        out[name] = np.frombuffer(blob[start:stop], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    return out


def load_into(params: Mapping[str, Parameter], path: Union[str, Path]) -> None:
    """Copy checkpoint values into ``params``; names and shapes must match exactly."""
    arrays = load_arrays(path)
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise CheckpointError(f"checkpoint/model parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {arrays[name].shape}, model {p.shape}")
        p.data[...] = arrays[name]
