"""Episode files: ``<stem>.json`` manifest plus ``<stem>.bin`` raw blob.

Arrays are stored row-major little-endian: images as float64, masks as
uint8. The manifest carries a CRC32 of the whole blob; keys it does not
know about are ignored so newer writers stay readable.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path
from typing import Union

import numpy as np

from .synthetic import Episode

FORMAT = "cyctr-episode"
_DTYPES = {"float64": "<f8", "uint8": "u1"}


class EpisodeFormatError(ValueError):
    pass


def _paths(path: Union[str, Path]):
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def _arrays(ep: Episode):
    for k, (img, mask) in enumerate(ep.supports):
        yield f"support_image_{k}", np.asarray(img, dtype=np.float64)
        yield f"support_mask_{k}", np.asarray(mask, dtype=np.uint8)
    yield "query_image", np.asarray(ep.query_image, dtype=np.float64)
    if ep.query_mask is not None:
        yield "query_mask", np.asarray(ep.query_mask, dtype=np.uint8)


def write_episode(ep: Episode, path: Union[str, Path]) -> Path:
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = {}, [], 0
    for name, arr in _arrays(ep):
        dtype = arr.dtype.name
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    H, W = ep.query_image.shape[:2]
    manifest = {
        "format": FORMAT,
        "version": 1,
        "class_id": int(ep.class_id),
        "K": ep.K,
        "H": int(H),
        "W": int(W),
        "byteorder": "little",
        "blob": blob_path.name,
        "nbytes": len(blob),
        "crc32": zlib.crc32(blob),
        "arrays": entries,
    }
    blob_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def read_episode(path: Union[str, Path]) -> Episode:
    manifest_path, blob_path = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
        K, arrays = int(manifest["K"]), manifest["arrays"]
        class_id = int(manifest["class_id"])
        expected_crc, expected_size = manifest["crc32"], manifest["nbytes"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise EpisodeFormatError(f"corrupt episode manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise EpisodeFormatError(f"{manifest_path} is not a {FORMAT} manifest")
    try:
        blob = (manifest_path.parent / manifest.get("blob", blob_path.name)).read_bytes()
    except OSError as exc:
        raise EpisodeFormatError(f"missing episode blob: {exc}") from exc
    if len(blob) != expected_size or zlib.crc32(blob) != expected_crc:
        raise EpisodeFormatError(f"episode blob {blob_path} failed its size/CRC32 check")

    def get(name):
        try:
            e = arrays[name]
            raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
            return np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
        except (KeyError, ValueError) as exc:
            raise EpisodeFormatError(f"bad array entry {name!r}: {exc}") from exc

    supports = [(get(f"support_image_{k}").astype(np.float64), get(f"support_mask_{k}")) for k in range(K)]
    query_mask = get("query_mask") if "query_mask" in arrays else None
    return Episode(supports, get("query_image").astype(np.float64), query_mask, class_id)
