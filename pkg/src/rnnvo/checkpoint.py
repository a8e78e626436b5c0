"""Versioned checkpoint container.

Layout: 8-byte magic, little-endian uint32 format version, uint64 manifest
length, UTF-8 JSON manifest, then the raw little-endian arrays back to back.
The manifest lists each array's name, shape, dtype, byte offset, size and
CRC32, so truncation or corruption is detected on load.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"RNNVOCKP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint."""


def save_arrays(path, arrays: Dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset,
                        "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": FORMAT_VERSION, "meta": meta, "arrays": entries,
                           "data_bytes": offset}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_arrays(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    buf = path.read_bytes()
    if len(buf) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, mlen = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _HEADER.size + mlen
    if len(buf) < start:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(buf[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    if len(buf) - start != manifest["data_bytes"]:
        raise CheckpointError(f"{path}: expected {manifest['data_bytes']} data bytes, "
                              f"found {len(buf) - start} (truncated or corrupt)")
    arrays = {}
    for e in manifest["arrays"]:
        raw = buf[start + e["offset"]:start + e["offset"] + e["nbytes"]]
        if zlib.crc32(raw) != e["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch for {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, manifest["meta"]
