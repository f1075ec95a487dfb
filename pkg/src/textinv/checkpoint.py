"""Checkpoint container: magic line, one JSON header line, then raw little-endian float32 blobs.

The header records every blob's name, shape, byte offset and SHA-256 so a
reader can verify each blob independently.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"TEXTINV-CKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _blob_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype.kind in "iub":
        return np.ascontiguousarray(arr, dtype="<i8").tobytes()
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def write_checkpoint(path, arrays: dict, header: dict | None = None) -> str:
    """Write ``arrays`` (name -> ndarray). Returns the SHA-256 of the whole file."""
    blobs, payload, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = _blob_bytes(arr)
        blobs.append({"name": name, "shape": list(arr.shape),
                      "dtype": "i8" if arr.dtype.kind in "iub" else "f4",
                      "offset": offset, "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()})
        payload.append(raw)
        offset += len(raw)
    doc = {"version": VERSION, **(header or {}), "blobs": blobs}
    head = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    data = MAGIC + head + b"".join(payload)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return (header, arrays); raises :class:`CheckpointError` on any checksum mismatch."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    nl = data.index(b"\n", len(MAGIC))
    header = json.loads(data[len(MAGIC):nl])
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    body = data[nl + 1:]
    arrays = {}
    for blob in header["blobs"]:
        raw = body[blob["offset"]:blob["offset"] + blob["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != blob["sha256"]:
            raise CheckpointError(f"{path}: checksum mismatch in blob {blob['name']!r}")
        dtype = "<i8" if blob["dtype"] == "i8" else "<f4"
        arrays[blob["name"]] = np.frombuffer(raw, dtype=dtype).reshape(blob["shape"]).copy()
    return header, arrays
