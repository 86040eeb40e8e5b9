"""Checkpoint container: JSON manifest followed by raw little-endian payloads.

Layout::

    8 bytes   magic  b"DSCKPT01"
    8 bytes   manifest length, uint64 little-endian
    N bytes   UTF-8 JSON manifest {"tensors": [...], "meta": {...}}
    ...       payloads; each tensor entry gives dtype, shape, offset, nbytes
              (offsets are relative to the end of the manifest)
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSCKPT01"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save(path, arrays, meta=None):
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load(path):
    """Return ``(arrays, meta)``; arrays come back in native byte order."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (mlen,) = struct.unpack("<Q", buf[8:16])
    manifest = json.loads(buf[16 : 16 + mlen].decode("utf-8"))
    base = 16 + mlen
    arrays = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        raw = buf[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ValueError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(e["dtype"])
    return arrays, manifest["meta"]
