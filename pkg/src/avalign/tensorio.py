"""Binary tensor container used for checkpoints and feature files.

Layout::

    b"AVTC"  magic
    uint32   format version (little-endian)
    uint64   header length in bytes
    bytes    UTF-8 JSON header {"meta": {...}, "tensors": [{name, shape, dtype}, ...]}
    bytes    raw little-endian payloads, concatenated in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVTC"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class FormatError(ValueError):
    """File is not a valid tensor container or has the wrong content."""


def write_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    entries, payloads = [], []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = "float32" if arr.dtype == np.float32 else "float64"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
        entries.append({"name": name, "shape": list(data.shape), "dtype": dtype})
        payloads.append(data.tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for p in payloads:
            fh.write(p)


def read_tensors(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(dt.newbyteorder("="))
        offset += nbytes
    return tensors, header["meta"]
