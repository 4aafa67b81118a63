"""Flat binary tensor container.

Layout::

    bytes 0..7    magic b"REVFTCK1"
    bytes 8..15   header length N, unsigned 64-bit little-endian
    bytes 16..    N bytes of UTF-8 JSON header
    then          raw little-endian tensor buffers, back to back

Header schema::

    {"format": "revft-checkpoint", "version": 1,
     "metadata": {...free-form JSON...},
     "tensors": {name: {"precision": "single"|"double",
                        "shape": [int, ...],
                        "offset": int,     # from start of the data section
                        "nbytes": int}}}

Tensors are written in sorted name order, so the same tensors always give
the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from revft.exceptions import ConfigError
from revft.tensor import Precision

MAGIC = b"REVFTCK1"
FORMAT = "revft-checkpoint"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    entries = {}
    buffers = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        precision = Precision.of(arr)
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries[name] = {
            "precision": precision.value,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        buffers.append(raw)
        offset += len(raw)
    header = {"format": FORMAT, "version": VERSION, "metadata": metadata or {}, "tensors": entries}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in buffers:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ConfigError(f"{path}: not a revft checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n].decode("utf-8"))
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint header")
    base = 16 + n
    tensors = {}
    for name, entry in header["tensors"].items():
        dtype = Precision(entry["precision"]).dtype.newbyteorder("<")
        start = base + entry["offset"]
        raw = data[start : start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ConfigError(f"{path}: truncated tensor {name}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="))
    return tensors, header["metadata"]
