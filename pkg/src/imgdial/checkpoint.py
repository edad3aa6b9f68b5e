"""Checkpoint files: one binary blob with a JSON header.

Layout (little-endian):

    bytes 0..7    magic ``IMGDIALC``
    bytes 8..15   uint64 header length ``n``
    bytes 16..16+n  UTF-8 JSON header
    remainder     concatenated raw tensor bytes

Header schema (``format_version`` 1)::

    {
      "format_version": 1,
      "meta": {...},                       # caller-provided, JSON-serializable
      "tensors": {
        "<name>": {"shape": [...], "dtype": "float64",
                    "offset": <int>, "nbytes": <int>}
      }
    }

Offsets are relative to the start of the payload section.  Tensors are stored
in sorted name order so files are byte-reproducible.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IMGDIALC"
FORMAT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None):
    path = Path(path)
    entries = {}
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        raw = arr.tobytes()
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "offset": len(payload),
            "nbytes": len(raw),
        }
        payload.extend(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(bytes(payload))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint version {header.get('format_version')}"
            )
        payload = f.read()
    tensors = {}
    for name, entry in header["tensors"].items():
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        tensors[name] = arr
    return tensors, header["meta"]
