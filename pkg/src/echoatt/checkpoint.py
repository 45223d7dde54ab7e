"""Binary tensor container: JSON header followed by little-endian f64 payloads.

Layout::

    b"ECHOATT1" | u64 header length | header JSON (utf-8) | payload bytes

The header holds caller metadata under ``"meta"`` and a ``"tensors"`` list of
``{name, shape, offset}`` records; offsets count bytes from the payload start.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"ECHOATT1"


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    directory, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": directory, "payload_bytes": offset},
                        sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in chunks:
            f.write(raw)


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise InputError(f"{path} is not an echoatt checkpoint")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    payload = memoryview(blob)[16 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise InputError(f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    out = {}
    for rec in header["tensors"]:
        count = int(np.prod(rec["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=rec["offset"])
        out[rec["name"]] = arr.astype(np.float64).reshape(rec["shape"])
    return header["meta"], out
