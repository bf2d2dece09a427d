"""Binary checkpoint container.

Layout: ``b"FGZE"``, u32 version, u32 header length, UTF-8 JSON header, then
one little-endian float32 blob per tensor in the order listed under
``header["tensors"]`` (each entry ``[name, shape]``).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FGZE"
VERSION = 1


class CheckpointVersionError(ValueError):
    pass


def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["tensors"] = [[name, list(arr.shape)] for name, arr in tensors.items()]
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an FGZE checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    off = 12 + hlen
    tensors = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} unexpected trailing bytes")
    return header, tensors
