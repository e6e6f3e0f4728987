"""Flat binary container for name-keyed float64 parameter dicts.

Layout, all little-endian:

    magic   4 bytes  b"NDGC"
    version 1 byte   currently 1
    count   uint32   number of parameters
    then per parameter, in the order given:
        name_len uint16, name utf-8 bytes,
        rank uint8, extents rank * uint32,
        payload extent-product float64 values

Round-trips bit-exactly. Loads of foreign or truncated files fail fast.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["save_params", "load_params", "CheckpointError", "MAGIC", "VERSION"]

MAGIC = b"NDGC"
VERSION = 1


class CheckpointError(IOError):
    """Raised for bad magic, unsupported version, or truncated payloads."""


def save_params(path, params: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"parameter rank too large: {name!r}")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def load_params(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        piece = view[off:off + n]
        off += n
        return piece

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a parameter checkpoint")
    (version,) = struct.unpack("<B", take(1))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(8 * size)
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = arr
    if off != len(view):
        raise CheckpointError(f"{path}: {len(view) - off} trailing bytes")
    return params
