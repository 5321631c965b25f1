"""Named-tensor container used for checkpoints and embedding exports.

Layout (little-endian)::

    magic    4s  b"UATV"
    version  u32
    count    u32
    per tensor:
        u32 name length, name bytes (utf-8)
        u8 dtype code, u8 rank, u32 dims[rank]
        payload (row-major)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"UATV"
VERSION = 1
META_KEY = "__meta__"

DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
CODES = {v: k for k, v in DTYPES.items()}


class TensorFileError(ValueError):
    pass


def encode_meta(meta: Mapping) -> np.ndarray:
    raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return np.frombuffer(raw, dtype=np.uint8).copy()


def decode_meta(arr: np.ndarray) -> dict:
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode())


def dumps(tensors: Mapping[str, np.ndarray], version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<II", version, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if arr.dtype == np.bool_:
            arr, dt = arr.astype(np.uint8), np.dtype("u1")
        if dt not in CODES:
            raise TensorFileError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BB", CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def loads(data: bytes, expect_version: int = VERSION) -> dict[str, np.ndarray]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TensorFileError(f"truncated tensor file at byte {pos}")
        out = data[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise TensorFileError("bad magic; not a tensor file")
    version, count = struct.unpack("<II", take(8))
    if version != expect_version:
        raise TensorFileError(f"unsupported tensor file version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode()
        code, rank = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise TensorFileError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(take(size), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(data):
        raise TensorFileError(f"{len(data) - pos} trailing bytes")
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
