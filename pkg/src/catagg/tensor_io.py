"""Binary tensor persistence.

Single-tensor format: magic "CATT", u8 dtype tag (0=f32, 1=f64), u8 rank,
u32 little-endian extents, then raw little-endian scalars row-major.

Bundle format (checkpoints, multi-tensor artifacts): magic "CATB",
u32 version, u32 JSON metadata length + UTF-8 JSON, u32 record count,
then per record a u16 name length + UTF-8 name + one CATT record.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

from .errors import CheckpointError

__all__ = ["save_tensor", "load_tensor", "write_tensor", "read_tensor",
           "save_bundle", "load_bundle"]

MAGIC = b"CATT"
BUNDLE_MAGIC = b"CATB"
BUNDLE_VERSION = 1

_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_OF = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated tensor file: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    dt = np.dtype(arr.dtype)
    if dt not in _TAG_OF:
        raise CheckpointError(f"unsupported dtype {dt}; only f32/f64")
    if arr.ndim > 255:
        raise CheckpointError("tensor rank exceeds format limit")
    f.write(MAGIC)
    f.write(struct.pack("<BB", _TAG_OF[dt], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; expected {MAGIC!r}")
    tag, rank = struct.unpack("<BB", _read_exact(f, 2))
    if tag not in _DTYPE_OF:
        raise CheckpointError(f"unknown dtype tag {tag}")
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    dt = _DTYPE_OF[tag]
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = _read_exact(f, n * dt.itemsize)
    arr = np.frombuffer(raw, dtype=dt).reshape(shape)
    # native byte order, writable copy (astype always copies here)
    return arr.astype(dt.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_tensor(f)
        if f.read(1):
            raise CheckpointError(f"trailing bytes after tensor in {path}")
        return arr


def save_bundle(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(BUNDLE_MAGIC)
        f.write(struct.pack("<I", BUNDLE_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode()
            if len(nb) > 0xFFFF:
                raise CheckpointError(f"record name too long: {name[:40]}...")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            write_tensor(f, arr)


def load_bundle(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != BUNDLE_MAGIC:
            raise CheckpointError(f"bad bundle magic {magic!r}; expected {BUNDLE_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != BUNDLE_VERSION:
            raise CheckpointError(f"bundle version {version} unsupported (want {BUNDLE_VERSION})")
        (mlen,) = struct.unpack("<I", _read_exact(f, 4))
        meta = json.loads(_read_exact(f, mlen).decode())
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, nlen).decode()
            if name in arrays:
                raise CheckpointError(f"duplicate record '{name}'")
            arrays[name] = read_tensor(f)
        if f.read(1):
            raise CheckpointError(f"trailing bytes after bundle in {path}")
        return arrays, meta
