"""Binary checkpoint container: magic, JSON header, named tensors.

Layout (little-endian):
    8 bytes  magic "MOECKPT1"
    u32      JSON header byte length, then that many UTF-8 bytes
    u32      tensor count
    per tensor:
        u16  name byte length, then the UTF-8 name
        u8   dtype (0 = float32, 1 = float64)
        u8   rank
        rank x u64 dims
        raw row-major values

Parameters are written as float64 so that loading restores them bitwise and
a resumed training run follows the original trajectory exactly; float32
entries are accepted on read.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError
from .fileio import atomic_write_bytes

MAGIC = b"MOECKPT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def write_checkpoint(path: str, header: dict, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ValueError(f"tensor {name} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    atomic_write_bytes(path, b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated while reading {what} at offset {self.pos}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        if magic[:7] == MAGIC[:7]:
            raise FormatError(
                f"{path}: unsupported checkpoint version {magic!r} at offset 0")
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    (header_len,) = r.unpack("<I", "header length")
    header_at = r.pos
    try:
        header = json.loads(r.take(header_len, "JSON header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: invalid JSON header at offset {header_at}: {exc}") from exc
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        dtype_code, rank = r.unpack("<BB", f"tensor {name} dtype/rank")
        if dtype_code not in _DTYPES:
            raise FormatError(f"{path}: tensor {name} has unknown dtype code {dtype_code}")
        dims = r.unpack(f"<{rank}Q", f"tensor {name} dims")
        dtype = _DTYPES[dtype_code]
        n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = r.take(n_values * dtype.itemsize, f"tensor {name} values")
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes at offset {r.pos}")
    return header, tensors
