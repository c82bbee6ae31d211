"""Binary tensor and checkpoint formats.

Tensor file ("NST1"): magic bytes ``N S T 1``, u8 dtype code (0 = float32),
u32 little-endian ndim, ndim x u32 dims, then the row-major little-endian
float32 payload. Checkpoint container: u32 entry count, then per entry a
u16 name length, the UTF-8 name, and an embedded NST1 tensor. Round trips
are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"NST1"
_DTYPE_F32 = 0


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(d < 1 for d in arr.shape):
        raise ContractError(f"NST1 requires all dims >= 1, got shape {arr.shape}")
    head = MAGIC + struct.pack("<BI", _DTYPE_F32, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f4", copy=False).tobytes()


def tensor_from_bytes(blob: bytes, offset: int = 0) -> tuple:
    """Decode one NST1 record; returns (array, next_offset)."""
    if blob[offset:offset + 4] != MAGIC:
        raise ContractError("bad NST1 magic")
    dtype_code, ndim = struct.unpack_from("<BI", blob, offset + 4)
    if dtype_code != _DTYPE_F32:
        raise ContractError(f"unsupported NST1 dtype code {dtype_code}")
    pos = offset + 9
    dims = struct.unpack_from(f"<{ndim}I", blob, pos)
    pos += 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
    return arr, pos + 4 * count


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def load_tensor(path) -> np.ndarray:
    arr, _ = tensor_from_bytes(Path(path).read_bytes())
    return arr


def save_checkpoint(path, entries: dict) -> None:
    """Write a name->array mapping; iteration order is preserved."""
    chunks = [struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(tensor_bytes(arr))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict:
    blob = Path(path).read_bytes()
    (count,) = struct.unpack_from("<I", blob, 0)
    pos = 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        arr, pos = tensor_from_bytes(blob, pos)
        out[name] = arr
    return out
