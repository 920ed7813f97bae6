"""Binary checkpoint container: little-endian header + named f32 arrays.

Layout:
    magic   4 bytes  b"RRCP"
    version u32      currently 1
    digest  u16 length + ASCII hex (config digest of the producing run)
    count   u32      number of arrays
    per array:
        u16 name length + UTF-8 name
        u8 ndim, then ndim * u32 dims
        raw '<f4' data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RRCP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, digest: str, arrays: dict[str, np.ndarray]) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    dig = digest.encode("ascii")
    buf += struct.pack("<H", len(dig)) + dig
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        buf += struct.pack("<H", len(name_b)) + name_b
        buf += struct.pack("<B", data.ndim)
        buf += struct.pack(f"<{data.ndim}I", *data.shape)
        buf += data.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (dlen,) = struct.unpack_from("<H", raw, off)
    off += 2
    digest = raw[off : off + dlen].decode("ascii")
    off += dlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        arrays[name] = arr.copy()
    return digest, arrays
