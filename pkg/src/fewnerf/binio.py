"""Shared binary container: magic, version, JSON config, named f32 blobs.

Used by the NCP1 checkpoint and MVW1 weight files. Layout, all little-endian:
magic (4 bytes), version u32, config-length u32 + UTF-8 JSON, then per blob
name-length u32, name, rank u32, rank dims u32, float32 data. Blobs are
written in sorted name order so identical state produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


def write_blob_file(path, magic: bytes, config: dict,
                    arrays: dict[str, np.ndarray], version: int = 1) -> None:
    if len(magic) != 4:
        raise FormatError("magic must be 4 bytes")
    out = bytearray()
    out += magic
    out += struct.pack("<I", version)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg
    for name in sorted(arrays):
        # asarray with order="C" keeps 0-d arrays 0-d (ascontiguousarray
        # would promote them to rank 1)
        arr = np.asarray(arrays[name], dtype=np.float32, order="C")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_blob_file(path, magic: bytes) -> tuple[int, dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != magic:
        raise FormatError(
            f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    pos = 4
    (version,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    (clen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    config = json.loads(buf[pos:pos + clen].decode("utf-8"))
    pos += clen
    arrays: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        arrays[name] = arr.reshape(dims).copy()
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after last blob")
    return version, config, arrays
