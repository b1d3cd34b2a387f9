"""NFM1 feature-map container, implemented against the published byte layout:
magic "NFM1"; little-endian u32 version=1, height_f, width_f, dim, source_H,
source_W; u32 name-length + UTF-8 view_id; u32 scale_id; then
height_f*width_f*dim little-endian f32 values, row-major, channel-last.

Standalone on purpose: this tool only shares the file format with the NeRF
trainer, not code.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NFM_MAGIC = b"NFM1"


class NfmError(ValueError):
    pass


@dataclass
class FeatureMap:
    view_id: str
    scale_id: int
    data: np.ndarray  # (height_f, width_f, dim) float32
    source_size: tuple[int, int]  # (H, W) of the originating image

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise NfmError(f"feature grid must be 3-d, got {self.data.shape}")


def write_nfm1(path, fmap: FeatureMap) -> None:
    hf, wf, dim = fmap.data.shape
    sh, sw = fmap.source_size
    name = fmap.view_id.encode("utf-8")
    out = bytearray()
    out += NFM_MAGIC
    out += struct.pack("<IIIIII", 1, hf, wf, dim, sh, sw)
    out += struct.pack("<I", len(name)) + name
    out += struct.pack("<I", fmap.scale_id)
    out += np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_nfm1(path) -> FeatureMap:
    buf = Path(path).read_bytes()
    if buf[:4] != NFM_MAGIC:
        raise NfmError(f"{path}: bad magic {buf[:4]!r}")
    version, hf, wf, dim, sh, sw = struct.unpack_from("<IIIIII", buf, 4)
    if version != 1:
        raise NfmError(f"{path}: unsupported NFM version {version}")
    pos = 28
    (nlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    view_id = buf[pos:pos + nlen].decode("utf-8")
    pos += nlen
    (scale_id,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    count = hf * wf * dim
    if len(buf) - pos != 4 * count:
        raise NfmError(
            f"{path}: payload {len(buf) - pos} bytes, expected {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
    return FeatureMap(view_id=view_id, scale_id=int(scale_id),
                      data=data.reshape(hf, wf, dim).copy(),
                      source_size=(sh, sw))
