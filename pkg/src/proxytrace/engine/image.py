"""Image output: PPM/PNG for viewing, a raw float dump for exact diffing."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

ACCUM_MAGIC = b"PTAC"


def write_image(path, rgb8: np.ndarray):
    path = Path(path)
    rgb8 = np.ascontiguousarray(rgb8, dtype=np.uint8)
    if path.suffix.lower() == ".ppm":
        h, w, _ = rgb8.shape
        path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb8.tobytes())
    else:
        Image.fromarray(rgb8, "RGB").save(path)


def write_accum(path, accum: np.ndarray, spp: int):
    """``PTAC``, u32 width, u32 height, u32 spp, then H x W x 3 float32 (little-endian)."""
    h, w, _ = accum.shape
    Path(path).write_bytes(ACCUM_MAGIC + struct.pack("<III", w, h, spp)
                           + np.ascontiguousarray(accum, dtype="<f4").tobytes())


def read_accum(path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    if data[:4] != ACCUM_MAGIC:
        raise ValueError(f"{path}: not an accumulation dump")
    w, h, spp = struct.unpack_from("<III", data, 4)
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != w * h * 3:
        raise ValueError(f"{path}: truncated accumulation dump")
    return body.reshape(h, w, 3).astype(np.float32), spp
