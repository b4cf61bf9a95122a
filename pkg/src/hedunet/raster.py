"""RAS1 raster container and PGM previews.

RAS1 layout (all little-endian)::

    b"RAS1" | u32 channels | u32 height | u32 width | u8 dtype | payload

dtype 0 is float32, 1 is uint8; the payload is channel-major, row-major.
"""
from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RAS1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


def write_raster(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"raster must be 2-D or 3-D, got shape {arr.shape}")
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        code, arr = 1, arr.astype(np.uint8)
    else:
        code, arr = 0, arr.astype("<f4")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIB", c, h, w, code))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_raster(path) -> np.ndarray:
    """Return a C x H x W array (float32 or uint8)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic, not a RAS1 raster")
    c, h, w, code = struct.unpack_from("<IIIB", raw, 4)
    if code not in _CODES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    dt = _CODES[code]
    payload = raw[17:]
    if len(payload) != c * h * w * dt.itemsize:
        raise ValueError(f"{path}: payload size mismatch")
    arr = np.frombuffer(payload, dtype=dt).reshape(c, h, w)
    return arr.astype(np.float32) if code == 0 else arr.copy()


def to_uint8(img: np.ndarray, log: bool = False) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if log:
        a = np.log10(np.maximum(a, 0) + 1e-12 * max(a.max(), 1e-30))
    lo, hi = np.nanmin(a), np.nanmax(a)
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round(255 * (a - lo) / (hi - lo)).astype(np.uint8)


def write_pgm(path, img: np.ndarray, log: bool = False, box: tuple[int, int, int, int] | None = None) -> None:
    """Binary 8-bit PGM; ``box`` (top, left, bottom, right) is burned in white."""
    a = np.asarray(img)
    if a.ndim != 2:
        raise ValueError("PGM export expects a single 2-D channel")
    u8 = a.astype(np.uint8) * 255 if a.dtype in (np.bool_, np.uint8) and a.max() <= 1 else to_uint8(a, log)
    if box is not None:
        u8 = u8.copy()
        h, w = u8.shape
        t, l, b, r = (max(box[0], 0), max(box[1], 0), min(box[2], h - 1), min(box[3], w - 1))
        u8[t, l : r + 1] = 255
        u8[b, l : r + 1] = 255
        u8[t : b + 1, l] = 255
        u8[t : b + 1, r] = 255
    h, w = u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(u8.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)
