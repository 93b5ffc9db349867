"""Grayscale image files: binary portable graymap (P5) and, optionally, PNG."""
from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return (integer grid, maxval) of a P5 file."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    w, pos = _read_token(buf, pos)
    h, pos = _read_token(buf, pos)
    mx, pos = _read_token(buf, pos)
    w, h, mx = int(w), int(h), int(mx)
    if not 0 < mx < 65536:
        raise ValueError(f"{path}: bad maxval {mx}")
    pos += 1  # single whitespace after maxval
    dtype = np.dtype(">u2") if mx > 255 else np.dtype("u1")
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.int64), mx


def write_pgm(path, grid: np.ndarray, maxval: int = 65535) -> None:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError("PGM needs a 2-D grid")
    if grid.min() < 0 or grid.max() > maxval:
        raise ValueError("grid values out of range for maxval")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = grid.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + grid.astype(dtype).tobytes())


def to_unit_grid(path) -> np.ndarray:
    """Read a P5 or PNG grayscale image and scale it to [0, 1] by its bit depth."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if arr is None:
            raise ValueError(f"{path}: unreadable PNG")
        if arr.ndim != 2:
            raise ValueError(f"{path}: expected a single-channel image")
        maxval = 65535 if arr.dtype.itemsize > 1 else 255
        return arr.astype(np.float64) / maxval
    grid, mx = read_pgm(path)
    return grid.astype(np.float64) / mx


def quantize(values: np.ndarray, maxval: int = 65535) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * maxval).astype(np.int64)


def write_unit_pgm(path, values: np.ndarray, bits: int = 8) -> None:
    maxval = 255 if bits == 8 else 65535
    write_pgm(path, quantize(values, maxval), maxval)
