"""Binary PGM/PPM writers and readers (netpbm P5/P6)."""
from __future__ import annotations

import numpy as np


def _to_bytes(image: np.ndarray, magic: bytes, maxval: int) -> bytes:
    H, W = image.shape[:2]
    header = magic + f"\n{W} {H}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    return header + np.ascontiguousarray(image, dtype=dtype).tobytes()


def write_pgm(path, image, maxval: int = 255) -> None:
    """Write an H×W integer image. ``maxval`` above 255 switches to 16-bit samples."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    if img.min(initial=0) < 0 or img.max(initial=0) > maxval:
        raise ValueError(f"pixel values must lie in [0, {maxval}]")
    with open(path, "wb") as fh:
        fh.write(_to_bytes(img, b"P5", maxval))


def write_ppm(path, image) -> None:
    """Write an H×W×3 uint8 image."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an H×W×3 image")
    with open(path, "wb") as fh:
        fh.write(_to_bytes(img.astype(np.uint8), b"P6", 255))


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1
    magic, W, H, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    channels = {b"P5": 1, b"P6": 3}[magic]
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, offset=pos, count=H * W * channels)
    return data.reshape((H, W) if channels == 1 else (H, W, 3)).astype(np.int64)


def to_uint8(values, lo: float, hi: float) -> np.ndarray:
    """Linear map of [lo, hi] onto 0..255 with clipping."""
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    return np.clip(np.rint((np.asarray(values, dtype=np.float64) - lo) * scale), 0, 255).astype(np.uint8)
