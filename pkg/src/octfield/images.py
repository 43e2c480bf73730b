"""Binary PPM/PGM reading and writing (linear encoding, no gamma)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img) -> None:
    """Write an ``(H, W, 3)`` image in ``[0, 1]`` as P6 with maxval 255."""
    data = to_uint8(img)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) image")
    h, w, _ = data.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def write_pgm16(path, img, scale: float = 1.0) -> None:
    """Write a single-channel image as 16-bit P5; values are divided by ``scale``."""
    data = np.asarray(img, dtype=np.float64) / scale
    data = np.round(np.clip(data, 0.0, 1.0) * 65535.0).astype(">u2")
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + data.tobytes())


def _read_header(raw: bytes, count: int):
    fields, pos = [], 0
    while len(fields) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError("truncated image header")
        fields.append(raw[pos:end])
        pos = end
    return fields, pos + 1


def read_ppm(path) -> np.ndarray:
    """Read P6 (RGB) or P5 (gray) into floats in ``[0, 1]``."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _read_header(raw, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    channels = {b"P6": 3, b"P5": 1}.get(magic)
    if channels is None:
        raise ValueError(f"unsupported image format {magic!r}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * channels
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=pos) if len(raw) - pos >= n * np.dtype(dtype).itemsize else None
    if data is None:
        raise ValueError("truncated image data")
    img = data.astype(np.float64) / maxval
    return img.reshape(h, w, 3) if channels == 3 else img.reshape(h, w)
