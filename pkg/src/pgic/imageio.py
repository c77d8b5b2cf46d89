"""Binary PPM (P6) reading and writing, and float/8-bit conversion."""

from __future__ import annotations

import os
import re

import numpy as np

from .errors import FormatError

_TOKEN = re.compile(rb"(?:\s*(?:#[^\n]*\n)?)*\s*(\S+)")


def read_ppm(path) -> np.ndarray:
    """Return an ``H x W x 3`` uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = _TOKEN.match(data, pos)
        if m is None:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = tokens
    if magic != b"P6":
        raise FormatError(f"{path}: only binary PPM (P6) is supported, got {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    n = w * h * 3
    if len(data) - pos < n:
        raise FormatError(f"{path}: expected {n} sample bytes, found {len(data) - pos}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected H x W x 3 uint8 image, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def to_float(image: np.ndarray) -> np.ndarray:
    """``H x W x 3`` uint8 to ``3 x H x W`` float32 in [0, 1]."""
    return np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1), dtype=np.float32) / np.float32(255)


def to_uint8(x: np.ndarray) -> np.ndarray:
    """``3 x H x W`` floats to ``H x W x 3`` uint8, rounding to nearest."""
    x = np.clip(np.asarray(x, dtype=np.float32), 0.0, 1.0)
    return np.ascontiguousarray((np.rint(x * 255)).astype(np.uint8).transpose(1, 2, 0))


def list_images(directory) -> list[str]:
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith((".ppm", ".pnm")))
    return [os.path.join(directory, n) for n in names]
