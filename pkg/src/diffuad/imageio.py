"""Grayscale image files: binary PGM (P5) and PNG, plus panel strips."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def write_pgm(path, image: np.ndarray, bits: int = 16) -> None:
    """Write a [0, 1] image as P5 with maxval 255 (8 bit) or 65535 (16 bit, big-endian)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got {img.shape}")
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    maxval = (1 << bits) - 1
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    raw = q.astype(">u2" if bits == 16 else "u1").tobytes()
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (img.shape[1], img.shape[0], maxval))
        fh.write(raw)


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into a float64 array in [0, 1]."""
    data = Path(path).read_bytes()
    m = _HEADER.match(data)
    if not m:
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    body = data[m.end() : m.end() + n]
    if len(body) != n:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=dtype).reshape(h, w).astype(np.float64) / maxval


def write_png(path, image: np.ndarray) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.rint(img * 255).astype(np.uint8), mode="L").save(path)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("I;16") if im.mode.startswith("I") else im.convert("L"))
    return arr.astype(np.float64) / (65535.0 if arr.dtype == np.uint16 else 255.0)


def write_image(path, image: np.ndarray) -> None:
    if Path(path).suffix.lower() == ".pgm":
        write_pgm(path, image)
    else:
        write_png(path, image)


def _scaled(m: np.ndarray) -> np.ndarray:
    top = float(m.max())
    return m / top if top > 0 else np.zeros_like(m)


def panel(original: np.ndarray, final: np.ndarray, product_map: np.ndarray, perc_map: np.ndarray,
          coarse: Optional[np.ndarray] = None, gap: int = 2) -> np.ndarray:
    """Side-by-side strip: original, [coarse,] final, product map, perceptual map.

    Maps are scaled by their own maximum so faint maps stay visible.
    """
    tiles: Sequence[np.ndarray] = [original] + ([coarse] if coarse is not None else []) + [
        final, _scaled(product_map), _scaled(perc_map)]
    h = tiles[0].shape[0]
    sep = np.ones((h, gap))
    parts = []
    for i, tile in enumerate(tiles):
        if tile.shape != tiles[0].shape:
            raise ValueError("panel tiles must share a shape")
        parts.extend([sep] if i else [])
        parts.append(np.clip(tile, 0.0, 1.0))
    return np.concatenate(parts, axis=1)
