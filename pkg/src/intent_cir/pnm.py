"""Minimal binary PPM (P6) / PGM (P5) reader and writer, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    if c not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got {c}")
    magic = b"P6" if c == 3 else b"P5"
    data = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def write_pnm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(image))


def write_pgm_u8(path: str | Path, values: np.ndarray) -> None:
    """Write an already-quantized 2-D uint8 array as P5."""
    values = np.asarray(values, dtype=np.uint8)
    h, w = values.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + values.tobytes())


def _tokens(buf: bytes, n: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < n:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        out.append(buf[start:pos])
    return out, pos + 1  # exactly one whitespace byte precedes the raster


def read_pnm_u8(path: str | Path) -> np.ndarray:
    """Raw uint8 raster, shape (H, W, C)."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(buf, 4)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM type {magic!r} in {path}")
    if int(maxval) != 255:
        raise ValueError(f"only 8-bit PNM supported, maxval={int(maxval)}")
    c = 3 if magic == b"P6" else 1
    w, h = int(w), int(h)
    raster = np.frombuffer(buf, dtype=np.uint8, count=w * h * c, offset=pos)
    return raster.reshape(h, w, c)


def read_pnm(path: str | Path) -> np.ndarray:
    return read_pnm_u8(path).astype(np.float64) / 255.0
