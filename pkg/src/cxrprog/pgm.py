"""Binary PGM (P5) reading and writing, 8- or 16-bit grayscale."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError


def _tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header")
        out.append(blob[start:pos])
    return out, pos + 1  # one whitespace byte separates header and raster


def decode_pgm(blob: bytes) -> np.ndarray:
    """Decode to float64 intensities in [0, 1]."""
    (magic, w, h, maxval), pos = _tokens(blob, 4)
    if magic != b"P5":
        raise ParseError(f"unsupported PGM magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise ParseError(f"bad maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    raster = blob[pos:pos + need]
    if len(raster) != need:
        raise ParseError("truncated PGM raster")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.float64) / maxval


def encode_pgm(img: np.ndarray, bits: int = 8) -> bytes:
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    maxval = 255 if bits == 8 else 65535
    h, w = img.shape
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    raster = q.astype("u1" if bits == 8 else ">u2").tobytes()
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + raster


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_pgm(path, img: np.ndarray, bits: int = 8) -> None:
    Path(path).write_bytes(encode_pgm(img, bits))
