"""Named-tensor checkpoint files.

Layout (all integers little-endian)::

    b"CPXCKPT1"
    u32 entry count
    per entry: u32 name length, UTF-8 name, u8 dtype code, u8 ndim,
               u64 * ndim dims, raw values

dtype codes: 0 = f32, 1 = f64, 2 = u8 (used for the ``__meta__`` text block).
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import ParseError

MAGIC = b"CPXCKPT1"
META_KEY = "__meta__"
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_DTYPES = {code: dt for dt, code in _CODES.items()}


def encode_meta(meta: Mapping[str, object]) -> np.ndarray:
    """``key=value`` lines as a u8 array; keys are sorted for stable bytes."""
    lines = []
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in value or "=" in key:
            raise ValueError(f"metadata entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}")
    return np.frombuffer("\n".join(lines).encode("utf-8"), dtype=np.uint8).copy()


def decode_meta(block: np.ndarray) -> dict[str, str]:
    text = bytes(np.asarray(block, dtype=np.uint8)).decode("utf-8")
    out = {}
    for line in text.splitlines():
        key, _, value = line.partition("=")
        out[key] = value
    return out


def dumps(entries: Mapping[str, np.ndarray], meta: Mapping[str, object] | None = None) -> bytes:
    items = list(entries.items())
    if meta is not None:
        items.append((META_KEY, encode_meta(meta)))
    chunks = [MAGIC, struct.pack("<I", len(items))]
    for name, value in items:
        arr = np.asarray(value)
        if arr.dtype == np.float32 or arr.dtype == np.float64 or arr.dtype == np.uint8:
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        elif np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype("<f8")
        else:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict[str, str] | None]:
    if blob[:8] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)")
    pos = 8
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    entries: OrderedDict[str, np.ndarray] = OrderedDict()
    meta = None
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        if code not in _DTYPES:
            raise ParseError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(blob):
            raise ParseError(f"{name}: truncated data")
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
        if name == META_KEY:
            meta = decode_meta(arr)
        else:
            entries[name] = arr.astype(arr.dtype.newbyteorder("="))
    if pos != len(blob):
        raise ParseError("trailing bytes after last entry")
    return entries, meta


def save(path, entries: Mapping[str, np.ndarray], meta: Mapping[str, object] | None = None) -> None:
    Path(path).write_bytes(dumps(entries, meta))


def load(path) -> tuple["OrderedDict[str, np.ndarray]", dict[str, str] | None]:
    return loads(Path(path).read_bytes())
