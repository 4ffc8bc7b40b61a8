"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GERCKPT1"                      8-byte magic
    uint32 meta_len, meta            UTF-8 JSON (config echo, vocabulary, ...)
    uint32 n_tensors
    n_tensors times:
        uint16 name_len, name        UTF-8
        uint8  dtype code            0 = float64 ('<f8'), 1 = float32 ('<f4')
        uint8  ndim
        uint64 dims[ndim]
        values                       row-major, little-endian

Values are written in their stored width, so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"GERCKPT1"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 8

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (meta_len,) = read("<I")
    meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = read("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = read("<H")
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = read("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = read(f"<{ndim}Q") if ndim else ()
        dtype = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = n * dtype.itemsize
        if pos + nbytes > len(data):
            raise CheckpointError("truncated checkpoint")
        tensors[name] = np.frombuffer(data, dtype=dtype, count=n, offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
        pos += nbytes
    return tensors, meta


def save(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> str:
    """Write a checkpoint; returns its sha256 fingerprint."""
    blob = dumps(tensors, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def fingerprint(path_or_bytes: str | Path | bytes) -> str:
    blob = path_or_bytes if isinstance(path_or_bytes, bytes) else Path(path_or_bytes).read_bytes()
    return hashlib.sha256(blob).hexdigest()
