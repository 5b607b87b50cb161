"""
Versioned binary container for named f64 arrays.

Layout (little endian)::

    magic    4s   b"AMAD"
    version  u16
    kind     u8   1 = model parameters, 2 = time series
    meta_len u32  followed by meta_len bytes of UTF-8 JSON (sorted keys)
    count    u32
    count x { name_len u16, name, ndim u8, ndim x u64 shape, prod(shape) x f64 }

Arrays are written in the order given, so a read/write round trip is
byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"AMAD"
VERSION = 1
KIND_PARAMS = 1
KIND_SERIES = 2


def dumps(kind: int, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [struct.pack("<4sHBI", MAGIC, VERSION, kind, len(meta_b)), meta_b, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def loads(buf: bytes, expect_kind: int | None = None) -> tuple[int, dict, dict[str, np.ndarray]]:
    try:
        magic, version, kind, meta_len = struct.unpack_from("<4sHBI", buf, 0)
    except struct.error:
        raise DataError("container truncated in header") from None
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"unsupported container version {version}")
    if expect_kind is not None and kind != expect_kind:
        raise DataError(f"container holds payload kind {kind}, expected {expect_kind}")
    off = struct.calcsize("<4sHBI")
    meta = json.loads(buf[off: off + meta_len].decode("utf-8"))
    off += meta_len
    try:
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off: off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 8 * n > len(buf):
                raise DataError(f"array {name!r} truncated")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
    except struct.error:
        raise DataError("container truncated") from None
    if off != len(buf):
        raise DataError(f"{len(buf) - off} trailing bytes after last array")
    return kind, meta, arrays


def write(path, kind: int, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(kind, meta, arrays))


def read(path, expect_kind: int | None = None):
    return loads(Path(path).read_bytes(), expect_kind)
