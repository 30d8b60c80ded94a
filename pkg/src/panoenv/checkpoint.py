"""Binary checkpoint format for named float64 arrays.

Layout (all little-endian)::

    b"PGPP" | u32 version | u32 count
    repeat count times:
        u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank] | f64 data[prod(dims)]

Entries are written in sorted-name order so identical states give identical bytes.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"PGPP"
VERSION = 1


class FormatError(ValueError):
    """A file does not match its declared format."""


def dumps(state: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(state)))
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def _read(f: BinaryIO, n: int) -> bytes:
    chunk = f.read(n)
    if len(chunk) != n:
        raise FormatError("truncated checkpoint")
    return chunk


def loads(data: bytes) -> dict[str, np.ndarray]:
    f = io.BytesIO(data)
    if _read(f, 4) != MAGIC:
        raise FormatError("bad checkpoint magic")
    version, count = struct.unpack("<II", _read(f, 8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read(f, 4))
        try:
            name = _read(f, name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("parameter name is not UTF-8") from exc
        (rank,) = struct.unpack("<I", _read(f, 4))
        dims = struct.unpack(f"<{rank}I", _read(f, 4 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(_read(f, 8 * size), dtype="<f8").reshape(dims)
        out[name] = arr.astype(np.float64)
    if f.read(1):
        raise FormatError("trailing bytes after checkpoint")
    return out


def save(path: str | os.PathLike, state: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(state))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
