"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic   8 bytes  b"PEMCKPT1"
    count   uint32
    repeated count times, sorted by name:
        name_len uint16, name utf-8 bytes
        ndim     uint8,  dims uint32 * ndim
        values   float64 little-endian, C order

Nothing time- or host-dependent is written, so identical parameters give
identical bytes.
"""

from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

from .optim import ParamSet

MAGIC = b"PEMCKPT1"


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.array(arrays[name], dtype="<f8", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes(order="C"))
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:8] != MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    pos = 8
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            nbytes = 8 * size
            if pos + nbytes > len(data):
                raise ValueError(f"truncated checkpoint while reading {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise ValueError("truncated checkpoint header") from exc
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} trailing bytes after checkpoint payload")
    return out


def save_params(params: ParamSet | Mapping[str, np.ndarray], path: str | os.PathLike) -> None:
    arrays = params.arrays() if isinstance(params, ParamSet) else params
    with open(path, "wb") as fh:
        fh.write(dumps(arrays))


def load_params(path: str | os.PathLike) -> ParamSet:
    with open(path, "rb") as fh:
        return ParamSet(loads(fh.read()))
