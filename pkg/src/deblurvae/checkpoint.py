"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DBVE" | version: u32
    repeated until EOF:
        name_len: u32 | name: utf-8 bytes | ndim: u32 | dims: ndim x u64
        payload: prod(dims) x f64
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DBVE"
VERSION = 1

__all__ = ["save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]


def save_checkpoint(path, arrays: dict) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        enc = name.encode("utf-8")
        parts.append(struct.pack("<I", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a DBVE checkpoint")
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out = {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            count = int(np.prod(dims)) if ndim else 1
            if pos + 8 * count > len(raw):
                raise ValueError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(tuple(dims)).copy()
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated record at offset {pos}") from exc
    return out
