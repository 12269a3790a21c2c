"""Versioned binary container for named float64 tensors.

Layout (all integers little-endian, unsigned):

    magic    8 bytes   b"FUSEDETW"
    version  u32       currently 1
    count    u32       number of entries
    entries, each:
        name_len u16, name bytes (UTF-8)
        dtype    u8   (0 = float64; the only defined tag)
        rank     u8
        extents  rank * u64
        data     raw little-endian float64, row-major

See docs/weights_format.md for the normative description.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"FUSEDETW"
VERSION = 1
_DTYPE_F64 = 0


class WeightsFormatError(ValueError):
    pass


def save_tensors(path, tensors: dict):
    """Write a {name: ndarray} mapping; iteration order is preserved."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            # np.ascontiguousarray would promote rank-0 to rank-1; keep rank
            arr = np.asarray(arr, dtype="<f8", order="C")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_F64, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_tensors(path) -> dict:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise WeightsFormatError(f"bad magic in {path}")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise WeightsFormatError(f"unsupported weights version {version} (expected {VERSION})")
    off = 16
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        dtype, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        if dtype != _DTYPE_F64:
            raise WeightsFormatError(f"unknown dtype tag {dtype} for entry {name!r}")
        shape = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        out[name] = arr.astype(np.float64)
    if off != len(blob):
        raise WeightsFormatError(f"{len(blob) - off} trailing bytes in {path}")
    return out
