"""Named-parameter archive files.

Binary layout (all integers little-endian):

    magic   4 bytes  b"PSAR"
    version u32      currently 1
    count   u32      number of entries
    entry*  count times:
        name_len u16, name utf-8 bytes
        ndim     u8
        dims     ndim * u32
        data     float32 little-endian, C order

Values are stored as float32 regardless of the in-memory dtype; loading
casts to the requested dtype.  Entry order is sorted by name so identical
states produce byte-identical files.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSAR"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes(order="C"))


def load_arrays(path, dtype=np.float32) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a parameter archive")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported archive version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset) if ndim else ()
        offset += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        out[name] = arr.astype(dtype)
    if offset != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after last entry")
    return out
