"""Chunked binary tensor container used for model assets and numeric dumps.

Layout (all integers little-endian u32):

    magic "KLRM" | version | tensor count |
    per tensor: name length | UTF-8 name | rank | dims... | float32 payload

Payloads are contiguous row-major float32. The format stores floats only;
integer tensors (face indices etc.) are stored as integral float32 values
and converted back by the caller.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"KLRM"
VERSION = 1


class TensorFormatError(ValueError):
    """Malformed container: bad magic, truncation, or inconsistent sizes."""


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors to `path`. Values are cast to float32."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<I", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a container written by save_tensors. Returns float32 arrays."""
    with open(path, "rb") as fh:
        buf = fh.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise TensorFormatError(
                f"truncated file: wanted {n} bytes at offset {off}, "
                f"file has {len(buf)}"
            )
        out = buf[off : off + n]
        off += n
        return out

    if take(4) != MAGIC:
        raise TensorFormatError("bad magic bytes (not a tensor container)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise TensorFormatError(f"unsupported container version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n_elem = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * n_elem)
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        tensors[name] = arr
    if off != len(buf):
        raise TensorFormatError(f"{len(buf) - off} trailing bytes after last tensor")
    return tensors
