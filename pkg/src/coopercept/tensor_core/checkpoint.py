"""Binary checkpoint container.

Layout (little-endian)::

    b"CPKT" | version u32 | count u32
    repeated count times:
        name_len u32 | name utf-8 | ndim u32 | dims u32 * ndim | payload f32 * prod(dims)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CPKT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic, not a CPKT checkpoint")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, f"ndim of {name}"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"dims of {name}"))
        size = int(np.prod(dims)) if ndim else 1
        payload = take(4 * size, f"payload of {name}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last entry")
    return out
