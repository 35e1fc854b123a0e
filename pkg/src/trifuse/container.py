"""Binary tensor container (".ten").

Layout, all little-endian:

    bytes 0..3   magic "TENS" (0x54 0x45 0x4E 0x53)
    byte  4      version, currently 1
    byte  5      rank, 1..4
    bytes 6..7   reserved, must be zero
    next         rank x u32 extents
    next         product(extents) x f32 payload, row-major, last axis fastest

Feature maps are stored as (C, H, W).  The payload may carry NaN: depth and
normal maps use NaN as their invalid-pixel sentinel.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from trifuse.tensor import Tensor, _wrap

MAGIC = b"TENS"
VERSION = 1


class ContainerError(ValueError):
    """Raised for malformed \".ten\" data."""


def tensor_to_bytes(t: Tensor) -> bytes:
    header = MAGIC + struct.pack("<BBBB", VERSION, t.rank, 0, 0)
    extents = struct.pack(f"<{t.rank}I", *t.shape)
    payload = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    return header + extents + payload


def tensor_from_bytes(blob: bytes, source: str = "<bytes>") -> Tensor:
    def fail(reason: str):
        raise ContainerError(f"{source}: {reason}")

    if len(blob) < 8:
        fail(f"truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        fail(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, rank, r0, r1 = struct.unpack("<BBBB", blob[4:8])
    if version != VERSION:
        fail(f"unsupported version {version}, expected {VERSION}")
    if not 1 <= rank <= 4:
        fail(f"rank must be 1..4, got {rank}")
    if r0 != 0 or r1 != 0:
        fail(f"reserved bytes must be zero, got {r0}, {r1}")
    if len(blob) < 8 + 4 * rank:
        fail("truncated extents")
    shape = struct.unpack(f"<{rank}I", blob[8:8 + 4 * rank])
    if any(e < 1 for e in shape):
        fail(f"all extents must be >= 1, got {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    expected = 8 + 4 * rank + 4 * count
    if len(blob) != expected:
        fail(f"payload size mismatch: {len(blob)} bytes, expected {expected} for shape {shape}")
    arr = np.frombuffer(blob, dtype="<f4", offset=8 + 4 * rank).astype(np.float32).reshape(shape)
    return _wrap(arr)


def save_tensor(path: str | Path, t: Tensor) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path: str | Path) -> Tensor:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ContainerError(f"{path}: {exc.strerror or exc}") from exc
    return tensor_from_bytes(blob, source=str(path))
