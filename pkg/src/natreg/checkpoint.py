"""Binary checkpoint format.

Little-endian layout::

    b"NATREG01"                      magic
    u32                              tensor count
    per tensor, sorted by name:
        u16 name length, UTF-8 name
        u8 rank, u32 dims[rank]
        f32 data, row-major

A model's architecture lives in a ``key = value`` sidecar (``<path>.cfg``)
written next to the checkpoint by the pipeline.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import FormatError
from .tensor import Tensor
from .transformer import ModelParams

MAGIC = b"NATREG01"


def encode_checkpoint(params: dict[str, Tensor]) -> bytes:
    names = sorted(params)
    chunks = [MAGIC, struct.pack("<I", len(names))]
    for name in names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        data = np.ascontiguousarray(params[name].data, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> ModelParams:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"{source}: truncated while reading {what} at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    magic = bytes(take(len(MAGIC), "magic"))
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    params = ModelParams()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{source}: tensor name is not UTF-8") from exc
        if name in params:
            raise FormatError(f"{source}: duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name!r}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * n, f"data of {name!r}"), dtype="<f4").reshape(dims)
        params[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name)
    if pos != len(view):
        raise FormatError(f"{source}: {len(view) - pos} trailing bytes after {count} tensors")
    return params


def save_checkpoint(params: dict[str, Tensor], path) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path) -> ModelParams:
    return decode_checkpoint(Path(path).read_bytes(), str(path))
