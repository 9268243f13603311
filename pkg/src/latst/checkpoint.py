"""Binary named-tensor checkpoints.

Layout (all integers unsigned 32-bit little-endian)::

    b"LATST1"
    count
    count x [name_len, name (utf-8), rank, dims..., float64 LE row-major data]
    text_len, text (utf-8 ``key = value`` lines echoing the run configuration)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError
from .tensor import Tensor

MAGIC = b"LATST1"
_U32 = struct.Struct("<I")


def encode(tensors: dict[str, Tensor], config_text: str = "") -> bytes:
    parts = [MAGIC, _U32.pack(len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(t.ndim)]
        parts += [_U32.pack(d) for d in t.shape]
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    text = config_text.encode("utf-8")
    parts += [_U32.pack(len(text)), text]
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict[str, Tensor], str]:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)

    def u32() -> int:
        nonlocal pos
        if pos + 4 > len(blob):
            raise CheckpointFormatError("checkpoint truncated")
        (v,) = _U32.unpack_from(blob, pos)
        pos += 4
        return v

    def chunk(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointFormatError("checkpoint truncated")
        out = blob[pos:pos + n]
        pos += n
        return out

    tensors: dict[str, Tensor] = {}
    for _ in range(u32()):
        name = chunk(u32()).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(chunk(8 * n), dtype="<f8").reshape(shape)
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        tensors[name] = Tensor(data.astype(np.float64), requires_grad=True)
    text = chunk(u32()).decode("utf-8") if pos < len(blob) else ""
    if pos != len(blob):
        raise CheckpointFormatError(f"{len(blob) - pos} trailing bytes after checkpoint payload")
    return tensors, text


def save(path, tensors: dict[str, Tensor], config_text: str = "") -> None:
    Path(path).write_bytes(encode(tensors, config_text))


def load(path) -> tuple[dict[str, Tensor], str]:
    return decode(Path(path).read_bytes())
