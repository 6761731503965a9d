"""Little-endian binary encoding shared by weight containers and checkpoints.

Tensor record::

    u16 name length | UTF-8 name | u8 rank | rank x u32 dims | prod(dims) x f32
"""

from __future__ import annotations

import struct
from typing import Iterable, Mapping

import numpy as np

from .errors import FormatError, TruncatedError

F32 = np.dtype("<f4")


class Reader:
    """Cursor over a byte string that refuses to read past the end."""

    def __init__(self, buf: bytes, what: str = "file"):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedError(f"{self.what}: truncated at byte {self.pos} (wanted {n} more, {len(self.buf) - self.pos} left)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def expect_end(self) -> None:
        if self.remaining():
            raise FormatError(f"{self.what}: {self.remaining()} unexpected trailing bytes")


def encode_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"tensor name too long: {name[:40]}...")
    if arr.ndim > 0xFF:
        raise FormatError(f"tensor {name} has rank {arr.ndim}")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=F32).tobytes()


def decode_tensor(r: Reader) -> tuple[str, np.ndarray]:
    name_len = r.unpack("H")
    try:
        name = r.take(name_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{r.what}: tensor name is not UTF-8") from exc
    rank = r.unpack("B")
    dims = tuple(r.unpack(f"{rank}I")) if rank > 1 else ((r.unpack("I"),) if rank == 1 else ())
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    nbytes = count * 4
    if nbytes > r.remaining():
        raise TruncatedError(
            f"{r.what}: tensor {name!r} declares dims {dims} ({nbytes} bytes) but only {r.remaining()} bytes remain"
        )
    arr = np.frombuffer(r.take(nbytes), dtype=F32).reshape(dims).copy()
    return name, arr


def encode_table(tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> bytes:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    return struct.pack("<I", len(items)) + b"".join(encode_tensor(k, v) for k, v in items)


def decode_table(r: Reader) -> dict[str, np.ndarray]:
    count = r.unpack("I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name, arr = decode_tensor(r)
        if name in out:
            raise FormatError(f"{r.what}: duplicate tensor {name!r}")
        out[name] = arr
    return out
