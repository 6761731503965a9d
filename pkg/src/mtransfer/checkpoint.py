"""``MTCK`` checkpoint files.

Layout (little-endian)::

    "MTCK" | u32 version
    u32 n | n x u32            network widths (NetworkWidths.to_ints order)
    u64 iteration
    u32 len | UTF-8            config echo, key=value lines
    tensor table               parameters
    u8 has_optimizer
      [u64 step | tensor table]  Adam moments, names "m:<param>" / "v:<param>"
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .container import Reader, decode_table, encode_table
from .errors import BadMagicError, ConfigError, FormatError, VersionError
from .network import MTNetwork, NetworkWidths

MAGIC = b"MTCK"
VERSION = 1


@dataclass
class Checkpoint:
    widths: NetworkWidths
    config: TrainConfig
    iteration: int
    params: dict[str, np.ndarray]
    adam_step: int | None = None
    adam_moments: dict[str, np.ndarray] | None = None

    def network(self, trainable: bool = False) -> MTNetwork:
        net = MTNetwork(self.widths)
        net.load_state_dict(self.params)
        return net.requires_grad_(trainable)


def encode_checkpoint(ck: Checkpoint) -> bytes:
    ints = ck.widths.to_ints()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack(f"<I{len(ints)}I", len(ints), *ints)]
    parts.append(struct.pack("<Q", ck.iteration))
    cfg = ck.config.to_text().encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)) + cfg)
    parts.append(encode_table(ck.params))
    if ck.adam_moments is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01" + struct.pack("<Q", ck.adam_step or 0) + encode_table(ck.adam_moments))
    return b"".join(parts)


def decode_checkpoint(buf: bytes, what: str = "<checkpoint>") -> Checkpoint:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{what}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = Reader(buf, what)
    r.take(4)
    version = r.unpack("I")
    if version != VERSION:
        raise VersionError(f"{what}: unsupported checkpoint version {version} (expected {VERSION})")
    n = r.unpack("I")
    if n > 1024:
        raise FormatError(f"{what}: implausible widths block of {n} entries")
    ints = r.unpack(f"{n}I") if n != 1 else (r.unpack("I"),)
    try:
        widths = NetworkWidths.from_ints(ints)
    except ConfigError as exc:
        raise FormatError(f"{what}: {exc}") from None
    iteration = r.unpack("Q")
    cfg_len = r.unpack("I")
    try:
        config = TrainConfig.from_text(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"{what}: bad config echo ({exc})") from None
    params = decode_table(r)
    flag = r.unpack("B")
    step, moments = None, None
    if flag == 1:
        step = r.unpack("Q")
        moments = decode_table(r)
    elif flag != 0:
        raise FormatError(f"{what}: bad optimizer flag {flag}")
    r.expect_end()
    return Checkpoint(widths, config, iteration, params, step, moments)


def save_checkpoint(path, ck: Checkpoint) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ck))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))
