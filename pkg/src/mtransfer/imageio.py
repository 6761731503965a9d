"""Image buffers, the binary PPM codec, and tensor conversion.

PPM (P6, maxval 255) is read and written here byte-for-byte; other formats
go through Pillow.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ImageDecodeError, ShapeError
from .tensor import Tensor

IMAGE_SUFFIXES = {".ppm", ".png", ".jpg", ".jpeg", ".bmp", ".webp"}

_PPM_HEADER = re.compile(rb"P6(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


@dataclass
class ImageBuffer:
    """8-bit RGB pixels, row-major, shape ``(height, width, 3)``."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ShapeError(f"image buffer must be (h>=1, w>=1, 3), got {p.shape}")
        self.pixels = np.ascontiguousarray(p, dtype=np.uint8)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def samples(self) -> np.ndarray:
        return self.pixels.reshape(-1)


def _parse_ppm_header(buf: bytes, what: str) -> tuple[int, int, int]:
    m = _PPM_HEADER.match(buf)
    if not m:
        raise ImageDecodeError(f"{what}: not a binary PPM (P6) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ImageDecodeError(f"{what}: only maxval 255 is supported, got {maxval}")
    if w < 1 or h < 1:
        raise ImageDecodeError(f"{what}: bad dimensions {w}x{h}")
    return w, h, m.end()


def decode_ppm(buf: bytes, what: str = "<bytes>") -> ImageBuffer:
    w, h, start = _parse_ppm_header(buf, what)
    need = w * h * 3
    body = buf[start : start + need]
    if len(body) < need:
        raise ImageDecodeError(f"{what}: truncated pixel data ({len(body)} of {need} bytes)")
    return ImageBuffer(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3))


def encode_ppm(image: ImageBuffer) -> bytes:
    return f"P6\n{image.width} {image.height}\n255\n".encode("ascii") + image.pixels.tobytes()


def decode_image(path) -> ImageBuffer:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] == b"P6":
        return decode_ppm(buf, str(path))
    try:
        from PIL import Image, UnidentifiedImageError
    except ImportError as exc:  # pragma: no cover
        raise ImageDecodeError(f"{path}: Pillow is required for non-PPM images") from exc
    try:
        with Image.open(path) as im:
            return ImageBuffer(np.asarray(im.convert("RGB")))
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc


def encode_image(image: ImageBuffer, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        path.write_bytes(encode_ppm(image))
        return
    from PIL import Image

    Image.fromarray(image.pixels, "RGB").save(path)


def image_size(path) -> tuple[int, int]:
    """``(width, height)`` without decoding the pixel data."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(64)
    if head[:2] == b"P6":
        w, h, _ = _parse_ppm_header(head, str(path))
        return w, h
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return im.size
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"{path}: cannot read image size ({exc})") from exc


def to_tensor(image: ImageBuffer, dtype=np.float32) -> Tensor:
    """``(1, 3, h, w)`` tensor with values ``u8 / 255``."""
    arr = (image.pixels.astype(np.float64) / 255.0).astype(dtype)
    return Tensor(arr.transpose(2, 0, 1)[None].copy(), dtype=dtype)


def from_tensor(t: Tensor | np.ndarray, index: int = 0) -> ImageBuffer:
    """Inverse of :func:`to_tensor`: clamp to [0, 1], scale, round half away from zero."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim == 4:
        data = data[index]
    if data.ndim != 3 or data.shape[0] != 3:
        raise ShapeError(f"expected a 3-channel image tensor, got {data.shape}")
    v = np.clip(data.astype(np.float64), 0.0, 1.0) * 255.0
    v = np.floor(v + 0.5)
    return ImageBuffer(v.transpose(1, 2, 0).astype(np.uint8))


def load_tensor(path, dtype=np.float32) -> Tensor:
    return to_tensor(decode_image(path), dtype)


def save_tensor(t: Tensor, path) -> None:
    encode_image(from_tensor(t), path)
