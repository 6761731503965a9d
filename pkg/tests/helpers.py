"""Shared test inputs."""

import numpy as np

from mtransfer.config import resolve_config


def smooth_image(size: int, seed: int = 0) -> np.ndarray:
    """A deterministic (1, 3, size, size) test photo: gradients plus a disc."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    disc = ((xx - 0.6) ** 2 + (yy - 0.4) ** 2 < 0.08).astype(float)
    img = np.stack([xx, yy, 0.5 * (xx + yy)]) * 0.7 + 0.3 * disc
    img += 0.02 * rng.standard_normal(img.shape)
    return np.clip(img, 0, 1)[None].astype(np.float32)


def stripe_image(size: int, freq: float = 20.0) -> np.ndarray:
    """A deterministic high-frequency (1, 3, size, size) texture."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = 0.5 + 0.5 * np.sin(3 * np.stack([xx * freq, yy * freq * 0.65, (xx + yy) * freq * 0.45]))
    return img[None].astype(np.float32)


def tiny_config(**kw):
    return resolve_config({"tiny": 8, **kw})
