"""Convert published VGG-19 weights into an ``MTWT`` container.

Accepted inputs:

* ``.npz`` with ``conv1_1.weight`` / ``conv1_1.bias`` style keys, or with
  torchvision ``features.<i>.weight`` keys;
* a torchvision ``.pth`` state dict (needs ``torch``).

Torchvision weights expect ``(x - mean) / std`` on a 0..1 image, while the
loss network feeds ``255 * x - mean255``. The per-channel ``1 / (255 * std)``
is folded into ``conv1_1`` so both see the same activations.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, FormatError
from .lossnet import RGB, save_weights, vgg19_layers

log = logging.getLogger(__name__)

TORCHVISION_MEAN = (0.485, 0.456, 0.406)
TORCHVISION_STD = (0.229, 0.224, 0.225)


def _conv_names() -> list[str]:
    return [l.name for l in vgg19_layers() if l.kind == "conv"]


def torchvision_indices() -> dict[str, int]:
    """Position of each conv in ``torchvision.models.vgg19().features``."""
    out, i = {}, 0
    for layer in vgg19_layers():
        if layer.kind == "conv":
            out[layer.name] = i
        i += 1
    return out


def _load_raw(path: Path) -> dict[str, np.ndarray]:
    if path.suffix == ".npz":
        with np.load(path) as z:
            return {k: np.asarray(z[k]) for k in z.files}
    if path.suffix in (".pth", ".pt"):
        try:
            import torch
        except ImportError as exc:
            raise ConfigError("reading .pth files needs torch (pip install torch)") from exc
        state = torch.load(path, map_location="cpu", weights_only=True)
        return {k: v.detach().numpy() for k, v in state.items()}
    raise ConfigError(f"{path}: expected a .npz or .pth file")


def collect_vgg19(raw: Mapping[str, np.ndarray]) -> tuple[dict[str, tuple[np.ndarray, np.ndarray]], bool]:
    """Map raw arrays to ``{conv name: (kernel, bias)}``.

    Returns the weights and whether the keys were torchvision-style.
    """
    names = _conv_names()
    torch_style = any(k.startswith("features.") for k in raw)
    index = torchvision_indices()
    weights = {}
    for name in names:
        prefix = f"features.{index[name]}" if torch_style else name
        wk, bk = f"{prefix}.weight", f"{prefix}.bias"
        if wk not in raw:
            break
        if bk not in raw:
            raise FormatError(f"missing {bk}")
        weights[name] = (np.asarray(raw[wk], dtype=np.float32), np.asarray(raw[bk], dtype=np.float32))
    if not weights:
        raise FormatError("no VGG-19 convolution weights found")
    return weights, torch_style


def fold_normalization(
    weights: dict[str, tuple[np.ndarray, np.ndarray]], std=TORCHVISION_STD
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Scale ``conv1_1`` input channels by ``1 / (255 * std)``."""
    k, b = weights["conv1_1"]
    scale = 1.0 / (255.0 * np.asarray(std, dtype=np.float64))
    k = (k.astype(np.float64) * scale[None, :, None, None]).astype(np.float32)
    out = dict(weights)
    out["conv1_1"] = (k, b)
    return out


def export_vgg19(src, dst, torchvision: bool | None = None) -> int:
    """Convert ``src`` into an ``MTWT`` file at ``dst``; returns the conv count.

    ``torchvision`` forces the normalization folding on or off; by default
    it is applied when the keys look like a torchvision state dict.
    """
    src = Path(src)
    weights, torch_style = collect_vgg19(_load_raw(src))
    fold = torch_style if torchvision is None else torchvision
    if fold:
        weights = fold_normalization(weights)
        mean = tuple(255.0 * m for m in TORCHVISION_MEAN)
    else:
        from .lossnet import IMAGENET_MEAN_RGB

        mean = IMAGENET_MEAN_RGB
    save_weights(dst, weights, mean, RGB)
    log.info("wrote %d conv layers to %s", len(weights), dst)
    return len(weights)


__all__ = ["collect_vgg19", "export_vgg19", "fold_normalization", "torchvision_indices"]
