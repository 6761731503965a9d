"""Fixed feature extractor and the perceptual losses built on it.

The extractor is a sequential conv/relu/pool stack whose weights are
constants. Two topologies are known: the published VGG-19 layout (weights
come from an ``MTWT`` container) and a small seeded random network used for
fast experiments and the test suite.

Loss normalization: content loss is the mean squared feature difference;
each layer's Gram matrix is divided by ``c*h*w`` and the per-layer texture
term is the mean over the ``c*c`` entries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import ops
from .container import Reader, decode_table, encode_table
from .errors import BadMagicError, ConfigError, DimensionMismatchError, FormatError, ShapeError, VersionError
from .tensor import Tensor

WEIGHTS_MAGIC = b"MTWT"
WEIGHTS_VERSION = 1

RGB, BGR = 0, 1
CHANNEL_ORDERS = {RGB: (0, 1, 2), BGR: (2, 1, 0)}

# Mean pixel of the ImageNet training set in 0..255 RGB.
IMAGENET_MEAN_RGB = (123.68, 116.779, 103.939)


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # "conv" | "relu" | "pool"
    shape: tuple[int, int, int, int] | None = None


def _stack(blocks: Sequence[tuple[int, int]], in_ch: int = 3, pools_after: Sequence[int] | None = None) -> list[Layer]:
    layers = []
    c = in_ch
    for b, (width, depth) in enumerate(blocks, start=1):
        for i in range(1, depth + 1):
            layers.append(Layer(f"conv{b}_{i}", "conv", (width, c, 3, 3)))
            layers.append(Layer(f"relu{b}_{i}", "relu"))
            c = width
        if pools_after is None or b in pools_after:
            layers.append(Layer(f"pool{b}", "pool"))
    return layers


def vgg19_layers() -> list[Layer]:
    return _stack([(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)])


TINY_WIDTHS = (16, 32, 32, 64)


def tiny_layers() -> list[Layer]:
    """Four convolutions, pooling after the first two."""
    return _stack([(w, 1) for w in TINY_WIDTHS], pools_after=(1, 2))


ARCHITECTURES = {"vgg19": vgg19_layers, "tiny": tiny_layers}


@dataclass
class LossNetwork:
    """Sequential feature extractor with constant weights.

    ``weights`` maps conv layer name to ``(kernel, bias)``. ``mean`` is the
    mean pixel in the network's channel order, 0..255 scale.
    """

    layers: list[Layer]
    weights: dict[str, tuple[np.ndarray, np.ndarray]]
    mean: tuple[float, float, float] = IMAGENET_MEAN_RGB
    channel_order: int = RGB
    pooling: str = "max"
    _consts: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError("loss network layer names must be unique")
        if self.pooling not in ("max", "avg"):
            raise ConfigError(f"pooling must be 'max' or 'avg', got {self.pooling!r}")
        if self.channel_order not in CHANNEL_ORDERS:
            raise FormatError(f"unknown channel order code {self.channel_order}")
        for layer in self.layers:
            if layer.kind != "conv":
                continue
            if layer.name not in self.weights:
                raise FormatError(f"missing weights for {layer.name}")
            k, b = self.weights[layer.name]
            if k.shape != layer.shape or b.shape != (layer.shape[0],):
                raise DimensionMismatchError(
                    f"{layer.name}: expected kernel {layer.shape} and bias ({layer.shape[0]},), got {k.shape} and {b.shape}"
                )
            self._consts[layer.name] = (Tensor(k, dtype=k.dtype), Tensor(b, dtype=b.dtype))

    @property
    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    @property
    def dtype(self):
        first = next(iter(self.weights.values()))[0]
        return first.dtype

    def astype(self, dtype) -> "LossNetwork":
        w = {k: (a.astype(dtype), b.astype(dtype)) for k, (a, b) in self.weights.items()}
        return LossNetwork(self.layers, w, self.mean, self.channel_order, self.pooling)

    def truncated(self, names: Sequence[str]) -> "LossNetwork":
        """Copy keeping only the prefix needed to reach every name in ``names``."""
        depth = self._depth(names)
        layers = self.layers[:depth]
        w = {l.name: self.weights[l.name] for l in layers if l.kind == "conv"}
        return LossNetwork(layers, w, self.mean, self.channel_order, self.pooling)

    def _depth(self, names) -> int:
        index = {l.name: i for i, l in enumerate(self.layers)}
        unknown = [n for n in names if n not in index]
        if unknown:
            raise ConfigError(f"unknown loss-network layer(s): {', '.join(sorted(unknown))}")
        return max((index[n] + 1 for n in names), default=0)

    def parameters(self) -> list[Tensor]:
        return [t for pair in self._consts.values() for t in pair]

    # -- forward ---------------------------------------------------------

    def preprocess(self, image: Tensor) -> Tensor:
        """[0, 1] RGB -> 0..255, reordered to the network's channels, mean removed."""
        if image.data.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"loss network expects (n, 3, h, w) images, got {image.shape}")
        order = CHANNEL_ORDERS[self.channel_order]
        inverse = np.argsort(order)
        mean = np.asarray(self.mean, dtype=image.dtype)[None, :, None, None]
        out = image.data[:, order] * 255.0 - mean
        return Tensor.from_op(out.astype(image.dtype, copy=False), (image,), lambda g: ((g * 255.0)[:, inverse],))

    def extract_features(self, image: Tensor, names) -> dict[str, Tensor]:
        """Activations at exactly the requested layers for an RGB image in [0, 1]."""
        names = list(dict.fromkeys(names))
        depth = self._depth(names)
        wanted = set(names)
        out: dict[str, Tensor] = {}
        if not names:
            return out
        h = self.preprocess(image)
        for layer in self.layers[:depth]:
            if layer.kind == "conv":
                k, b = self._consts[layer.name]
                h = ops.conv2d(h, k, b)
            elif layer.kind == "relu":
                h = ops.relu(h)
            elif self.pooling == "max":
                h = ops.max_pool2x2(h)
            else:
                h = ops.avg_pool2x2(h)
            if layer.name in wanted:
                out[layer.name] = h
        return out

    # -- construction / persistence ----------------------------------------

    @classmethod
    def tiny(cls, seed: int = 0, dtype=np.float32, pooling: str = "max") -> "LossNetwork":
        rng = np.random.default_rng(seed)
        layers = tiny_layers()
        weights = {}
        for layer in layers:
            if layer.kind != "conv":
                continue
            co, ci, kh, kw = layer.shape
            std = np.sqrt(2.0 / (ci * kh * kw))
            weights[layer.name] = (
                (rng.standard_normal(layer.shape) * std).astype(dtype),
                np.zeros(co, dtype=dtype),
            )
        return cls(layers, weights, IMAGENET_MEAN_RGB, RGB, pooling)

    def save(self, path) -> None:
        save_weights(path, self.weights, self.mean, self.channel_order)


def save_weights(path, weights: Mapping[str, tuple[np.ndarray, np.ndarray]], mean, channel_order: int = RGB) -> None:
    """Write an ``MTWT`` container: kernels as ``<layer>.weight``, biases as ``<layer>.bias``."""
    table = []
    for name, (k, b) in weights.items():
        table.append((f"{name}.weight", k))
        table.append((f"{name}.bias", b))
    head = WEIGHTS_MAGIC + struct.pack("<IB3f", WEIGHTS_VERSION, channel_order, *mean)
    Path(path).write_bytes(head + encode_table(table))


def read_container(path) -> tuple[int, tuple[float, float, float], dict[str, np.ndarray]]:
    """Raw container contents: channel order code, mean pixel, tensor table."""
    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHTS_MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    r = Reader(buf, what=str(path))
    r.take(4)
    version = r.unpack("I")
    if version != WEIGHTS_VERSION:
        raise VersionError(f"{path}: unsupported weights version {version}")
    order = r.unpack("B")
    mean = tuple(float(v) for v in r.unpack("3f"))
    table = decode_table(r)
    r.expect_end()
    return order, mean, table


def load_weights(path, arch: str = "vgg19", upto: Sequence[str] | None = None, pooling: str = "max") -> LossNetwork:
    """Load an ``MTWT`` container as a loss network of the given topology.

    The topology is truncated after the deepest layer present in the file
    (or after the deepest of ``upto`` when given).
    """
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown loss-network architecture {arch!r}")
    order, mean, table = read_container(path)
    layers = ARCHITECTURES[arch]()
    if upto is not None:
        index = {l.name: i for i, l in enumerate(layers)}
        missing = [n for n in upto if n not in index]
        if missing:
            raise ConfigError(f"unknown loss-network layer(s): {', '.join(missing)}")
        layers = layers[: max((index[n] + 1 for n in upto), default=0)]
    else:
        present = {k.rsplit(".", 1)[0] for k in table}
        last = max((i for i, l in enumerate(layers) if l.name in present), default=-1)
        # keep the relu/pool layers that follow the last stored conv
        end = last + 1
        while end < len(layers) and layers[end].kind != "conv":
            end += 1
        layers = layers[:end]
    weights = {}
    for layer in layers:
        if layer.kind != "conv":
            continue
        try:
            k, b = table[f"{layer.name}.weight"], table[f"{layer.name}.bias"]
        except KeyError as exc:
            raise FormatError(f"{path}: missing tensor {exc.args[0]}") from None
        if k.shape != layer.shape or b.shape != (layer.shape[0],):
            raise DimensionMismatchError(
                f"{path}: {layer.name} has kernel {k.shape}, bias {b.shape}; {arch} expects {layer.shape}"
            )
        weights[layer.name] = (k, b)
    return LossNetwork(layers, weights, mean, order, pooling)


# ---------------------------------------------------------------------------
# losses


def normalized_gram(features: Tensor) -> Tensor:
    _, c, h, w = features.shape
    return ops.scalar_mul(ops.gram(features), 1.0 / (c * h * w))


def content_loss(generated: Mapping[str, Tensor], target: Mapping[str, Tensor], layer: str) -> Tensor:
    """Mean squared feature difference at ``layer``; the target is a constant."""
    if layer not in generated or layer not in target:
        raise ConfigError(f"content layer {layer!r} missing from feature bundle")
    return ops.mse(generated[layer], target[layer].detach())


def texture_loss(generated: Mapping[str, Tensor], targets: Mapping[str, np.ndarray]) -> Tensor:
    """Sum over layers of the mean squared difference of normalized Grams."""
    terms = []
    for layer, g_target in targets.items():
        if layer not in generated:
            raise ConfigError(f"texture layer {layer!r} missing from feature bundle")
        f = generated[layer]
        terms.append(ops.mse(normalized_gram(f), Tensor(g_target, dtype=f.dtype)))
    if not terms:
        raise ConfigError("texture loss needs at least one layer")
    out = terms[0]
    for t in terms[1:]:
        out = ops.add(out, t)
    return out


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 10.0
    lambdas: tuple[float, ...] = (1.0, 0.5, 0.25)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or any(l < 0 for l in self.lambdas):
            raise ConfigError("loss weights must be non-negative")
        if not any(l > 0 for l in self.lambdas):
            raise ConfigError("at least one level weight must be positive")


@dataclass
class StyleTargets:
    """Normalized Gram matrices of the style image(s), one map per level."""

    levels: list[dict[str, np.ndarray]]
    scales: tuple[int, ...]
    assignment: tuple[int, ...]


def _fit_short_side(image: Tensor, size: int) -> Tensor:
    _, _, h, w = image.shape
    if h <= w:
        th, tw = size, max(1, round(w * size / h))
    else:
        th, tw = max(1, round(h * size / w)), size
    return ops.bilinear_resize(image, th, tw)


def style_grams(lossnet: LossNetwork, style: Tensor, scale: int, layers: Sequence[str]) -> dict[str, np.ndarray]:
    img = _fit_short_side(style.detach(), scale)
    feats = lossnet.extract_features(img, layers)
    return {l: normalized_gram(feats[l]).data for l in layers}


def precompute_style_targets(
    lossnet: LossNetwork,
    styles: Tensor | Sequence[Tensor],
    scales: Sequence[int],
    layers: Sequence[str],
    assignment: Sequence[int] | None = None,
) -> StyleTargets:
    """Gram targets for each level.

    ``styles`` is one image (shared by all levels) or a list; ``assignment``
    gives the style index used at each level, defaulting to one style per
    level when the counts match.
    """
    if isinstance(styles, Tensor):
        styles = [styles]
    styles = list(styles)
    if not styles:
        raise ConfigError("at least one style image is required")
    if any(s <= 0 for s in scales):
        raise ConfigError(f"style scales must be positive, got {tuple(scales)}")
    k = len(scales)
    if assignment is None:
        if len(styles) == 1:
            assignment = (0,) * k
        elif len(styles) == k:
            assignment = tuple(range(k))
        else:
            raise ConfigError(f"{len(styles)} style images for {k} levels; give an explicit assignment")
    assignment = tuple(assignment)
    if len(assignment) != k:
        raise ConfigError(f"style assignment has {len(assignment)} entries for {k} levels")
    for level, idx in enumerate(assignment, start=1):
        if not 0 <= idx < len(styles):
            raise ConfigError(f"level {level} has no style image (index {idx})")
    cache: dict[tuple[int, int], dict[str, np.ndarray]] = {}
    levels = []
    for idx, scale in zip(assignment, scales):
        key = (idx, int(scale))
        if key not in cache:
            cache[key] = style_grams(lossnet, styles[idx], int(scale), layers)
        levels.append({l: g.copy() for l, g in cache[key].items()})
    return StyleTargets(levels, tuple(int(s) for s in scales), assignment)


class Criterion:
    """Stylization and hierarchical losses over one loss network."""

    def __init__(self, lossnet: LossNetwork, content_layer: str, texture_layers: Sequence[str], weights: LossWeights):
        self.content_layer = content_layer
        self.texture_layers = tuple(texture_layers)
        self.weights = weights
        self.lossnet = lossnet.truncated([content_layer, *self.texture_layers])

    def stylization_loss(self, generated: Tensor, content_target: Tensor, grams: Mapping[str, np.ndarray]) -> Tensor:
        feats = self.lossnet.extract_features(generated, [self.content_layer, *self.texture_layers])
        target = self.lossnet.extract_features(content_target.detach(), [self.content_layer])
        w = self.weights
        lc = content_loss(feats, target, self.content_layer)
        lt = texture_loss(feats, {l: grams[l] for l in self.texture_layers})
        return ops.add(ops.scalar_mul(lc, w.alpha), ops.scalar_mul(lt, w.beta))

    def hierarchical_loss(
        self,
        outputs: Sequence[Tensor],
        content_targets: Sequence[Tensor],
        targets: StyleTargets,
    ) -> tuple[Tensor, list[float]]:
        """``sum_k lambda_k * L_S^k`` as one graph, plus each level's value.

        Levels with zero weight are evaluated on detached outputs so they are
        reported but contribute no gradient at all.
        """
        lambdas = self.weights.lambdas
        k = len(outputs)
        if not (len(content_targets) == len(targets.levels) == len(lambdas) == k):
            raise ConfigError(
                f"arity mismatch: {k} outputs, {len(content_targets)} content targets, "
                f"{len(targets.levels)} style levels, {len(lambdas)} level weights"
            )
        total = None
        per_level = []
        for lam, y, yc, grams in zip(lambdas, outputs, content_targets, targets.levels):
            ls = self.stylization_loss(y if lam > 0 else y.detach(), yc, grams)
            per_level.append(ls.item())
            if lam > 0:
                term = ops.scalar_mul(ls, lam)
                total = term if total is None else ops.add(total, term)
        return total, per_level
