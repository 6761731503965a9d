"""The three-subnet hierarchical transfer network.

    x -> resize(s1) -> style -> y1 -> resize(s2) -> enhance -> y2
      -> [resize(s3), test time only] -> refine -> y3

Style and enhance subnets run an RGB branch and a luminance branch side by
side and join them along channels; the refine subnet is a shallow single
branch with an identity connection from input to output.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, fields
from typing import Iterator, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import Tensor

N_LEVELS = 3


@dataclass(frozen=True)
class NetworkWidths:
    """Channel widths at full size; every width is divided by ``divisor``."""

    rgb: tuple[int, ...] = (32, 64, 128)
    lum: tuple[int, ...] = (16, 32, 64)
    up: tuple[int, ...] = (64, 32)
    enhance_up: tuple[int, ...] = (128, 64, 32)
    refine: tuple[int, ...] = (16, 32, 64)
    refine_up: tuple[int, ...] = (32, 16)
    divisor: int = 1

    def __post_init__(self):
        if self.divisor < 1:
            raise ConfigError(f"width divisor must be >= 1, got {self.divisor}")
        for f in fields(self):
            if f.name == "divisor":
                continue
            ws = getattr(self, f.name)
            if any(w < 1 for w in ws):
                raise ConfigError(f"widths must be >= 1, got {f.name}={ws}")
        if len(self.rgb) != 3 or len(self.lum) != 3 or len(self.refine) != 3:
            raise ConfigError("rgb, lum and refine need exactly three widths each")
        if len(self.up) != 2 or len(self.refine_up) != 2 or len(self.enhance_up) != 3:
            raise ConfigError("style/refine need two upsampling widths, enhance needs three")
        if any(l > r for l, r in zip(self.lum, self.rgb)):
            raise ConfigError(f"luminance widths {self.lum} must not exceed RGB widths {self.rgb}")

    def scaled(self, name: str) -> tuple[int, ...]:
        return tuple(max(1, w // self.divisor) for w in getattr(self, name))

    def to_ints(self) -> list[int]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.extend(v if isinstance(v, tuple) else (v,))
        return out

    @classmethod
    def from_ints(cls, values: Sequence[int]) -> "NetworkWidths":
        template = cls()
        kwargs, pos = {}, 0
        for f in fields(cls):
            v = getattr(template, f.name)
            if isinstance(v, tuple):
                kwargs[f.name] = tuple(int(x) for x in values[pos : pos + len(v)])
                pos += len(v)
            else:
                kwargs[f.name] = int(values[pos])
                pos += 1
        if pos != len(values):
            raise ConfigError(f"expected {pos} width values, got {len(values)}")
        return cls(**kwargs)

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# building blocks


class Module:
    """Minimal parameter container: tensors and sub-modules found in attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def requires_grad_(self, flag: bool = True):
        for p in self.parameters():
            p.requires_grad = flag
        return self


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(arr.astype(dtype), requires_grad=True, dtype=dtype)


def _kernel(rng: np.random.Generator, co: int, ci: int, k: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(ci * k * k)
    return _param(rng.uniform(-bound, bound, size=(co, ci, k, k)), dtype)


class ConvLayer(Module):
    """Convolution followed by instance norm and ReLU."""

    def __init__(self, rng, ci: int, co: int, k: int, stride: int = 1, dtype=np.float32):
        self.stride = stride
        self.weight = _kernel(rng, co, ci, k, dtype)
        self.gain = _param(np.ones(co), dtype)
        self.shift = _param(np.zeros(co), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(ops.instance_norm(ops.conv2d(x, self.weight, stride=self.stride), self.gain, self.shift))


class OutputConv(Module):
    """Plain convolution with bias, no normalization."""

    def __init__(self, rng, ci: int, co: int, k: int, dtype=np.float32, zero: bool = False):
        if zero:
            self.weight = _param(np.zeros((co, ci, k, k)), dtype)
            self.bias = _param(np.zeros(co), dtype)
        else:
            self.weight = _kernel(rng, co, ci, k, dtype)
            bound = 1.0 / np.sqrt(ci * k * k)
            self.bias = _param(rng.uniform(-bound, bound, size=co), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class ResidualBlock(Module):
    def __init__(self, rng, c: int, dtype=np.float32):
        self.w1 = _kernel(rng, c, c, 3, dtype)
        self.gain1 = _param(np.ones(c), dtype)
        self.shift1 = _param(np.zeros(c), dtype)
        self.w2 = _kernel(rng, c, c, 3, dtype)
        self.gain2 = _param(np.ones(c), dtype)
        self.shift2 = _param(np.zeros(c), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.residual_block(x, self.w1, self.gain1, self.shift1, self.w2, self.gain2, self.shift2)


class ResizeConv(Module):
    """Nearest-neighbour 2x upsampling then a 3x3 conv layer."""

    def __init__(self, rng, ci: int, co: int, dtype=np.float32):
        self.conv = ConvLayer(rng, ci, co, 3, 1, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(ops.nearest_upsample2x(x))


def _run(layers, x):
    for layer in layers:
        x = layer(x)
    return x


def extract_luminance(image: Tensor) -> Tensor:
    """BT.601 luma ``0.299 R + 0.587 G + 0.114 B`` as a 1-channel tensor.

    Evaluated as ``(299 R + 587 G + 114 B) / 1000`` so that inputs with equal
    weighted integer sums give bit-identical luma.
    """
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"extract_luminance expects (n, 3, h, w), got {image.shape}")
    d = image.data
    y = (299.0 * d[:, 0:1] + 587.0 * d[:, 1:2] + 114.0 * d[:, 2:3]) / 1000.0
    coef = np.array([0.299, 0.587, 0.114], dtype=d.dtype)[None, :, None, None]
    return Tensor.from_op(y.astype(d.dtype, copy=False), (image,), lambda g: (g * coef,))


def _down_widths(base: tuple[int, ...], extra: bool) -> tuple[int, ...]:
    return base + (base[-1],) if extra else base


def _encoder(rng, ci: int, widths: tuple[int, ...], dtype) -> list[Module]:
    layers: list[Module] = [ConvLayer(rng, ci, widths[0], 9, 1, dtype)]
    for a, b in zip(widths, widths[1:]):
        layers.append(ConvLayer(rng, a, b, 3, 2, dtype))
    layers.extend(ResidualBlock(rng, widths[-1], dtype) for _ in range(3))
    return layers


class TwoBranchSubnet(Module):
    """RGB-Block and L-Block joined along channels, then the Conv-Block.

    With ``extra_stage`` each branch gets one more stride-2 convolution and
    the Conv-Block one more resize-convolution (the enhance subnet).
    """

    def __init__(self, widths: NetworkWidths, rng, extra_stage: bool = False, dtype=np.float32):
        rgb = _down_widths(widths.scaled("rgb"), extra_stage)
        lum = _down_widths(widths.scaled("lum"), extra_stage)
        up = widths.scaled("enhance_up" if extra_stage else "up")
        self.factor = 2 ** (len(rgb) - 1)
        self.rgb_block = _encoder(rng, 3, rgb, dtype)
        self.l_block = _encoder(rng, 1, lum, dtype)
        joined = rgb[-1] + lum[-1]
        self.conv_block = [ResidualBlock(rng, joined, dtype) for _ in range(3)]
        chans = (joined, *up)
        self.conv_block += [ResizeConv(rng, a, b, dtype) for a, b in zip(chans, chans[1:])]
        self.out = OutputConv(rng, up[-1], 3, 3, dtype)

    def branches(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """(luminance input, RGB-Block output, L-Block output)."""
        y = extract_luminance(x)
        return y, _run(self.rgb_block, x), _run(self.l_block, y)

    def __call__(self, x: Tensor) -> Tensor:
        _check_input(x, self.factor, type(self).__name__)
        _, a, b = self.branches(x)
        h = _run(self.conv_block, ops.concat_channels(a, b))
        # tanh mapped onto [0, 1]
        return ops.scalar_mul(ops.add_scalar(ops.tanh(self.out(h)), 1.0), 0.5)


class StyleSubnet(TwoBranchSubnet):
    def __init__(self, widths: NetworkWidths, rng, dtype=np.float32):
        super().__init__(widths, rng, extra_stage=False, dtype=dtype)


class EnhanceSubnet(TwoBranchSubnet):
    def __init__(self, widths: NetworkWidths, rng, dtype=np.float32):
        super().__init__(widths, rng, extra_stage=True, dtype=dtype)


class RefineSubnet(Module):
    """Shallow single-branch subnet that predicts a residual on its input."""

    factor = 4

    def __init__(self, widths: NetworkWidths, rng, dtype=np.float32):
        r = widths.scaled("refine")
        up = widths.scaled("refine_up")
        self.body = _encoder(rng, 3, r, dtype)
        chans = (r[-1], *up)
        self.body += [ResizeConv(rng, a, b, dtype) for a, b in zip(chans, chans[1:])]
        # Zero init: the subnet starts as the identity.
        self.out = OutputConv(rng, up[-1], 3, 3, dtype, zero=True)

    def residual(self, x: Tensor) -> Tensor:
        return self.out(_run(self.body, x))

    def __call__(self, x: Tensor) -> Tensor:
        _check_input(x, self.factor, "RefineSubnet")
        return ops.clamp(ops.add(x, self.residual(x)), 0.0, 1.0)


def _check_input(x: Tensor, factor: int, who: str) -> None:
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"{who} expects (n, 3, h, w) RGB input, got {x.shape}")
    h, w = x.shape[2:]
    if h % factor or w % factor:
        raise ShapeError(f"{who} needs spatial sizes divisible by {factor}, got {h}x{w}")


# ---------------------------------------------------------------------------
# the whole network


class MTNetwork(Module):
    """Style, enhance and refine subnets (parameter sets 1, 2, 3)."""

    def __init__(self, widths: NetworkWidths | None = None, seed: int = 0, dtype=np.float32):
        self.widths = widths or NetworkWidths()
        rng = np.random.default_rng(seed)
        self.style = StyleSubnet(self.widths, rng, dtype)
        self.enhance = EnhanceSubnet(self.widths, rng, dtype)
        self.refine = RefineSubnet(self.widths, rng, dtype)

    @property
    def subnets(self) -> tuple[Module, Module, Module]:
        return self.style, self.enhance, self.refine

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in ("style", "enhance", "refine"):
            yield from getattr(self, name).named_parameters(f"{prefix}{name}.")

    def subnet_parameters(self, k: int) -> list[Tensor]:
        """Parameters of subnet ``k`` (1-based)."""
        return self.subnets[k - 1].parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in own.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = np.array(arr, dtype=p.dtype)
            p.grad = None

    def astype(self, dtype) -> "MTNetwork":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def init_parameters(widths: NetworkWidths | None = None, seed: int = 0, dtype=np.float32) -> MTNetwork:
    return MTNetwork(widths, seed, dtype)


@dataclass(frozen=True)
class ScalePlan:
    """Spatial size each subnet runs at, per level.

    The training plan runs refine at the enhance resolution; the test plan
    inserts a 2x bilinear upsample before refine.
    """

    sizes: tuple[int, int, int]

    def __post_init__(self):
        if len(self.sizes) != N_LEVELS or any(s < 1 for s in self.sizes):
            raise ConfigError(f"scale plan needs three positive sizes, got {self.sizes}")

    @classmethod
    def train(cls, scales: Sequence[int]) -> "ScalePlan":
        s1, s2, s3 = (int(s) for s in scales)
        if s3 != s2:
            raise ConfigError(f"training runs refine at the enhance size; got scales {tuple(scales)}")
        return cls((s1, s2, s3))

    @classmethod
    def test(cls, scales: Sequence[int], final: int | None = None) -> "ScalePlan":
        s1, s2, s3 = (int(s) for s in scales)
        if final is not None:
            if final % 4 or final < 4:
                raise ConfigError(f"output size must be a positive multiple of 4, got {final}")
            return cls((final // 4, final // 2, final))
        return cls((s1, s2, 2 * s3))


STAGES = ("resize1", "style", "resize2", "enhance", "resize3", "refine")


def _to_size(x: Tensor, size: int) -> Tensor:
    if x.shape[2:] == (size, size):
        return x
    return ops.bilinear_resize(x, size, size)


def mt_forward(
    net: MTNetwork,
    x: Tensor,
    plan: ScalePlan,
    levels: int = N_LEVELS,
    timings: dict[str, float] | None = None,
) -> tuple[Tensor, ...]:
    """Outputs ``(y1, ..., y_levels)``; ``y_k`` depends only on subnets 1..k.

    ``timings``, when given, receives wall time per stage in seconds.
    """
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"mt_forward expects (n, 3, h, w) RGB input, got {x.shape}")
    if not 1 <= levels <= N_LEVELS:
        raise ConfigError(f"levels must be in 1..{N_LEVELS}, got {levels}")
    clock = time.perf_counter
    outputs = []
    h = x
    for k, subnet in enumerate(net.subnets[:levels]):
        t0 = clock()
        h = _to_size(h, plan.sizes[k])
        t1 = clock()
        h = subnet(h)
        t2 = clock()
        if timings is not None:
            timings[STAGES[2 * k]] = timings.get(STAGES[2 * k], 0.0) + (t1 - t0)
            timings[STAGES[2 * k + 1]] = timings.get(STAGES[2 * k + 1], 0.0) + (t2 - t1)
        outputs.append(h)
    return tuple(outputs)


def subnet_inputs(x: Tensor, outputs: Sequence[Tensor], plan: ScalePlan) -> list[Tensor]:
    """The literal input each subnet consumed, detached."""
    srcs = [x, *outputs[:-1]]
    return [_to_size(s.detach(), size) for s, size in zip(srcs, plan.sizes)]
