"""Differentiable ops over 4-D ``(n, c, h, w)`` tensors.

Only the operations the transfer network and its losses need are provided.
Every function returns a new :class:`~mtransfer.tensor.Tensor`; the backward
closures capture whatever forward intermediates they need.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor


def _check4d(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects a 4-D (n, c, h, w) tensor, got shape {x.shape}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor.from_op(a.data + c, (a,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    # Subgradient at exactly 0 is 0; NaN passes through so faults stay visible.
    mask = x.data > 0
    return Tensor.from_op(np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * (1 - y * y),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input was inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor.from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = x.shape
    return Tensor.from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference; differentiable in both arguments."""
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size
    value = np.asarray(np.mean(diff * diff), dtype=diff.dtype)

    def back(g):
        d = diff * (2.0 * g / n)
        return d, -d

    return Tensor.from_op(value, (a, b), back)


# ---------------------------------------------------------------------------
# convolution


def reflect_indices(n: int, pad: int) -> np.ndarray:
    """Source index for every position of a reflection-padded axis of length n."""
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def _reflect_pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph:
        x = x.take(reflect_indices(x.shape[2], ph), axis=2)
    if pw:
        x = x.take(reflect_indices(x.shape[3], pw), axis=3)
    return x


def _fold_axis(g: np.ndarray, n: int, pad: int, axis: int) -> np.ndarray:
    """Adjoint of reflection padding along one axis."""
    if not pad:
        return g
    src = reflect_indices(n, pad)
    out = np.take(g, np.arange(pad, pad + n), axis=axis).copy()
    for pos in (*range(pad), *range(pad + n, n + 2 * pad)):
        dst = [slice(None)] * g.ndim
        dst[axis] = src[pos]
        sel = [slice(None)] * g.ndim
        sel[axis] = pos
        out[tuple(dst)] += g[tuple(sel)]
    return out


def conv_output_size(size: int, stride: int) -> int:
    return -(-size // stride)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with reflection padding of ``k // 2`` on each side.

    ``weight`` is ``(out, in, kh, kw)`` with odd kernel sizes, so the output
    is ``ceil(h / stride) x ceil(w / stride)``.
    """
    _check4d(x, "conv2d")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be (out, in, kh, kw), got {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d: input shape {x.shape} has {c} channels but kernel shape {weight.shape} expects {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d needs odd kernel sizes, got {kh}x{kw}")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {co} output channels")
    ph, pw = kh // 2, kw // 2
    xp = _reflect_pad(x.data, ph, pw)
    oh, ow = conv_output_size(h, stride), conv_output_size(w, stride)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n, c, oh, ow, kh, kw) x (co, c, kh, kw) -> (n, oh, ow, co)
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def back(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            cols = np.tensordot(g, weight.data, axes=([1], [0]))  # (n, oh, ow, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[..., i, j].transpose(0, 3, 1, 2)
            gx = _fold_axis(_fold_axis(gxp, h, ph, 2), w, pw, 3)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, back)


# ---------------------------------------------------------------------------
# normalization


def instance_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes."""
    _check4d(x, "instance_norm")
    c = x.shape[1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"instance_norm: gain {gain.shape} / bias {bias.shape} must be ({c},)")
    m = x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data[None, :, None, None] * xhat + bias.data[None, :, None, None]

    def back(g):
        ggain = (g * xhat).sum(axis=(0, 2, 3)) if gain.requires_grad else None
        gbias = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data[None, :, None, None]
            s1 = dxhat.sum(axis=(2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
            gx = (inv / m) * (m * dxhat - s1 - xhat * s2)
        return gx, ggain, gbias

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, gain, bias), back)


# ---------------------------------------------------------------------------
# resampling


def nearest_upsample2x(x: Tensor) -> Tensor:
    _check4d(x, "nearest_upsample2x")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def bilinear_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower/upper source indices and upper weight for each output position.

    Half-pixel (align-corners-false) convention: output ``i`` samples source
    coordinate ``(i + 0.5) * n_in / n_out - 0.5``, clamped to the valid range.
    """
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    lo = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Bilinear resampling, height pass first then width pass."""
    _check4d(x, "bilinear_resize")
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"bilinear_resize targets must be >= 1, got {target_h}x{target_w}")
    n, c, h, w = x.shape
    if (h, w) == (target_h, target_w):
        return Tensor.from_op(x.data.copy(), (x,), lambda g: (g,))
    dt = x.dtype
    y0, y1, fy = bilinear_taps(h, target_h)
    x0, x1, fx = bilinear_taps(w, target_w)
    fy = fy.astype(dt)[:, None]
    fx = fx.astype(dt)
    gy = 1 - fy
    gx_ = 1 - fx
    # a + f * (b - a) reproduces constants exactly
    top = x.data[:, :, y0, :]
    rows = top + fy * (x.data[:, :, y1, :] - top)
    left = rows[:, :, :, x0]
    out = left + fx * (rows[:, :, :, x1] - left)

    def back(g):
        grows = np.zeros((n, c, target_h, w), dtype=g.dtype)
        np.add.at(grows, (slice(None), slice(None), slice(None), x0), g * gx_)
        np.add.at(grows, (slice(None), slice(None), slice(None), x1), g * fx)
        gin = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gin, (slice(None), slice(None), y0), grows * gy)
        np.add.at(gin, (slice(None), slice(None), y1), grows * fy)
        return (gin,)

    return Tensor.from_op(out, (x,), back)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 (odd trailing rows/cols dropped)."""
    _check4d(x, "max_pool2x2")
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    if oh < 1 or ow < 1:
        raise ShapeError(f"max_pool2x2 needs spatial size >= 2, got {h}x{w}")
    blocks = x.data[:, :, : 2 * oh, : 2 * ow].reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gin = np.zeros((n, c, h, w), dtype=g.dtype)
        gin[:, :, : 2 * oh, : 2 * ow] = gb.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow)
        return (gin,)

    return Tensor.from_op(out, (x,), back)


def avg_pool2x2(x: Tensor) -> Tensor:
    _check4d(x, "avg_pool2x2")
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    if oh < 1 or ow < 1:
        raise ShapeError(f"avg_pool2x2 needs spatial size >= 2, got {h}x{w}")
    out = x.data[:, :, : 2 * oh, : 2 * ow].reshape(n, c, oh, 2, ow, 2).mean(axis=(3, 5))

    def back(g):
        gin = np.zeros((n, c, h, w), dtype=g.dtype)
        gin[:, :, : 2 * oh, : 2 * ow] = (g * 0.25).repeat(2, axis=2).repeat(2, axis=3)
        return (gin,)

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x,), back)


# ---------------------------------------------------------------------------
# structure


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check4d(a, "concat_channels")
    _check4d(b, "concat_channels")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"concat_channels: cannot join {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return Tensor.from_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def gram(features: Tensor) -> Tensor:
    """Unnormalized Gram matrix ``G_ij = <F_i, F_j>`` of one sample.

    Accepts ``(1, c, h, w)`` or ``(c, h, w)``; returns ``(c, c)``.
    """
    shape = features.shape
    if features.data.ndim == 4:
        if shape[0] != 1:
            raise ShapeError(f"gram takes a single sample, got batch of {shape[0]}")
        c = shape[1]
    elif features.data.ndim == 3:
        c = shape[0]
    else:
        raise ShapeError(f"gram expects (1, c, h, w) or (c, h, w), got {shape}")
    f = np.ascontiguousarray(features.data.reshape(c, -1))
    g = f @ f.T
    # Mirror the upper triangle so the result is symmetric bit-for-bit.
    iu = np.triu_indices(c, 1)
    g[(iu[1], iu[0])] = g[iu]

    def back(grad):
        return (((grad + grad.T) @ f).reshape(shape),)

    return Tensor.from_op(g, (features,), back)


def residual_block(x: Tensor, w1: Tensor, gain1: Tensor, bias1: Tensor, w2: Tensor, gain2: Tensor, bias2: Tensor) -> Tensor:
    """``x + IN(conv(relu(IN(conv(x)))))`` with 3x3 stride-1 convolutions."""
    c = x.shape[1]
    for w in (w1, w2):
        if w.shape[0] != c or w.shape[1] != c:
            raise ShapeError(f"residual_block: kernel {w.shape} does not preserve {c} channels of input {x.shape}")
    h = relu(instance_norm(conv2d(x, w1), gain1, bias1))
    h = instance_norm(conv2d(h, w2), gain2, bias2)
    return add(x, h)


__all__ = [
    "add",
    "sub",
    "scalar_mul",
    "add_scalar",
    "relu",
    "tanh",
    "clamp",
    "total",
    "mse",
    "conv2d",
    "instance_norm",
    "nearest_upsample2x",
    "bilinear_resize",
    "bilinear_taps",
    "max_pool2x2",
    "avg_pool2x2",
    "concat_channels",
    "gram",
    "reflect_indices",
    "conv_output_size",
    "residual_block",
]
