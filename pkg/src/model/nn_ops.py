"""
Differentiable NN kernels over N-H-W-C tensors.

Convolutions extract patches with ``sliding_window_view`` and contract them with
``tensordot``; the input gradient is accumulated tap by tap (at most 7x7 taps).
"""
import logging
from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.autograd.tensor import Tensor, add, matmul, record
from src.error_handling import NumericalError, ShapeMismatchError

logger = logging.getLogger(__name__)

Padding = Literal["same", "valid"]
PoolMode = Literal["avg", "max"]
Activation = Literal["relu", "sigmoid", "none"]


@dataclass
class Conv2dParams:
    kernel: Tensor  # kh x kw x Cin x Cout
    bias: Tensor  # Cout
    stride: int = 1
    padding: Padding = "same"

    def __post_init__(self):
        kh, kw = self.kernel.shape[:2]
        if self.padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
            raise ShapeMismatchError(f"same padding needs odd kernel extents, got {kh}x{kw}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")


@dataclass
class SeparableConv2dParams:
    depthwise: Tensor  # kh x kw x Cin, multiplier 1
    depthwise_bias: Tensor  # Cin
    pointwise: Tensor  # 1 x 1 x Cin x Cout
    pointwise_bias: Tensor  # Cout


@dataclass
class DenseParams:
    weight: Tensor  # in x out
    bias: Tensor  # out


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_conv2d(rng: np.random.Generator, kh: int, kw: int, cin: int, cout: int, stride: int = 1) -> Conv2dParams:
    kernel = glorot_uniform(rng, (kh, kw, cin, cout), kh * kw * cin, kh * kw * cout)
    return Conv2dParams(Tensor.parameter(kernel), Tensor.parameter(np.zeros(cout)), stride=stride)


def init_separable_conv2d(rng: np.random.Generator, k: int, cin: int, cout: int) -> SeparableConv2dParams:
    depthwise = glorot_uniform(rng, (k, k, cin), k * k, k * k)
    pointwise = glorot_uniform(rng, (1, 1, cin, cout), cin, cout)
    return SeparableConv2dParams(
        Tensor.parameter(depthwise),
        Tensor.parameter(np.zeros(cin)),
        Tensor.parameter(pointwise),
        Tensor.parameter(np.zeros(cout)),
    )


def init_dense(rng: np.random.Generator, units_in: int, units_out: int) -> DenseParams:
    weight = glorot_uniform(rng, (units_in, units_out), units_in, units_out)
    return DenseParams(Tensor.parameter(weight), Tensor.parameter(np.zeros(units_out)))


def _check_nhwc(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeMismatchError(f"{op} expects an N x H x W x C tensor, got shape {x.shape}")
    if min(x.shape[1:3]) < 1:
        raise ShapeMismatchError(f"{op} got zero-size spatial input {x.shape}")


def _padding(extent: int, k: int, stride: int, padding: Padding) -> Tuple[int, int, int]:
    """Returns (output extent, pad before, pad after)."""
    if padding == "same":
        out = -(-extent // stride)
        total = max((out - 1) * stride + k - extent, 0)
        return out, total // 2, total - total // 2
    if extent < k:
        raise ShapeMismatchError(f"valid padding needs extent >= kernel, got {extent} < {k}")
    return (extent - k) // stride + 1, 0, 0


def _patches(x: np.ndarray, kh: int, kw: int, stride: int, padding: Padding):
    """Zero-pad and return (windows N x H' x W' x C x kh x kw, padded shape, pads)."""
    _, h, w, _ = x.shape
    oh, pt, pb = _padding(h, kh, stride, padding)
    ow, pl, pr = _padding(w, kw, stride, padding)
    padded = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    return windows, padded.shape, (pt, pl, oh, ow)


def _scatter_taps(grad_taps, padded_shape, pads, stride, kh, kw, x_shape) -> np.ndarray:
    """Accumulate per-tap input gradients (callable (i, j) -> N x H' x W' x C) into dx."""
    pt, pl, oh, ow = pads
    dpad = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            dpad[:, i:i + (oh - 1) * stride + 1:stride, j:j + (ow - 1) * stride + 1:stride, :] += grad_taps(i, j)
    return dpad[:, pt:pt + x_shape[1], pl:pl + x_shape[2], :]


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    _check_nhwc(x, "conv2d")
    kh, kw, cin, cout = p.kernel.shape
    if x.shape[3] != cin:
        raise ShapeMismatchError(f"conv2d channel mismatch: input has {x.shape[3]}, kernel expects {cin}")
    if p.bias.shape != (cout,):
        raise ShapeMismatchError(f"conv2d bias shape {p.bias.shape} does not match Cout={cout}")

    x_data, kernel = x.data, p.kernel.data
    windows, padded_shape, pads = _patches(x_data, kh, kw, p.stride, p.padding)
    # windows axes: n, h, w, c, i, j  ->  kernel axes: i, j, c, o
    out = np.tensordot(windows, kernel, axes=([3, 4, 5], [2, 0, 1])) + p.bias.data

    def backward_fn(g):
        d_kernel = np.tensordot(windows, g, axes=([0, 1, 2], [0, 1, 2]))  # c, i, j, o
        d_kernel = d_kernel.transpose(1, 2, 0, 3)
        d_bias = g.sum(axis=(0, 1, 2))
        dx = _scatter_taps(
            lambda i, j: np.tensordot(g, kernel[i, j], axes=([3], [1])),
            padded_shape, pads, p.stride, kh, kw, x_data.shape,
        )
        return dx, d_kernel, d_bias

    return record("conv2d", out, (x, p.kernel, p.bias), backward_fn)


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: Padding = "same") -> Tensor:
    _check_nhwc(x, "depthwise_conv2d")
    kh, kw, c = kernel.shape
    if x.shape[3] != c:
        raise ShapeMismatchError(f"depthwise_conv2d channel mismatch: input has {x.shape[3]}, kernel expects {c}")
    if padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
        raise ShapeMismatchError(f"same padding needs odd kernel extents, got {kh}x{kw}")

    x_data, k_data = x.data, kernel.data
    windows, padded_shape, pads = _patches(x_data, kh, kw, stride, padding)
    out = np.einsum("nhwcij,ijc->nhwc", windows, k_data) + bias.data

    def backward_fn(g):
        d_kernel = np.einsum("nhwcij,nhwc->ijc", windows, g)
        d_bias = g.sum(axis=(0, 1, 2))
        dx = _scatter_taps(lambda i, j: g * k_data[i, j], padded_shape, pads, stride, kh, kw, x_data.shape)
        return dx, d_kernel, d_bias

    return record("depthwise_conv2d", out, (x, kernel, bias), backward_fn)


def separable_conv2d(x: Tensor, p: SeparableConv2dParams) -> Tensor:
    """Depthwise k x k (same padding, stride 1) followed by a pointwise 1 x 1 convolution."""
    depth = depthwise_conv2d(x, p.depthwise, p.depthwise_bias)
    return conv2d(depth, Conv2dParams(p.pointwise, p.pointwise_bias))


def global_pool(x: Tensor, mode: PoolMode) -> Tensor:
    """Spatial mean / max per channel: N x H x W x C -> N x C."""
    _check_nhwc(x, "global_pool")
    n, h, w, c = x.shape
    if mode == "avg":
        data = x.data.mean(axis=(1, 2))
        return record("global_avg_pool", data, (x,), lambda g: (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),))
    if mode == "max":
        flat = x.data.reshape(n, h * w, c)
        arg = flat.argmax(axis=1)  # first occurrence on ties

        def backward_fn(g):
            d = np.zeros((n, h * w, c))
            d[np.arange(n)[:, None], arg, np.arange(c)[None, :]] = g
            return (d.reshape(x.shape),)

        return record("global_max_pool", flat.max(axis=1), (x,), backward_fn)
    raise ValueError(f"Unknown pool mode: {mode}")


def channelwise_pool(x: Tensor, mode: PoolMode) -> Tensor:
    """Reduce the channel axis: N x H x W x C -> N x H x W x 1."""
    _check_nhwc(x, "channelwise_pool")
    c = x.shape[3]
    if c < 1:
        raise ShapeMismatchError("channelwise_pool needs at least one channel")
    if mode == "avg":
        data = x.data.mean(axis=3, keepdims=True)
        return record("channel_avg_pool", data, (x,), lambda g: (np.broadcast_to(g / c, x.shape).copy(),))
    if mode == "max":
        arg = x.data.argmax(axis=3)[..., None]

        def backward_fn(g):
            d = np.zeros(x.shape)
            np.put_along_axis(d, arg, g, axis=3)
            return (d,)

        return record("channel_max_pool", np.take_along_axis(x.data, arg, axis=3), (x,), backward_fn)
    raise ValueError(f"Unknown pool mode: {mode}")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericalError("sigmoid received NaN input")
    s = stable_sigmoid(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    if np.isnan(x.data).any():
        raise NumericalError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    return record("softmax", s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def dense(x: Tensor, p: DenseParams, activation: Activation = "none") -> Tensor:
    if x.ndim != 2 or x.shape[1] != p.weight.shape[0]:
        raise ShapeMismatchError(f"dense dimension mismatch: input {x.shape}, weight {p.weight.shape}")
    out = add(matmul(x, p.weight), p.bias)
    if activation == "relu":
        return relu(out)
    if activation == "sigmoid":
        return sigmoid(out)
    if activation == "none":
        return out
    raise ValueError(f"Unknown activation: {activation}")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[:3] != b.shape[:3]:
        raise ShapeMismatchError(f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[3]
    data = np.concatenate([a.data, b.data], axis=3)
    return record("concat_channels", data, (a, b), lambda g: (g[..., :ca], g[..., ca:]))
