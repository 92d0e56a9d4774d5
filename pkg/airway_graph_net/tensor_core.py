# tensor_core.py
"""
Dense tensors, trainable parameter containers and the differentiable layer
primitives shared by the CNN, graph-attention and inference streams.

Every forward function returns ``(output, cache)``; the matching ``*_backward``
function takes the upstream gradient and that cache, accumulates parameter
gradients into ``LayerParams`` and returns the gradient for the input.
Activations are plain ``numpy`` arrays in NCHW layout; ``Tensor`` is the
carrier for trainable values (data, gradient and Adam moments).
"""
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Hashable, Iterator, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError

ACTIVATIONS = ("relu", "leaky_relu", "elu", "sigmoid")

BCE_CLAMP = 1e-7

# =========================
# TYPES
# =========================


@dataclass
class ActivationConfig:
    leaky_slope: float = 0.2
    elu_alpha: float = 1.0

    def problems(self) -> List[str]:
        errors = []
        if not 0.0 < self.leaky_slope < 1.0:
            errors.append(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        if not self.elu_alpha > 0.0:
            errors.append(f"elu_alpha must be positive, got {self.elu_alpha}")
        return errors


class Tensor:
    """Trainable array with gradient and optimizer moment buffers of the same shape."""

    __slots__ = ("data", "grad", "adam_m", "adam_v")

    def __init__(self, data, dtype=np.float64, requires_grad: bool = True):
        self.data = np.array(data, dtype=dtype)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)


@dataclass
class LayerParams:
    """One trainable layer: weights, optional bias, batch-norm statistics."""

    name: str
    kind: str
    weights: Tensor
    bias: Optional[Tensor] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    step_count: int = 0

    def tensors(self) -> Iterator[Tuple[str, Tensor]]:
        yield "weights", self.weights
        if self.bias is not None:
            yield "bias", self.bias

    def zero_grad(self):
        for _, tensor in self.tensors():
            tensor.zero_grad()


class ParamStore:
    """Ordered collection of named layers; insertion order is the serialization order."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._layers = OrderedDict()

    def add(self, layer: LayerParams) -> LayerParams:
        if layer.name in self._layers:
            raise ConfigError(f"duplicate layer name '{layer.name}'")
        self._layers[layer.name] = layer
        return layer

    def __getitem__(self, name: str) -> LayerParams:
        return self._layers[name]

    def __contains__(self, name: str) -> bool:
        return name in self._layers

    def __len__(self) -> int:
        return len(self._layers)

    def __iter__(self) -> Iterator[LayerParams]:
        return iter(self._layers.values())

    def layers(self, kind: str = None) -> List[LayerParams]:
        return [layer for layer in self._layers.values() if kind is None or layer.kind == kind]

    def named_tensors(self) -> Iterator[Tuple[str, Tensor]]:
        for layer in self._layers.values():
            for slot, tensor in layer.tensors():
                yield f"{layer.name}.{slot}", tensor

    def zero_grad(self):
        for layer in self._layers.values():
            layer.zero_grad()

    def update(self, other: "ParamStore"):
        for layer in other:
            self.add(layer)


# =========================
# INITIALIZATION
# =========================


def conv_layer(name, c_in, c_out, kernel, rng, dtype=np.float64, bias=True) -> LayerParams:
    """Kaiming fan-in normal kernel, zero bias."""
    std = np.sqrt(2.0 / (c_in * kernel * kernel))
    weights = rng.normal(0.0, std, size=(c_out, c_in, kernel, kernel))
    return LayerParams(
        name=name,
        kind="conv",
        weights=Tensor(weights, dtype),
        bias=Tensor(np.zeros(c_out), dtype) if bias else None,
    )


def nearest_fill_kernel(channels: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Transpose-conv kernel [C, C, 2f, 2f] that reproduces nearest-neighbour upsampling."""
    _check_transpose_factor(factor)
    taps = np.zeros(2 * factor)
    taps[factor // 2:factor // 2 + factor] = 1.0
    kernel = np.zeros((channels, channels, 2 * factor, 2 * factor))
    for c in range(channels):
        kernel[c, c] = np.outer(taps, taps)
    return kernel.astype(dtype)


def transpose_conv_layer(name, channels, factor, dtype=np.float64) -> LayerParams:
    return LayerParams(
        name=name,
        kind="transpose_conv",
        weights=Tensor(nearest_fill_kernel(channels, factor), dtype),
        bias=Tensor(np.zeros(channels), dtype),
    )


def batchnorm_layer(name, channels, dtype=np.float64) -> LayerParams:
    return LayerParams(
        name=name,
        kind="batchnorm",
        weights=Tensor(np.ones(channels), dtype),
        bias=Tensor(np.zeros(channels), dtype),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
    )


# =========================
# CONVOLUTION
# =========================


def conv_output_size(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def conv2d(x: np.ndarray, params: LayerParams, stride: int = 1, padding: int = 0):
    w = params.weights.data
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d '{params.name}': input shape {tuple(x.shape)} does not match kernel shape {tuple(w.shape)}"
        )
    k = w.shape[2]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError(
            f"conv2d '{params.name}': input shape {tuple(x.shape)} smaller than kernel shape {tuple(w.shape)}"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if params.bias is not None:
        out = out + params.bias.data[None, :, None, None]
    return np.ascontiguousarray(out), (xp.shape, cols, params, stride, padding)


def conv2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    xp_shape, cols, params, stride, padding = cache
    w = params.weights.data
    k = w.shape[2]
    params.weights.grad += np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))
    if params.bias is not None:
        params.bias.grad += dout.sum(axis=(0, 2, 3))

    dcols = np.tensordot(dout, w, axes=([1], [0]))  # N, Ho, Wo, C, k, k
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    ho, wo = dout.shape[2], dout.shape[3]
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def _check_transpose_factor(factor):
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ConfigError(f"upsampling factor must be a positive integer, got {factor!r}")
    if factor != 1 and factor % 2:
        raise ConfigError(f"transpose_conv2d factor must be 1 or even, got {factor}")


def transpose_conv2d(x: np.ndarray, params: LayerParams, factor: int):
    """
    Learnable upsampling by an exact integer factor.

    Kernel size 2f, stride f, the full output cropped by f//2 at the leading
    edge to f*H x f*W. For f = 1 this is a 2x2 stride-1 transpose convolution
    with the trailing row/column dropped.
    """
    _check_transpose_factor(factor)
    w = params.weights.data
    k = 2 * factor
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0] or w.shape[2:] != (k, k):
        raise ShapeError(
            f"transpose_conv2d '{params.name}': input shape {tuple(x.shape)} does not match "
            f"kernel shape {tuple(w.shape)} for factor {factor}"
        )
    n, _, h, wd = x.shape
    c_out = w.shape[1]
    taps = np.tensordot(x, w, axes=([1], [0]))  # N, H, W, Cout, k, k
    full = np.zeros((n, c_out, (h - 1) * factor + k, (wd - 1) * factor + k), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            full[:, :, i:i + factor * (h - 1) + 1:factor, j:j + factor * (wd - 1) + 1:factor] += (
                taps[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    crop = factor // 2
    out = full[:, :, crop:crop + h * factor, crop:crop + wd * factor]
    if params.bias is not None:
        out = out + params.bias.data[None, :, None, None]
    return np.ascontiguousarray(out), (x, params, factor, full.shape)


def transpose_conv2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    x, params, factor, full_shape = cache
    w = params.weights.data
    k = 2 * factor
    h, wd = x.shape[2], x.shape[3]
    crop = factor // 2
    dfull = np.zeros(full_shape, dtype=dout.dtype)
    dfull[:, :, crop:crop + h * factor, crop:crop + wd * factor] = dout
    if params.bias is not None:
        params.bias.grad += dout.sum(axis=(0, 2, 3))

    # each input pixel saw a k x k window of the full output starting at (i*f, j*f)
    windows = sliding_window_view(dfull, (k, k), axis=(2, 3))[:, :, ::factor, ::factor]
    params.weights.grad += np.tensordot(x, windows, axes=([0, 2, 3], [0, 2, 3]))
    dx = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dx)


# =========================
# ACTIVATIONS
# =========================


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the open interval (0, 1) even where exp saturates
    finfo = np.finfo(x.dtype)
    return np.clip(out, finfo.tiny, 1.0 - finfo.epsneg)


def activation(x: np.ndarray, kind: str, cfg: ActivationConfig = None):
    cfg = cfg or ActivationConfig()
    if kind == "relu":
        out = np.maximum(x, 0)
    elif kind == "leaky_relu":
        out = np.where(x > 0, x, cfg.leaky_slope * x)
    elif kind == "elu":
        out = np.where(x > 0, x, cfg.elu_alpha * np.expm1(np.minimum(x, 0)))
    elif kind == "sigmoid":
        out = _sigmoid(x)
    else:
        raise ConfigError(f"unknown activation '{kind}', expected one of {ACTIVATIONS}")
    return out.astype(x.dtype, copy=False), (kind, x, out, cfg)


def activation_backward(dout: np.ndarray, cache) -> np.ndarray:
    kind, x, out, cfg = cache
    if kind == "relu":
        return dout * (x > 0)
    if kind == "leaky_relu":
        return dout * np.where(x > 0, 1.0, cfg.leaky_slope).astype(dout.dtype)
    if kind == "elu":
        return dout * np.where(x > 0, 1.0, out + cfg.elu_alpha).astype(dout.dtype)
    return dout * out * (1.0 - out)


# =========================
# NORMALIZATION / POOLING / RESAMPLING
# =========================


def batchnorm2d(x: np.ndarray, params: LayerParams, training: bool, eps: float = 1e-5, momentum: float = 0.9):
    n, c, h, w = x.shape
    if params.weights.shape != (c,):
        raise ShapeError(
            f"batchnorm2d '{params.name}': input shape {tuple(x.shape)} does not match scale shape {params.weights.shape}"
        )
    if training:
        m = n * h * w
        if m == 1:
            raise ShapeError(f"batchnorm2d '{params.name}': N*H*W = 1 in training mode, variance undefined")
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        params.running_mean *= momentum
        params.running_mean += (1.0 - momentum) * mu
        params.running_var *= momentum
        params.running_var += (1.0 - momentum) * var * (m / (m - 1.0))
    else:
        mu = params.running_mean
        var = params.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = params.weights.data[None, :, None, None] * xhat + params.bias.data[None, :, None, None]
    return out, (xhat, inv_std, params, training)


def batchnorm2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    xhat, inv_std, params, training = cache
    params.weights.grad += (dout * xhat).sum(axis=(0, 2, 3))
    params.bias.grad += dout.sum(axis=(0, 2, 3))
    dxhat = dout * params.weights.data[None, :, None, None]
    scale = inv_std[None, :, None, None]
    if not training:
        return dxhat * scale
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    return scale / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)


def maxpool2d(x: np.ndarray, window: int = 2):
    """Non-overlapping max pooling; ties go to the first element in row-major window order."""
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"maxpool2d: extent {h}x{w} not divisible by window {window}")
    ho, wo = h // window, w // window
    blocks = x.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, window * window)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return out, (x.shape, argmax, window)


def maxpool2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    x_shape, argmax, window = cache
    n, c, h, w = x_shape
    ho, wo = h // window, w // window
    blocks = np.zeros((n, c, ho, wo, window * window), dtype=dout.dtype)
    np.put_along_axis(blocks, argmax[..., None], dout[..., None], axis=-1)
    return blocks.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def upsample_nearest(x: np.ndarray, factor: int):
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ConfigError(f"upsample_nearest factor must be a positive integer, got {factor!r}")
    if factor == 1:
        return x, (factor,)
    return x.repeat(factor, axis=2).repeat(factor, axis=3), (factor,)


def upsample_nearest_backward(dout: np.ndarray, cache) -> np.ndarray:
    (factor,) = cache
    if factor == 1:
        return dout
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


# =========================
# ATTENTION SOFTMAX
# =========================


def ordered_sum(values: np.ndarray, axis: int) -> np.ndarray:
    """
    Left-to-right sum along axis, one element-wise add per step.

    Unlike ndarray.sum, whose pairwise blocking follows strides and SIMD
    width, every output element sees the same sequence of roundings, so the
    result depends only on the values and their order along axis.
    """
    arr = np.moveaxis(np.asarray(values), axis, 0)
    if arr.shape[0] == 0:
        return np.zeros(arr.shape[1:], dtype=arr.dtype)
    total = arr[0].copy()
    for part in arr[1:]:
        total += part
    return total


def canonical_sum(values: np.ndarray, axis: int) -> np.ndarray:
    """Sum along axis in sorted order, so the result ignores element ordering bit for bit."""
    return ordered_sum(np.sort(values, axis=axis), axis)


def row_matmul(rows: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """rows @ weights with each output row computed identically wherever it sits in rows."""
    return ordered_sum(rows[:, :, None] * weights[None, :, :], axis=1)


def masked_row_softmax(scores: np.ndarray, mask: np.ndarray):
    mask = np.asarray(mask, dtype=bool)
    if scores.shape != mask.shape or scores.ndim != 2:
        raise ShapeError(f"masked_row_softmax: scores shape {scores.shape} does not match mask shape {mask.shape}")
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise ShapeError(f"masked_row_softmax: row {int(empty[0])} has an empty neighbourhood")
    masked = np.where(mask, scores, -np.inf)
    shifted = masked - masked.max(axis=1, keepdims=True)
    ex = np.where(mask, np.exp(shifted), 0.0).astype(scores.dtype, copy=False)
    alpha = ex / canonical_sum(ex, axis=1)[:, None]
    return alpha, (alpha,)


def masked_row_softmax_backward(dalpha: np.ndarray, cache) -> np.ndarray:
    (alpha,) = cache
    return alpha * (dalpha - (dalpha * alpha).sum(axis=1, keepdims=True))


# =========================
# LOSS / OPTIMIZER
# =========================


def bce_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    if pred.shape != target.shape:
        raise ShapeError(f"bce_loss: prediction shape {pred.shape} does not match target shape {target.shape}")
    p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = target.astype(pred.dtype)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def bce_loss_backward(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    if pred.shape != target.shape:
        raise ShapeError(f"bce_loss: prediction shape {pred.shape} does not match target shape {target.shape}")
    p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = target.astype(pred.dtype)
    inside = (pred >= BCE_CLAMP) & (pred <= 1.0 - BCE_CLAMP)
    grad = np.where(inside, (p - y) / (p * (1.0 - p)), 0.0) / pred.size
    return grad.astype(pred.dtype, copy=False)


def adam_step(params: LayerParams, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> LayerParams:
    """Bias-corrected Adam update of every tensor in the layer; gradients are left for the caller to zero."""
    params.step_count += 1
    t = params.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for _, tensor in params.tensors():
        g = tensor.grad
        tensor.adam_m *= beta1
        tensor.adam_m += (1.0 - beta1) * g
        tensor.adam_v *= beta2
        tensor.adam_v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(tensor.adam_v / bc2) + eps
        tensor.data -= (lr / bc1) * tensor.adam_m / denom
    return params


# =========================
# GRADIENT CHECK
# =========================


@dataclass
class GradientReport:
    passed: bool
    max_rel_error: float
    checked: int
    skipped: int
    worst_index: Optional[Tuple[int, ...]] = None
    failure: Optional[str] = None


def check_gradient(
    closure: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    tolerance: float = 1e-4,
    samples: int = 100,
    step: float = 1e-5,
    seed: int = 0,
    kink_check: Callable[[], Hashable] = None,
) -> GradientReport:
    """
    Compare an analytic gradient with central finite differences.

    ``x`` is perturbed in place, one sampled coordinate at a time, and restored;
    closures may therefore read it from wherever it lives (a parameter buffer,
    for instance) and ignore their argument. ``kink_check`` is called right
    after each closure evaluation and returns a discrete signature of that
    evaluation (ReLU masks, pooling argmaxes); coordinates whose perturbation
    changes the signature sit on a kink and are skipped.
    """
    analytic = np.asarray(analytic)
    if analytic.shape != x.shape:
        raise ShapeError(f"check_gradient: analytic shape {analytic.shape} does not match input shape {x.shape}")
    bad = np.argwhere(~np.isfinite(analytic))
    if bad.size:
        where = tuple(int(i) for i in bad[0])
        return GradientReport(False, float("inf"), 0, 0, where, f"non-finite analytic gradient at {where}")

    rng = np.random.default_rng(seed)
    coords = rng.choice(x.size, size=min(samples, x.size), replace=False)

    closure(x)
    base = kink_check() if kink_check else None

    worst, worst_index, checked, skipped = 0.0, None, 0, 0
    for flat in coords:
        index = np.unravel_index(int(flat), x.shape)
        original = x[index]
        x[index] = original + step
        f_plus = closure(x)
        sig_plus = kink_check() if kink_check else None
        x[index] = original - step
        f_minus = closure(x)
        sig_minus = kink_check() if kink_check else None
        x[index] = original

        where = tuple(int(i) for i in index)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            return GradientReport(False, float("inf"), checked, skipped, where, f"non-finite loss at {where}")
        if kink_check and (sig_plus != base or sig_minus != base):
            skipped += 1
            continue

        numeric = (f_plus - f_minus) / (2.0 * step)
        exact = float(analytic[index])
        rel = abs(numeric - exact) / max(abs(exact), abs(numeric), 1e-8)
        checked += 1
        if rel > worst:
            worst, worst_index = rel, where

    closure(x)
    return GradientReport(worst < tolerance, worst, checked, skipped, worst_index)
