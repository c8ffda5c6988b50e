"""Differentiable primitives. Every function records itself on the tape when one of its inputs requires gradients."""

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from project.errors import ShapeError
from project.numerics.tensor import Tensor, as_tensor, unbroadcast

Pair = tuple[int, int]


def _pair(value: int | Sequence[int]) -> Pair:
    if isinstance(value, int):
        return value, value

    h, w = value
    return int(h), int(w)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), _backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), _backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def _backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), _backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def _backward(g):
        return (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor.from_op(a.data / b.data, (a, b), _backward)


def neg(a: Tensor) -> Tensor:
    def _backward(g):
        return (-g,)

    return Tensor.from_op(-a.data, (a,), _backward)


def power(a: Tensor, exponent: float) -> Tensor:
    def _backward(g):
        return (g * exponent * np.power(a.data, exponent - 1),)

    return Tensor.from_op(np.power(a.data, exponent), (a,), _backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (n, k) @ (k, m), got {a.shape} @ {b.shape}")

    def _backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor.from_op(a.data @ b.data, (a, b), _backward)


def transpose(a: Tensor) -> Tensor:
    def _backward(g):
        return (g.T,)

    return Tensor.from_op(a.data.T, (a,), _backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}")

    def _backward(g):
        return (g.reshape(a.shape),)

    return Tensor.from_op(out, (a,), _backward)


def flatten(a: Tensor) -> Tensor:
    """Flatten everything but the leading (batch) dimension."""
    return reshape(a, (a.shape[0], -1))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)

        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), _backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def _backward(g):
        return (g * mask,)

    return Tensor.from_op(np.where(mask, a.data, 0.0), (a,), _backward)


def sigmoid(a: Tensor) -> Tensor:
    # numerically stable in both tails
    z = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def _backward(g):
        return (g * out * (1.0 - out),)

    return Tensor.from_op(out, (a,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}: {e}")

    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(out, tensors, _backward)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of `a` along `axis`. Repeated indices accumulate their gradients."""
    indices = np.asarray(indices, dtype=np.int64)

    def _backward(g):
        grad = np.zeros_like(a.data)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (grad,)

    return Tensor.from_op(np.take(a.data, indices, axis=axis), (a,), _backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer class labels under the softmax of `logits` (n, classes)."""
    labels = np.asarray(labels, dtype=np.int64)

    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} do not match {labels.shape[0]} labels")

    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].mean()

    def _backward(g):
        grad = np.exp(log_probs)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return Tensor.from_op(np.asarray(loss), (logits,), _backward)


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)

    if pred.shape != target.shape:
        raise ShapeError(f"mse expects equal shapes, got {pred.shape} and {target.shape}")

    diff = pred - target
    return mean(diff * diff)


def _conv_windows(x: np.ndarray, kernel: Pair, stride: Pair, padding: Pair, fill: float = 0.0):
    (kh, kw), (sh, sw), (ph, pw) = kernel, stride, padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=fill)

    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"kernel {kernel} larger than padded input {xp.shape[2:]}")

    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    return xp, windows


def _scatter_windows(dwindows: np.ndarray, padded_shape, kernel: Pair, stride: Pair, padding: Pair, in_hw: Pair):
    """Adjoint of `_conv_windows`: add window gradients back onto the (unpadded) input."""
    (kh, kw), (sh, sw), (ph, pw) = kernel, stride, padding
    ho, wo = dwindows.shape[2], dwindows.shape[3]
    dxp = np.zeros(padded_shape)

    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dwindows[..., i, j]

    h, w = in_hw
    return dxp[:, :, ph : ph + h, pw : pw + w]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int | Pair = 1,
    padding: int | Pair = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2D cross-correlation. x is (n, c, h, w), weight is (out, c / groups, kh, kw)."""
    stride, padding = _pair(stride), _pair(padding)

    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and weight, got {x.shape} and {weight.shape}")

    n, c, h, w = x.shape
    out_c, c_per_group, kh, kw = weight.shape

    if c % groups != 0 or out_c % groups != 0 or c // groups != c_per_group:
        raise ShapeError(f"conv2d weight {weight.shape} incompatible with {c} input channels and {groups} groups")

    xp, windows = _conv_windows(x.data, (kh, kw), stride, padding)
    ho, wo = windows.shape[2], windows.shape[3]
    og = out_c // groups

    xg = windows.reshape(n, groups, c_per_group, ho, wo, kh, kw)
    wg = weight.data.reshape(groups, og, c_per_group, kh, kw)
    out = np.einsum("ngchwij,gocij->ngohw", xg, wg, optimize=True).reshape(n, out_c, ho, wo)

    if bias is not None:
        out = out + bias.data.reshape(1, out_c, 1, 1)

    def _backward(g):
        gg = g.reshape(n, groups, og, ho, wo)
        dw = np.einsum("ngchwij,ngohw->gocij", xg, gg, optimize=True).reshape(weight.shape)
        dwin = np.einsum("ngohw,gocij->ngchwij", gg, wg, optimize=True).reshape(n, c, ho, wo, kh, kw)
        dx = _scatter_windows(dwin, xp.shape, (kh, kw), stride, padding, (h, w))
        grads = [dx, dw]

        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))

        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, _backward)


def max_pool2d(x: Tensor, kernel: int | Pair, stride: int | Pair | None = None, padding: int | Pair = 0) -> Tensor:
    kernel = _pair(kernel)
    stride = kernel if stride is None else _pair(stride)
    padding = _pair(padding)
    kh, kw = kernel

    xp, windows = _conv_windows(x.data, kernel, stride, padding, fill=-np.inf)
    flat = windows.reshape(*windows.shape[:4], kh * kw)
    # first maximum wins ties
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        dflat = np.zeros(flat.shape)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        dwin = dflat.reshape(windows.shape)
        return (_scatter_windows(dwin, xp.shape, kernel, stride, padding, x.shape[2:]),)

    return Tensor.from_op(out, (x,), _backward)


def avg_pool2d(x: Tensor, kernel: int | Pair, stride: int | Pair | None = None, padding: int | Pair = 0) -> Tensor:
    """Average pooling; padded positions count towards the window size."""
    kernel = _pair(kernel)
    stride = kernel if stride is None else _pair(stride)
    padding = _pair(padding)
    area = kernel[0] * kernel[1]

    xp, windows = _conv_windows(x.data, kernel, stride, padding)
    out = windows.sum(axis=(-2, -1)) / area

    def _backward(g):
        dwin = np.broadcast_to((g / area)[..., None, None], windows.shape)
        return (_scatter_windows(dwin, xp.shape, kernel, stride, padding, x.shape[2:]),)

    return Tensor.from_op(out, (x,), _backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, c)"""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4D input, got {x.shape}")

    return mean(x, axis=(2, 3))


def channel_shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Output channel k reads input channel perm[k]."""
    if channels % groups != 0:
        raise ShapeError(f"{channels} channels cannot be shuffled in {groups} groups")

    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    return take(x, channel_shuffle_permutation(x.shape[1], groups), axis=1)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize with batch statistics over every axis but the channel axis (1).
    Returns the output together with the batch mean and (biased) variance."""
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    m = np.prod([x.shape[a] for a in axes])

    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    g_ = gamma.data.reshape(shape)
    out = g_ * xhat + beta.data.reshape(shape)

    def _backward(g):
        dxhat = g * g_
        dx = (inv_std / m) * (
            m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    result = Tensor.from_op(out, (x, gamma, beta), _backward)
    return result, mu.reshape(-1), var.reshape(-1)


def affine_channels(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel affine map, channels on axis 1."""
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    return x * reshape(scale, shape) + reshape(shift, shape)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize every row over the last axis to zero mean and unit variance."""
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv_std

    def _backward(g):
        dx = (inv_std / n) * (n * g - g.sum(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True))
        return (dx,)

    return Tensor.from_op(xhat, (x,), _backward)
