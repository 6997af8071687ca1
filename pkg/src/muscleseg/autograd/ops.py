"""Differentiable operators used by the segmentation network."""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor, make_node

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
DICE_EPS = 1e-6

_ALLOWED_KERNELS = (1, 2, 5)


def _check_5d(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise ValueError(f"{what} must be (N, C, X, Y, Z), got shape {x.shape}")


def _check_kernel(w: Tensor) -> None:
    if w.ndim != 5:
        raise ValueError(f"kernel must be (out, in, kx, ky, kz), got shape {w.shape}")
    if any(k not in _ALLOWED_KERNELS for k in w.shape[2:]):
        raise ValueError(f"kernel sizes must be in {_ALLOWED_KERNELS}, got {w.shape[2:]}")


def default_padding(ksize: int, stride: int) -> int:
    return (ksize - 1) // 2 if stride == 1 else 0


def conv3d(x, weight, bias=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation with zero padding; ``weight`` is ``(out, in, k, k, k)``.

    With the default padding a stride-1 convolution keeps the spatial dims and
    a stride-2 convolution with a 2-wide kernel halves them.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_5d(x, "input")
    _check_kernel(weight)
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    if padding is None:
        padding = default_padding(weight.shape[2], stride)
    if stride > 1 and any(d % stride for d in x.shape[2:]):
        raise ValueError(f"spatial dims {x.shape[2:]} not divisible by stride {stride}")
    if bias is None:
        bias = Tensor(np.zeros(weight.shape[0], dtype=weight.dtype))
    bias = as_tensor(bias)
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
    out = kernels.conv_forward(xp, weight.data, bias.data, stride)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = kernels.conv_backward_input(g, weight.data, stride, xp.shape)
            gx = gxp[:, :, p:gxp.shape[2] - p, p:gxp.shape[3] - p, p:gxp.shape[4] - p] if p else gxp
        if weight.requires_grad:
            gw = kernels.conv_backward_weight(g, xp, stride, weight.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(g.dtype)
        return gx, gw, gb

    return make_node(out, (x, weight, bias), backward)


def conv3d_transpose(x, weight, bias=None, stride: int = 2) -> Tensor:
    """Adjoint of the unpadded strided ``conv3d``.

    ``weight`` has shape ``(in, out, k, k, k)``, i.e. the weight of the
    convolution this operator transposes.  A 2-wide kernel at stride 2
    doubles every spatial dim.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_5d(x, "input")
    _check_kernel(weight)
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {weight.shape[0]}")
    n, _, X, Y, Z = x.shape
    k = weight.shape[2:]
    out_shape = (n, weight.shape[1], (X - 1) * stride + k[0], (Y - 1) * stride + k[1], (Z - 1) * stride + k[2])
    if bias is None:
        bias = Tensor(np.zeros(weight.shape[1], dtype=weight.dtype))
    bias = as_tensor(bias)
    out = kernels.conv_backward_input(x.data, weight.data, stride, out_shape)
    out += bias.data.astype(out.dtype)[None, :, None, None, None]

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            zeros = np.zeros(weight.shape[0], dtype=g.dtype)
            gx = kernels.conv_forward(g, weight.data, zeros, stride)
        if weight.requires_grad:
            gw = kernels.conv_backward_weight(x.data, g, stride, weight.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(g.dtype)
        return gx, gw, gb

    return make_node(out, (x, weight, bias), backward)


def selu(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    neg = d <= 0
    e = np.exp(np.minimum(d, 0))
    out = np.where(neg, SELU_LAMBDA * SELU_ALPHA * (e - 1), SELU_LAMBDA * d).astype(d.dtype, copy=False)

    def backward(g):
        return (g * np.where(neg, SELU_LAMBDA * SELU_ALPHA * e, SELU_LAMBDA).astype(g.dtype, copy=False),)

    return make_node(out, (x,), backward)


def _sigmoid(d: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(d))
    return np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1 - s),)

    return make_node(s, (x,), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_node(out, tuple(tensors), backward)


def residual_combine(block_input, block_output, projection=None) -> Tensor:
    """Skip connection: ``block_output + block_input`` (projected when channels differ).

    ``projection`` is a bias-free ``(out, in, 1, 1, 1)`` kernel and is required
    exactly when the channel counts differ.
    """
    block_input, block_output = as_tensor(block_input), as_tensor(block_output)
    if block_input.shape[2:] != block_output.shape[2:]:
        raise ValueError(f"spatial dims differ: {block_input.shape[2:]} vs {block_output.shape[2:]}")
    if block_input.shape[1] == block_output.shape[1] and projection is None:
        return add(block_output, block_input)
    if projection is None:
        raise ValueError(
            f"channel mismatch {block_input.shape[1]} -> {block_output.shape[1]} needs a projection kernel")
    projected = conv3d(block_input, projection, None, stride=1, padding=0)
    return add(block_output, projected)


def soft_dice_loss(probs, target, eps: float = DICE_EPS) -> Tensor:
    """``1 - 2 sum(p g) / (sum(p^2) + sum(g^2) + eps)`` over all elements."""
    probs = as_tensor(probs)
    g = np.asarray(target.data if isinstance(target, Tensor) else target)
    if probs.shape != g.shape:
        raise ValueError(f"shape mismatch: probs {probs.shape} vs target {g.shape}")
    p = probs.data.astype(np.float64, copy=False)
    g = g.astype(np.float64, copy=False)
    inter = float(np.sum(p * g))
    den = float(np.sum(p * p)) + float(np.sum(g * g)) + eps
    loss = 1.0 - 2.0 * inter / den

    def backward(grad):
        scale = float(grad)
        dp = -2.0 * (g * den - inter * 2.0 * p) / (den * den)
        return ((scale * dp).astype(probs.dtype, copy=False),)

    return make_node(np.asarray(loss, dtype=np.float64), (probs,), backward)
