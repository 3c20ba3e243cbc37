"""Differentiable operators for 3D convolutional networks (NCDHW layout)."""

import typing as t

import numpy as np
import scipy.special
from numpy.lib.stride_tricks import sliding_window_view

from mpae.abc import ActivationKind, LossKind, PaddingMode
from mpae.exceptions import ConfigError, DimensionError
from mpae.tensor import Tensor

SPATIAL = (2, 3, 4)


def _pad(x: np.ndarray, padding: int, mode: PaddingMode) -> np.ndarray:
    if padding == 0:
        return x
    widths = ((0, 0), (0, 0)) + ((padding, padding),) * 3
    if mode == "zeros":
        return np.pad(x, widths, mode="constant")
    if mode == "circular":
        return np.pad(x, widths, mode="wrap")
    raise ConfigError(f"Unknown padding mode '{mode}'")


def _unpad(gp: np.ndarray, padding: int, mode: PaddingMode) -> np.ndarray:
    """Adjoint of ``_pad``."""
    if padding == 0:
        return gp
    p = padding
    if mode == "zeros":
        return np.ascontiguousarray(gp[:, :, p:-p, p:-p, p:-p])
    for axis in SPATIAL:
        moved = np.moveaxis(gp, axis, 0)
        n = moved.shape[0] - 2 * p
        core = moved[p : p + n].copy()
        core[n - p :] += moved[:p]
        core[:p] += moved[p + n :]
        gp = np.moveaxis(core, 0, axis)
    return np.ascontiguousarray(gp)


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    padding_mode: PaddingMode = "zeros",
) -> Tensor:
    """Cross-correlation of ``x`` (N, C, D, H, W) with ``weight`` (O, C, k, k, k)."""
    if x.ndim != 5 or weight.ndim != 5:
        raise DimensionError(
            f"conv3d expects 5D input and kernel, got {x.shape} and {weight.shape}"
        )
    out_channels, in_channels, k = weight.shape[:3]
    if weight.shape[2:] != (k, k, k) or k % 2 == 0:
        raise DimensionError(f"conv3d needs an odd cubic kernel, got {weight.shape[2:]}")
    if x.shape[1] != in_channels:
        raise DimensionError(
            f"conv3d input has {x.shape[1]} channels, kernel expects {in_channels}"
        )
    if bias is not None and bias.shape != (out_channels,):
        raise DimensionError(f"conv3d bias must have shape ({out_channels},), got {bias.shape}")
    if padding_mode == "circular" and padding > min(x.shape[2:]):
        raise DimensionError("Circular padding wider than the input")
    if any(d + 2 * padding < k for d in x.shape[2:]):
        raise DimensionError(f"Input {x.shape[2:]} too small for kernel size {k}")

    xp = _pad(x.data, padding, padding_mode)
    windows = sliding_window_view(xp, (k, k, k), axis=SPATIAL)[
        :, :, ::stride, ::stride, ::stride
    ]
    out = np.tensordot(windows, weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.moveaxis(out, -1, 1)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
    out = np.ascontiguousarray(out)
    w = weight.data

    def _backward(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        gxp = np.zeros_like(xp)
        d, h, wd = g.shape[2:]
        s = stride
        for a, b, c in np.ndindex(k, k, k):
            contrib = np.tensordot(g, w[:, :, a, b, c], axes=([1], [0]))
            gxp[:, :, a : a + s * d : s, b : b + s * h : s, c : c + s * wd : s] += (
                np.moveaxis(contrib, -1, 1)
            )
        return _unpad(gxp, padding, padding_mode), gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, _backward, "conv3d")


def weight_standardize(weight: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance kernels per output channel (population variance)."""
    shape = weight.shape
    flat = weight.data.reshape(shape[0], -1)
    mean = flat.mean(axis=1, keepdims=True)
    var = flat.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mean) * inv_std

    def _backward(g):
        gf = g.reshape(shape[0], -1)
        gx = inv_std * (
            gf
            - gf.mean(axis=1, keepdims=True)
            - xhat * (gf * xhat).mean(axis=1, keepdims=True)
        )
        return (gx.reshape(shape),)

    return Tensor.from_op(xhat.reshape(shape), (weight,), _backward, "weight_standardize")


def group_norm(
    x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> Tensor:
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ConfigError(f"{c} channels can not be split into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"GroupNorm affine parameters must have shape ({c},)")
    reduce_axes = (0,) + tuple(range(2, x.ndim))
    affine_shape = (1, c) + (1,) * (x.ndim - 2)

    grouped = x.data.reshape(n, groups, -1)
    mean = grouped.mean(axis=-1, keepdims=True)
    var = grouped.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat_g = (grouped - mean) * inv_std
    xhat = xhat_g.reshape(x.shape)
    g_aff = gamma.data.reshape(affine_shape)
    out = xhat * g_aff + beta.data.reshape(affine_shape)

    def _backward(g):
        ggamma = (g * xhat).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        gxhat = (g * g_aff).reshape(n, groups, -1)
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat_g * (gxhat * xhat_g).mean(axis=-1, keepdims=True)
        )
        return gx.reshape(x.shape), ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), _backward, "group_norm")


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return Tensor.from_op(
        np.where(active, x.data, 0).astype(x.dtype),
        (x,),
        lambda g: (g * active,),
        "relu",
    )


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def silu(x: Tensor) -> Tensor:
    s = scipy.special.expit(x.data)
    return Tensor.from_op(
        x.data * s, (x,), lambda g: (g * s * (1 + x.data * (1 - s)),), "silu"
    )


ACTIVATIONS: dict[str, t.Callable[[Tensor], Tensor]] = {
    "silu": silu,
    "relu": relu,
    "tanh": tanh,
}


def activation(x: Tensor, kind: ActivationKind) -> Tensor:
    try:
        fn = ACTIVATIONS[kind.lower()]
    except (KeyError, AttributeError):
        raise ConfigError(
            f"Unknown activation '{kind}', expected one of {sorted(ACTIVATIONS)}"
        ) from None
    return fn(x)


def loss(prediction: Tensor, target: Tensor | np.ndarray, kind: LossKind = "l1") -> Tensor:
    """Mean absolute (``l1``) or mean squared (``mse``) error."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=prediction.dtype))
    if prediction.shape != target.shape:
        raise DimensionError(
            f"Loss needs equal shapes, got {prediction.shape} and {target.shape}"
        )
    diff = prediction.data - target.data
    n = diff.size
    if kind == "l1":
        value = np.abs(diff).mean()
        local = np.sign(diff) / n
    elif kind == "mse":
        value = (diff * diff).mean()
        local = 2.0 * diff / n
    else:
        raise ConfigError(f"Unknown loss '{kind}', expected 'l1' or 'mse'")

    def _backward(g):
        grad = (g * local).astype(prediction.dtype)
        return grad, -grad

    return Tensor.from_op(
        np.asarray(value, dtype=prediction.dtype), (prediction, target), _backward, kind
    )


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data
    for axis in SPATIAL:
        out = np.repeat(out, 2, axis=axis)
    n, c, d, h, w = x.shape

    def _backward(g):
        return (g.reshape(n, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7)),)

    return Tensor.from_op(out, (x,), _backward, "upsample_nearest2x")
