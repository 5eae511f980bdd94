"""Differentiable operations on :class:`~mfconv.tensor.Tensor`.

Spatial ops accept tensors laid out as ``(N, C, *S)`` with one or two
spatial axes. Every op returns a new tensor; gradients are produced by the
closure attached to the output.
"""

from __future__ import annotations

import builtins
import itertools
from typing import Sequence

import numpy as np

from mfconv.tensor import DimensionError, Tensor, as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise --------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(data, (a, b), backward)


def add_tensors(a, b) -> Tensor:
    """Elementwise sum of two identically shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add_tensors: shapes {a.shape} and {b.shape} differ")
    return add(a, b)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(data, (a, b), backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * g * x.data,)

    return Tensor._from_op(x.data * x.data, (x,), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum()), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        return (np.full(x.shape, float(g) / n),)

    return Tensor._from_op(np.asarray(x.data.mean()), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return Tensor._from_op(data, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return Tensor._from_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim:
        raise DimensionError(f"concat_channels: ranks differ ({a.shape} vs {b.shape})")
    for axis in [0] + list(range(2, a.ndim)):
        if a.shape[axis] != b.shape[axis]:
            raise DimensionError(f"concat_channels: axis {axis} differs ({a.shape} vs {b.shape})")
    ca = a.shape[1]

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return Tensor._from_op(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


# -- activations --------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(x.data * mask, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return Tensor._from_op(y, (x,), backward)


def identity(x: Tensor) -> Tensor:
    return x


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "identity": identity}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


# -- convolution --------------------------------------------------------

def _normalize_padding(padding, d: int) -> list[tuple[int, int]]:
    if isinstance(padding, (int, np.integer)):
        return [(int(padding), int(padding))] * d
    pads = []
    for p in padding:
        if isinstance(p, (int, np.integer)):
            pads.append((int(p), int(p)))
        else:
            lo, hi = p
            pads.append((int(lo), int(hi)))
    if len(pads) != d:
        raise DimensionError(f"padding has {len(pads)} entries for {d} spatial dims")
    return pads


def _normalize_stride(stride, d: int) -> tuple[int, ...]:
    if isinstance(stride, (int, np.integer)):
        return (int(stride),) * d
    stride = tuple(int(s) for s in stride)
    if len(stride) != d:
        raise DimensionError(f"stride has {len(stride)} entries for {d} spatial dims")
    return stride


def _im2col(xp: np.ndarray, k: tuple[int, ...], stride: tuple[int, ...], out_sp: tuple[int, ...]) -> np.ndarray:
    """Gather patches of padded ``xp`` (N,C,*S) into a (C*prod(K), N*prod(S')) matrix."""
    n, c = xp.shape[:2]
    xt = np.ascontiguousarray(xp.swapaxes(0, 1))
    cols = np.empty((c,) + k + (n,) + out_sp)
    for offset in itertools.product(*(range(ki) for ki in k)):
        src = (slice(None), slice(None)) + tuple(
            slice(o, o + (m - 1) * s + 1, s) for o, m, s in zip(offset, out_sp, stride)
        )
        cols[(slice(None),) + offset] = xt[src]
    return cols.reshape(c * int(np.prod(k)), -1)


def conv_forward(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlate ``x`` (N,Cin,*S) with ``kernel`` (Cout,Cin,*K), 1 or 2 spatial dims.

    ``padding`` is an int, one int per spatial dim, or a ``(before, after)``
    pair per dim (needed for same-size output with even kernels).
    """
    d = kernel.ndim - 2
    if d not in (1, 2):
        raise DimensionError(f"conv_forward supports 1 or 2 spatial dims, kernel has {d}")
    if x.ndim != d + 2:
        raise DimensionError(f"conv_forward: input rank {x.ndim} does not match {d}-d kernel")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv_forward: axis 1 (channels) is {x.shape[1]} but kernel expects {kernel.shape[1]}"
        )
    pads = _normalize_padding(padding, d)
    stride = _normalize_stride(stride, d)
    k = kernel.shape[2:]
    padded = tuple(x.shape[2 + i] + pads[i][0] + pads[i][1] for i in range(d))
    for i in range(d):
        if padded[i] < k[i]:
            raise DimensionError(
                f"conv_forward: axis {2 + i} has padded extent {padded[i]} < kernel {k[i]}"
            )
    out_sp = tuple((padded[i] - k[i]) // stride[i] + 1 for i in range(d))
    n, cin = x.shape[:2]
    cout = kernel.shape[0]
    xp = np.pad(x.data, [(0, 0), (0, 0)] + pads) if any(p != (0, 0) for p in pads) else x.data
    cols = _im2col(xp, k, stride, out_sp)
    wmat = kernel.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape((cout, n) + out_sp).swapaxes(0, 1))

    def backward(g):
        gk = gb = gx = None
        gmat = np.ascontiguousarray(g.swapaxes(0, 1)).reshape(cout, -1)
        if kernel.requires_grad:
            gk = (gmat @ cols.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=1)
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape((cin,) + k + (n,) + out_sp)
            gxt = np.zeros((cin, n) + padded)
            for offset in itertools.product(*(range(ki) for ki in k)):
                dst = (slice(None), slice(None)) + tuple(
                    slice(o, o + (m - 1) * s + 1, s) for o, m, s in zip(offset, out_sp, stride)
                )
                gxt[dst] += gcols[(slice(None),) + offset]
            crop = (slice(None), slice(None)) + tuple(
                slice(pads[i][0], padded[i] - pads[i][1]) for i in range(d)
            )
            gx = np.ascontiguousarray(gxt[crop].swapaxes(0, 1))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, parents, backward)


# -- resampling ---------------------------------------------------------

def _block_view(a: np.ndarray, window: int) -> np.ndarray:
    """Reshape (N,C,*S) into (N,C,*S/w, w^d) with window elements last, scan order."""
    d = a.ndim - 2
    n, c = a.shape[:2]
    s = a.shape[2:]
    split = (n, c) + builtins.sum(((si // window, window) for si in s), ())
    v = a.reshape(split)
    outer = tuple(2 + 2 * i for i in range(d))
    inner = tuple(3 + 2 * i for i in range(d))
    v = v.transpose((0, 1) + outer + inner)
    return v.reshape((n, c) + tuple(si // window for si in s) + (window ** d,))


def _unblock_view(b: np.ndarray, window: int, out_shape: tuple[int, ...]) -> np.ndarray:
    d = len(out_shape) - 2
    n, c = out_shape[:2]
    coarse = b.shape[2:2 + d]
    v = b.reshape((n, c) + coarse + (window,) * d)
    perm = [0, 1]
    for i in range(d):
        perm += [2 + i, 2 + d + i]
    return v.transpose(perm).reshape(out_shape)


def maxpool(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling; ties send the gradient to the first element."""
    for axis in range(2, x.ndim):
        if x.shape[axis] % window:
            raise DimensionError(f"maxpool: axis {axis} extent {x.shape[axis]} not divisible by {window}")
    blocks = _block_view(x.data, window)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (_unblock_view(gb, window, x.shape),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward)


def upsample_nearest(x: Tensor, scale: int) -> Tensor:
    if scale < 1:
        raise ValueError(f"upsample scale must be >= 1, got {scale}")
    if scale == 1:
        return x
    data = x.data
    for axis in range(2, x.ndim):
        data = np.repeat(data, scale, axis=axis)

    def backward(g):
        return (_block_view(g, scale).sum(axis=-1),)

    return Tensor._from_op(data, (x,), backward)


# -- normalization ------------------------------------------------------

class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str, state: BatchNormState) -> Tensor:
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batchnorm: axis 1 has {c} channels but gamma/beta have {gamma.shape}/{beta.shape}"
        )
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // c
        unbiased = var * m / (m - 1) if m > 1 else var
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    elif mode == "eval":
        mu, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if mode == "train":
                m = x.data.size // c
                gx = (inv_std.reshape(bshape) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)


# -- masking ------------------------------------------------------------

def masked_scale(x: Tensor, factor: np.ndarray) -> Tensor:
    """Multiply by a constant array (broadcastable to ``x``)."""

    def backward(g):
        return (g * factor,)

    return Tensor._from_op(x.data * factor, (x,), backward)
