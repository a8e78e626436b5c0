"""Differentiable primitives.

Each function takes tensors (or scalars/arrays, lifted as constants) and
returns a tensor whose backward closure maps the output gradient to one
gradient per parent. Image tensors use the NCHW layout.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_result

LEAKY_SLOPE = 0.2


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    if not isinstance(b, Tensor):
        b = _lift(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return a, b


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_result(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return make_result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return make_result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(ad))
    out = np.where(ad >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(ad.dtype)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make_result(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    ad = a.data
    scale = np.where(ad > 0, 1.0, slope).astype(ad.dtype)
    return make_result(ad * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip values; gradient passes only where the input was inside the range."""
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    return make_result(out, (a,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return make_result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    out = a.data[idx]
    advanced = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return make_result(np.array(out, copy=True), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(out, tensors, backward, "stack")


def matmul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return make_result(ad @ bd, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def same_padding(n: int, k: int, stride: int) -> tuple:
    """(before, after) zero padding giving ceil(n / stride) outputs."""
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Cross-correlation with "same" zero padding; x is (N,C,H,W), w is (O,C,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d input {x.shape} vs kernel {w.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"unsupported stride {stride}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    pt, pb = same_padding(h, kh, stride)
    pl, pr = same_padding(wd, kw, stride)
    ho, wo = -(-h // stride), -(-wd // stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    wdat = w.data
    out = np.tensordot(win, wdat, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.tensordot(g, wdat, axes=([1], [0]))  # N,ho,wo,C,kh,kw
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, pt:pt + h, pl:pl + wd]
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Transposed convolution producing exactly ``stride * H`` by ``stride * W``.

    x is (N,Cin,H,W), w is (Cin,Cout,k,k). The full ``(H-1)*stride + k``
    output is cropped starting at ``(k-1)//2``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d input {x.shape} vs kernel {w.shape}")
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    hf, wf = (h - 1) * stride + kh, (wd - 1) * stride + kw
    ct, cl = (kh - 1) // 2, (kw - 1) // 2
    ho, wo = stride * h, stride * wd
    if ct + ho > hf or cl + wo > wf:
        raise ShapeError("kernel too small for transposed conv crop")
    wdat, xdat = w.data, x.data
    cols = np.tensordot(xdat, wdat, axes=([1], [0]))  # N,H,W,Cout,kh,kw
    full = np.zeros((n, cout, hf, wf), dtype=xdat.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * (h - 1) + 1:stride, j:j + stride * (wd - 1) + 1:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = full[:, :, ct:ct + ho, cl:cl + wo]
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros((n, cout, hf, wf), dtype=g.dtype)
        gfull[:, :, ct:ct + ho, cl:cl + wo] = g
        win = sliding_window_view(gfull, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h, :wd]
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.tensordot(win, wdat, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = np.tensordot(xdat, win, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, backward, "conv_transpose2d")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5, min_count: int = 2) -> Tensor:
    """Per-channel batch norm over (N, H, W).

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place as ``momentum * running + (1 - momentum) * batch``.
    A batch with fewer than ``min_count`` samples per channel has no usable
    statistics; it is normalized with the running buffers, which are then left
    untouched.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm input {x.shape} vs affine {gamma.shape}/{beta.shape}")
    xd = x.data
    c = xd.shape[1]
    gd = gamma.data.reshape(1, c, 1, 1)
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    training = training and m >= max(2, min_count)
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype).reshape(1, c, 1, 1)
    xhat = (xd - mu.reshape(1, c, 1, 1).astype(xd.dtype)) * inv_std
    out = gd * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dxhat = g * gd
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv_std * (dxhat - s1 / m - xhat * s2 / m)
        else:
            gx = dxhat * inv_std
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# image-specific
# ---------------------------------------------------------------------------

def spatial_gradient(a: Tensor, axis: int) -> Tensor:
    """Forward difference along ``axis``; the final slice is zero (replicate boundary)."""
    axis = axis % a.ndim
    n = a.shape[axis]
    ad = a.data
    lo = [slice(None)] * a.ndim
    hi = [slice(None)] * a.ndim
    lo[axis] = slice(0, n - 1)
    hi[axis] = slice(1, n)
    lo, hi = tuple(lo), tuple(hi)
    out = np.zeros_like(ad)
    out[lo] = ad[hi] - ad[lo]

    def backward(g):
        gi = np.zeros_like(g)
        gl = g[lo]
        gi[hi] += gl
        gi[lo] -= gl
        return (gi,)

    return make_result(out, (a,), backward, "spatial_gradient")


# ---------------------------------------------------------------------------
# operator overloads
# ---------------------------------------------------------------------------

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = lambda self, other: div(self, other)
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__pow__ = lambda self, p: power(self, p)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.__rmatmul__ = lambda self, other: matmul(other, self)
Tensor.__getitem__ = lambda self, idx: getitem(self, idx)
Tensor.sum = lambda self, axis=None, keepdims=False: sum(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 else shape)
Tensor.transpose = lambda self, axes=None: transpose(self, axes)
Tensor.T = property(lambda self: transpose(self))
Tensor.abs = lambda self: absolute(self)
Tensor.exp = lambda self: exp(self)
