"""Differentiable primitives.

Each function computes its forward value with numpy and registers a closure
returning one gradient per parent.  Broadcasting is limited to the cases the
pipeline uses: identical shapes, a scalar operand, a trailing-suffix operand
(broadcast over leading axes, e.g. a bias), or a same-rank operand with
size-1 axes (e.g. an attention gate of shape ``(N, C, 1, 1)``).  Anything
else raises :class:`ShapeError`.

Padding for ``conv2d`` is explicit symmetric zero padding; "same" output for
an odd kernel ``k`` at stride 1 is ``padding=k // 2``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .array import DiffArray, ShapeError, as_array


def _const_like(x, ref: DiffArray) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    return DiffArray(np.asarray(x, dtype=ref.dtype))


def _is_scalar_shape(shape) -> bool:
    return all(d == 1 for d in shape)


def _check_broadcast(op: str, sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    if _is_scalar_shape(sb) and len(sb) <= len(sa):
        return sa
    if _is_scalar_shape(sa) and len(sa) <= len(sb):
        return sb
    big, small = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
    if len(small) < len(big):
        if tuple(big[len(big) - len(small):]) == tuple(small):
            return big
        raise ShapeError(op, sa, sb, detail="only leading-axis broadcasting is supported")
    # same rank: one side must be the full shape, the other may carry 1s
    for full, part in ((sa, sb), (sb, sa)):
        if all(p == f or p == 1 for f, p in zip(full, part)):
            return full
    raise ShapeError(op, sa, sb)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> DiffArray:
    a = as_array(a)
    b = _const_like(b, a)
    _check_broadcast("add", a.shape, b.shape)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return DiffArray._from_op(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> DiffArray:
    a = as_array(a)
    b = _const_like(b, a)
    _check_broadcast("sub", a.shape, b.shape)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return DiffArray._from_op(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> DiffArray:
    a = as_array(a)
    b = _const_like(b, a)
    _check_broadcast("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad * bd

    def _bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb
    return DiffArray._from_op(out, (a, b), _bw, "mul")


broadcast_mul = mul


def relu(x: DiffArray) -> DiffArray:
    xd = x.data
    pos = xd > 0
    return DiffArray._from_op(np.where(pos, xd, 0).astype(xd.dtype), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: DiffArray) -> DiffArray:
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return DiffArray._from_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


# -- linear algebra ------------------------------------------------------------

def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims must match")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError("matmul", a.shape, b.shape, detail="batched rhs needs batched lhs")
    ad, bd = a.data, b.data
    out = ad @ bd

    def _bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb
    return DiffArray._from_op(out, (a, b), _bw, "matmul")


# -- shape ---------------------------------------------------------------------

def reshape(x: DiffArray, shape) -> DiffArray:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    src = x.shape
    return DiffArray._from_op(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: DiffArray, axes=None) -> DiffArray:
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes, detail="axes must be a permutation")
    inv = tuple(np.argsort(axes))
    return DiffArray._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(arrays: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    arrays = [as_array(a) for a in arrays]
    if not arrays:
        raise ShapeError("concat", detail="no inputs")
    nd = arrays[0].ndim
    ax = axis % nd
    for a in arrays[1:]:
        if a.ndim != nd or any(s != t for i, (s, t) in enumerate(zip(a.shape, arrays[0].shape)) if i != ax):
            raise ShapeError("concat", arrays[0].shape, a.shape)
    out = np.concatenate([a.data for a in arrays], axis=ax)
    splits = np.cumsum([a.shape[ax] for a in arrays])[:-1]
    return DiffArray._from_op(out, arrays, lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


# -- reductions ----------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    src = x.shape

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)
    return DiffArray._from_op(np.asarray(out), (x,), _bw, "reduce_sum")


def reduce_mean(x: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)
    src = x.shape

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, src).copy(),)
    return DiffArray._from_op(np.asarray(out), (x,), _bw, "reduce_mean")


def reduce_max(x: DiffArray, axis: int, keepdims: bool = False) -> DiffArray:
    """Max along one axis; the gradient goes to the first maximal entry."""
    ax = axis % x.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax)
    src = x.shape

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros(src, dtype=g.dtype)
        np.put_along_axis(full, idx, g, axis=ax)
        return (full,)
    return DiffArray._from_op(out if keepdims else out.squeeze(ax), (x,), _bw, "reduce_max")


# -- normalisation / probabilities --------------------------------------------

def softmax(x: DiffArray, axis: int = -1) -> DiffArray:
    xd = x.data
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)
    return DiffArray._from_op(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def layer_norm(x: DiffArray, axis: int = -1, eps: float = 1e-5) -> DiffArray:
    """Normalise to zero mean / unit variance along ``axis`` (no affine part)."""
    xd = x.data
    n = xd.shape[axis]
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def _bw(g):
        gs = g.sum(axis=axis, keepdims=True)
        gx = (g * xhat).sum(axis=axis, keepdims=True)
        return (inv / n * (n * g - gs - xhat * gx),)
    return DiffArray._from_op(xhat, (x,), _bw, "layer_norm")


def embedding_lookup(table: DiffArray, ids) -> DiffArray:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding_lookup", table.shape, ids.shape, detail="ids must be integers")
    if table.ndim != 2:
        raise ShapeError("embedding_lookup", table.shape, ids.shape, detail="table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding_lookup", table.shape, ids.shape, detail="id out of range")

    def _bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)
    return DiffArray._from_op(table.data[ids], (table,), _bw, "embedding_lookup")


def cross_entropy(logits: DiffArray, target, ignore_index: int | None = None) -> DiffArray:
    """Mean softmax cross-entropy over rows of ``logits`` (shape ``(N, K)``).

    Rows whose target equals ``ignore_index`` are excluded from the mean; if
    every row is ignored the loss is 0.
    """
    target = np.atleast_1d(np.asarray(target))
    ld = logits.data
    if ld.ndim == 1:
        ld = ld[None, :]
    if ld.ndim != 2 or target.shape != (ld.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, target.shape)
    valid = np.ones(len(target), dtype=bool) if ignore_index is None else target != ignore_index
    safe_t = np.where(valid, target, 0)
    if ((safe_t < 0) | (safe_t >= ld.shape[1])).any():
        raise ShapeError("cross_entropy", logits.shape, target.shape, detail="target out of range")
    n = int(valid.sum())
    shifted = ld - ld.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(len(target))
    nll = -logp[rows, safe_t]
    loss = nll[valid].sum() / n if n else 0.0
    src = logits.shape

    def _bw(g):
        if not n:
            return (np.zeros(src, dtype=ld.dtype),)
        p = np.exp(logp)
        p[rows, safe_t] -= 1.0
        p *= valid[:, None] * (g / n)
        return (p.reshape(src),)
    return DiffArray._from_op(np.asarray(loss, dtype=ld.dtype), (logits,), _bw, "cross_entropy")


# -- convolution / pooling ------------------------------------------------------

def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: DiffArray, w: DiffArray, b: DiffArray | None = None, stride: int = 1, padding: int = 0) -> DiffArray:
    """2-D cross-correlation, ``x`` (N, C, H, W) with ``w`` (F, C, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv2d", w.shape, b.shape, detail="bias must be (F,)")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    xp = _pad2d(x.data, p)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    wmat = w.data.reshape(f, -1)
    out = (wmat @ cols).reshape(n, f, ho, wo)
    if b is not None:
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def _bw(g):
        g2 = g.reshape(n, f, ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.einsum("nfl,nkl->fk", g2, cols).reshape(w.shape)
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, i, j]
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)
    return DiffArray._from_op(out, parents, _bw, "conv2d")


def max_pool2d(x: DiffArray, kernel: int | None = None) -> DiffArray:
    """Non-overlapping max pooling (stride = kernel); ``kernel=None`` is global.

    Ties send the gradient to the first maximal position in each window.
    """
    if x.ndim != 4:
        raise ShapeError("max_pool2d", x.shape, detail="expected (N, C, H, W)")
    n, c, h, w = x.shape
    if kernel is None:
        flat = x.data.reshape(n, c, h * w)
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1)

        def _bw(g):
            full = np.zeros((n, c, h * w), dtype=g.dtype)
            np.put_along_axis(full, idx[..., None], g.reshape(n, c, 1), axis=2)
            return (full.reshape(n, c, h, w),)
        return DiffArray._from_op(out, (x,), _bw, "max_pool2d")
    k = int(kernel)
    if h % k or w % k:
        raise ShapeError("max_pool2d", x.shape, detail=f"spatial size not divisible by kernel {k}")
    ho, wo = h // k, w // k
    win = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=4)
    out = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]

    def _bw(g):
        full = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=4)
        return (full.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)
    return DiffArray._from_op(out, (x,), _bw, "max_pool2d")


def avg_pool2d(x: DiffArray, kernel: int | None = None) -> DiffArray:
    """Non-overlapping average pooling; ``kernel=None`` averages globally to 1x1."""
    if x.ndim != 4:
        raise ShapeError("avg_pool2d", x.shape, detail="expected (N, C, H, W)")
    if kernel is None:
        return reduce_mean(x, axis=(2, 3), keepdims=True)
    n, c, h, w = x.shape
    k = int(kernel)
    if h % k or w % k:
        raise ShapeError("avg_pool2d", x.shape, detail=f"spatial size not divisible by kernel {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def _bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)
    return DiffArray._from_op(out, (x,), _bw, "avg_pool2d")
