"""Differentiable ops over :class:`Tensor`.

Tensor-tensor elementwise ops require identical shapes (no general
broadcasting). Constants (python scalars or numpy arrays) may broadcast in
``scale`` and ``add_const``; they never receive gradients.
"""

from __future__ import annotations

import numpy as np

from .engine import ConfigError, ShapeError, Tensor


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, factor) -> Tensor:
    """Multiply by a constant (scalar or array broadcastable to ``x``)."""
    f = np.asarray(factor, dtype=x.dtype)
    out = x.data * f
    if out.shape != x.shape:
        raise ShapeError(f"scale: factor {f.shape} does not broadcast onto {x.shape}")
    return Tensor._from_op(out, (x,), lambda g: (g * f,), "scale")


def add_const(x: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=x.dtype)
    out = x.data + c
    if out.shape != x.shape:
        raise ShapeError(f"add_const: constant {c.shape} does not broadcast onto {x.shape}")
    return Tensor._from_op(out, (x,), lambda g: (g,), "add_const")


def relu(x: Tensor, slope: float = 0.0) -> Tensor:
    """max(x, 0) + slope * min(x, 0)."""
    mask = x.data > 0
    if slope == 0.0:
        out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
        return Tensor._from_op(out, (x,), lambda g: (g * mask,), "relu")
    out = np.where(mask, x.data, slope * x.data).astype(x.dtype, copy=False)
    d = np.where(mask, 1.0, slope).astype(x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (g * d,), "leaky_relu")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(xd * xd, (x,), lambda g: (2 * g * xd,), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g / (2 * out),), "sqrt")


def abs_(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def elementwise(x: Tensor, fn, dfn, op: str = "elementwise") -> Tensor:
    """Apply a custom pointwise function with a user-supplied derivative."""
    xd = x.data
    out = np.asarray(fn(xd), dtype=x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (g * dfn(xd),), op)


# ---------------------------------------------------------------- reductions

def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype).reshape(())
    return Tensor._from_op(out, (x,), lambda g: (np.broadcast_to(g, shape).astype(x.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype).reshape(())
    return Tensor._from_op(out, (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def stack_scalars(items: list[Tensor]) -> Tensor:
    """Sum of scalar tensors (used to combine loss terms)."""
    total = items[0]
    for t in items[1:]:
        total = add(total, t)
    return total


# ---------------------------------------------------------------- layout

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return Tensor._from_op(out, (x,), lambda g: (g.transpose(inv),), "permute")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return Tensor._from_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


def take_channels(x: Tensor, index) -> Tensor:
    """Gather channels by index (repeats allowed); gradient scatters back."""
    idx = np.asarray(index, dtype=np.int64)
    c = x.shape[1]

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (slice(None), idx), g)
        return (gx,)

    if idx.size and (idx.min() < 0 or idx.max() >= c):
        raise ShapeError(f"take_channels: index out of range for {c} channels")
    return Tensor._from_op(x.data[:, idx], (x,), bw, "take_channels")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial dims {(h, w)} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), (n, c, h // k, k, w // k, k))
        return (gx.reshape(n, c, h, w),)

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x,), bw, "avg_pool2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    f = factor
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, f, w, f)).reshape(n, c, h * f, w * f)

    def bw(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), bw, "upsample_nearest")


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def _col2im(cols: np.ndarray, shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape
    dx = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    return dx.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation.

    ``w`` has shape (C_out, C_in // groups, K, K). Output channel ``o`` reads
    only the input channels of group ``o // (C_out // groups)``.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected rank-4 input and weight, got {x.shape} and {w.shape}")
    n, c_in, h, wd = x.shape
    c_out, cg, k, k2 = w.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigError(f"conv2d: groups={groups} must divide C_in={c_in} and C_out={c_out}")
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if stride not in (1, 2):
        raise ConfigError(f"conv2d: stride must be 1 or 2, got {stride}")
    if cg != c_in // groups:
        raise ShapeError(f"conv2d: weight expects {cg * groups} input channels, input has {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {k}")
    og = c_out // groups
    dtype = np.result_type(x.dtype, w.dtype)
    xd = x.data.astype(dtype, copy=False)
    wdat = w.data.astype(dtype, copy=False)

    if k == 1 and pad == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        xs = np.ascontiguousarray(xs).reshape(n, groups, cg, ho * wo)
        wm = wdat.reshape(groups, og, cg)
        out = np.matmul(wm[None], xs).reshape(n, c_out, ho, wo)

        def bw(g):
            gy = g.reshape(n, groups, og, ho * wo)
            gw = np.matmul(gy, xs.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
            gxs = np.matmul(wm.transpose(0, 2, 1)[None], gy).reshape(n, c_in, ho, wo)
            if stride > 1:
                gx = np.zeros(x.shape, dtype=gxs.dtype)
                gx[:, :, ::stride, ::stride] = gxs
            else:
                gx = gxs
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return (gx, gw, gb)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        cols = _im2col(xp, k, stride, ho, wo).reshape(groups, cg * k * k, n * ho * wo)
        wm = wdat.reshape(groups, og, cg * k * k)
        out = np.matmul(wm, cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
        out = np.ascontiguousarray(out)

        def bw(g):
            gy = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(groups, og, n * ho * wo)
            gw = np.matmul(gy, cols.transpose(0, 2, 1)).reshape(w.shape)
            gcols = np.matmul(wm.transpose(0, 2, 1), gy).reshape(c_in, k, k, n, ho, wo)
            gxp = _col2im(gcols, xp.shape, k, stride, ho, wo)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return (gx, gw, gb)

    if bias is not None:
        out = out + bias.data.astype(dtype, copy=False)[None, :, None, None]
        return Tensor._from_op(out, (x, w, bias), bw, "conv2d")
    return Tensor._from_op(out, (x, w), lambda g: bw(g)[:2], "conv2d")
