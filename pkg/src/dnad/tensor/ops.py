"""Differentiable primitives.

Every function takes and returns :class:`Tensor` values and registers a
backward rule on the active tape. Only the operator set needed by the cell
search space, the teacher network and the losses is provided.
"""

from __future__ import annotations

import contextlib
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .tensor import ShapeError, Tensor, as_tensor, record

_MAC_COUNTERS: list[list[int]] = []


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of conv/linear calls inside the block.

    Yields a one-element list holding the running total.
    """
    counter = [0]
    _MAC_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTERS.remove(counter)


def _add_macs(n: int) -> None:
    for c in _MAC_COUNTERS:
        c[0] += int(n)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return record("add", (a, b), out, bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return record("sub", (a, b), out, bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb
    return record("mul", (a, b), out, bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = Tensor(a.data / b.data)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb
    return record("div", (a, b), out, bw)


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    return record("log", (x,), out, lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))
    return record("exp", (x,), out, lambda g: (g * out.data,))


def sqrt(x: Tensor) -> Tensor:
    out = Tensor(np.sqrt(x.data))
    return record("sqrt", (x,), out, lambda g: (g * 0.5 / out.data,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = Tensor(np.abs(x.data))
    return record("abs", (x,), out, lambda g: (g * np.sign(x.data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(x.data * mask)
    return record("relu", (x,), out, lambda g: (g * mask,))


def clip_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data > floor
    out = Tensor(np.where(mask, x.data, floor))
    return record("clip_min", (x,), out, lambda g: (g * mask,))


# ----------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return record("sum", (x,), out, bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = Tensor(x.data.reshape(shape))
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    out = Tensor(x.data[index])

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)
    return record("getitem", (x,), out, bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
                a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError("concat", f"extent mismatch {t.shape} vs {ref} off axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))
    return record("concat", tensors, out, bw)


def weighted_sum(tensors: Sequence[Tensor], weights: Tensor) -> Tensor:
    """``sum_k weights[k] * tensors[k]`` for a 1-D weight vector."""
    if weights.ndim != 1 or weights.shape[0] != len(tensors):
        raise ShapeError("weighted_sum", f"{len(tensors)} operands but weights of shape {weights.shape}")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError("weighted_sum", f"operand shape {t.shape} != {shape}")
    w = weights.data
    acc = tensors[0].data * w[0]
    for k in range(1, len(tensors)):
        acc = acc + tensors[k].data * w[k]
    out = Tensor(acc)

    def bw(g):
        gs = [g * w[k] if t.requires_grad else None for k, t in enumerate(tensors)]
        gw = None
        if weights.requires_grad:
            gw = np.array([np.vdot(g, t.data) for t in tensors], dtype=w.dtype)
        return (*gs, gw)
    return record("weighted_sum", (*tensors, weights), out, bw)


# ------------------------------------------------------------ softmax & loss

def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return record("softmax", (x,), out, bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = Tensor(y)

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)
    return record("log_softmax", (x,), out, bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise ShapeError("cross_entropy", f"logits {logits.shape} vs {len(labels)} labels")
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("cross_entropy: non-finite logits")
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    rows = np.arange(n)
    out = Tensor(-logp[rows, labels].mean())

    def bw(g):
        p = e / s
        p[rows, labels] -= 1.0
        return (p * (g / n),)
    return record("cross_entropy", (logits,), out, bw)


# ------------------------------------------------------------ dense layers

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("linear", f"input {x.shape} incompatible with weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    _add_macs(x.shape[0] * weight.shape[0] * weight.shape[1])
    out = Tensor(y)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)
    return record("linear", inputs, out, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", f"expected (B,C,H,W), got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),)
    return record("global_avg_pool", (x,), out, bw)


# ------------------------------------------------------------- convolution

def _out_extent(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """2-D cross-correlation; ``weight`` has shape (out, in/groups, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and weight, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c % groups or o % groups or c // groups != cg:
        raise ShapeError("conv2d", f"input channels {c} / groups {groups} do not match weight {weight.shape}")
    ho = _out_extent(h, kh, stride, padding, dilation)
    wo = _out_extent(w, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} (dilation {dilation}) too large for {h}x{w} with padding {padding}")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    wd = weight.data

    def window(i, j):
        r, s = i * dilation, j * dilation
        return (slice(None), slice(None),
                slice(r, r + stride * (ho - 1) + 1, stride),
                slice(s, s + stride * (wo - 1) + 1, stride))

    depthwise = groups == c and cg == 1 and o == c
    if depthwise:
        xp = np.ascontiguousarray(xp)
        y = kernels.depthwise_forward(xp, np.ascontiguousarray(wd[:, 0]), stride, dilation, ho, wo)
    elif groups == 1:
        cols = sliding_window_view(xp, (dilation * (kh - 1) + 1, dilation * (kw - 1) + 1), axis=(2, 3))
        cols = cols[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :ho, :wo]
        y = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        og = o // groups
        wg = wd.reshape(groups, og, cg, kh, kw)
        y = np.zeros((b, groups, og, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = xp[window(i, j)].reshape(b, groups, cg, ho, wo)
                y += np.einsum("bgchw,goc->bgohw", patch, wg[:, :, :, i, j])
        y = y.reshape(b, o, ho, wo)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    _add_macs(b * o * ho * wo * cg * kh * kw)
    out = Tensor(np.ascontiguousarray(y))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if depthwise:
            gw0, gxp = kernels.depthwise_backward(xp, np.ascontiguousarray(wd[:, 0]),
                                                  np.ascontiguousarray(g, dtype=xp.dtype),
                                                  stride, dilation, x.requires_grad)
            gw = gw0[:, None]
            if not x.requires_grad:
                gxp = None
        else:
            gxp = np.zeros_like(xp) if x.requires_grad else None
            gw = np.zeros_like(wd)
        if depthwise:
            pass
        elif groups == 1:
            gw[...] = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            if gxp is not None:
                for i in range(kh):
                    for j in range(kw):
                        gxp[window(i, j)] += np.tensordot(g, wd[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        else:
            og = o // groups
            gg = g.reshape(b, groups, og, ho, wo)
            gwg = gw.reshape(groups, og, cg, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    win = window(i, j)
                    patch = xp[win].reshape(b, groups, cg, ho, wo)
                    gwg[:, :, :, i, j] = np.einsum("bgohw,bgchw->goc", gg, patch)
                    if gxp is not None:
                        gxp[win] += np.einsum("bgohw,goc->bgchw", gg, wg[:, :, :, i, j]).reshape(b, c, ho, wo)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))
    return record("conv2d", inputs, out, bw)


def _pool_windows(xp, stride, ho, wo):
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.reshape(*win.shape[:4], 9)


def max_pool3x3(x: Tensor, stride: int = 1) -> Tensor:
    """3x3 max pooling with padding 1; ties route gradient to the first maximum."""
    if x.ndim != 4:
        raise ShapeError("max_pool3x3", f"expected (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    ho, wo = _out_extent(h, 3, stride, 1, 1), _out_extent(w, 3, stride, 1, 1)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    win = _pool_windows(xp, stride, ho, wo)
    idx = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for k in range(9):
            i, j = divmod(k, 3)
            gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * (idx == k)
        return (np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1]),)
    return record("max_pool3x3", (x,), out, bw)


def avg_pool3x3(x: Tensor, stride: int = 1) -> Tensor:
    """3x3 average pooling with zero padding 1, always dividing by 9."""
    if x.ndim != 4:
        raise ShapeError("avg_pool3x3", f"expected (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    ho, wo = _out_extent(h, 3, stride, 1, 1), _out_extent(w, 3, stride, 1, 1)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = Tensor(_pool_windows(xp, stride, ho, wo).sum(axis=-1) / 9.0)

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        g9 = g / 9.0
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g9
        return (np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1]),)
    return record("avg_pool3x3", (x,), out, bw)


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardization with current-batch statistics, then affine."""
    if x.ndim != 4 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError("batch_norm", f"input {x.shape} with scale {scale.shape} / shift {shift.shape}")
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gam = scale.data[None, :, None, None]
    out = Tensor(xhat * gam + shift.data[None, :, None, None])

    def bw(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            dxhat = g * gam
            gx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                              - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, gscale, gshift
    return record("batch_norm", (x, scale, shift), out, bw)
