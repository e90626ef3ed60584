"""Differentiable operations on :class:`Tensor`.

Layout convention for images is NHWC. Every op computes its forward value
eagerly with numpy (or the compiled kernels) and records a closure that maps
output gradients to input gradients.
"""
from __future__ import annotations

import builtins

import numpy as np

from .. import kernels
from .tensor import ShapeError, Tensor, as_tensor, record

# upper bound on the number of im2col elements materialised at once
_COLS_BUDGET = 4_000_000

# when a list, relu appends its active-region masks (used by kink-aware gradient checks)
relu_probe = None


class NoValidCellsError(ValueError):
    """A masked loss was asked to average over zero valid cells."""


def _const(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise binary --------------------------------------------------------

def add(a, b):
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record([out], [a, b], backward, "add")[0]


def sub(a, b):
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record([out], [a, b], backward, "sub")[0]


def mul(a, b):
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record([out], [a, b], backward, "mul")[0]


# -- elementwise unary ---------------------------------------------------------

def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    if relu_probe is not None:
        relu_probe.append(mask)
    out = Tensor(np.where(mask, x.data, 0).astype(x.dtype, copy=False))
    return record([out], [x], lambda g: (g * mask,), "relu")[0]


def sigmoid(x):
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = Tensor(y)
    return record([out], [x], lambda g: (g * y * (1.0 - y),), "sigmoid")[0]


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    out = Tensor(y)
    return record([out], [x], lambda g: (g * (1.0 - y * y),), "tanh")[0]


def log1p(x):
    x = as_tensor(x)
    out = Tensor(np.log1p(x.data))
    return record([out], [x], lambda g: (g / (1.0 + x.data),), "log1p")[0]


def square(x):
    x = as_tensor(x)
    out = Tensor(x.data * x.data)
    return record([out], [x], lambda g: (2.0 * g * x.data,), "square")[0]


# -- reductions and shape ops --------------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = Tensor(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record([out], [x], backward, "sum")[0]


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = Tensor(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)))
    count = x.data.size // max(1, out.data.size)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / count).astype(x.dtype),)

    return record([out], [x], backward, "mean")[0]


def reshape(x, shape):
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    out = Tensor(y)
    return record([out], [x], lambda g: (g.reshape(x.shape),), "reshape")[0]


def getitem(x, idx):
    x = as_tensor(x)
    out = Tensor(np.array(x.data[idx], copy=True))

    def backward(g):
        full = np.zeros_like(x.data)
        if _advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return record([out], [x], backward, "slice")[0]


def _advanced(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return builtins.any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or builtins.any(
                t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[u.shape for u in tensors]} on axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        sl = [slice(None)] * nd
        res = []
        for i in range(len(tensors)):
            sl[ax] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(sl)])
        return tuple(res)

    return record([out], tensors, backward, "concat")[0]


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    if builtins.any(t.shape != shape for t in tensors):
        raise ShapeError(f"stack: shapes differ {[t.shape for t in tensors]}")
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record([out], tensors, backward, "stack")[0]


def unstack(x, axis=0):
    """Split ``x`` along ``axis`` into a list of tensors (inverse of :func:`stack`)."""
    x = as_tensor(x)
    outs = [Tensor(np.ascontiguousarray(np.take(x.data, i, axis=axis)))
            for i in range(x.shape[axis])]

    def backward(*gs):
        return (np.stack(gs, axis=axis),)

    return record(outs, [x], backward, "unstack")


def broadcast_to(x, shape):
    x = as_tensor(x)
    try:
        y = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: {x.shape} -> {shape}") from None
    out = Tensor(np.ascontiguousarray(y))
    return record([out], [x], lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")[0]


# -- spatial ops -----------------------------------------------------------------

def _cols_step(n, rows_per_sample, width):
    per = max(1, rows_per_sample * width)
    return builtins.max(1, builtins.min(n, _COLS_BUDGET // per))


def conv2d(x, w, b=None):
    """Same-padded stride-1 cross-correlation.

    Args:
        x: input ``(N, H, W, Cin)``.
        w: kernels ``(kh, kw, Cin, Cout)`` with odd ``kh`` and ``kw``.
        b: optional bias ``(Cout,)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, h, wd, c = x.shape
    kh, kw, ci, co = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({co},)")
    ph, pw = kh // 2, kw // 2
    wmat = w.data.reshape(kh * kw * c, co)
    hw = h * wd
    if kh == 1 and kw == 1:
        y = x.data.reshape(-1, c) @ wmat
    else:
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        y = np.empty((n * hw, co), dtype=np.result_type(x.data, w.data))
        step = _cols_step(n, hw, kh * kw * c)
        for s in range(0, n, step):
            e = builtins.min(n, s + step)
            y[s * hw:e * hw] = kernels.im2col(xp[s:e], kh, kw) @ wmat
    if b is not None:
        y += b.data
    out = Tensor(y.reshape(n, h, wd, co))

    def backward(g):
        g2 = g.reshape(-1, co)
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        if kh == 1 and kw == 1:
            if w.requires_grad:
                gw = (x.data.reshape(-1, c).T @ g2).reshape(w.shape)
            if x.requires_grad:
                gx = (g2 @ wmat.T).reshape(x.shape)
            return gx, gw, gb
        xp_ = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        hp, wp = h + 2 * ph, wd + 2 * pw
        gw_acc = np.zeros_like(wmat) if w.requires_grad else None
        gxp = np.empty_like(xp_) if x.requires_grad else None
        step_ = _cols_step(n, hw, kh * kw * c)
        for s in range(0, n, step_):
            e = builtins.min(n, s + step_)
            gc = g2[s * hw:e * hw]
            if gw_acc is not None:
                gw_acc += kernels.im2col(xp_[s:e], kh, kw).T @ gc
            if gxp is not None:
                gxp[s:e] = kernels.col2im(gc @ wmat.T, e - s, hp, wp, c, kh, kw)
        if gw_acc is not None:
            gw = gw_acc.reshape(w.shape)
        if gxp is not None:
            gx = np.ascontiguousarray(gxp[:, ph:ph + h, pw:pw + wd, :])
        return gx, gw, gb

    inputs = [x, w] if b is None else [x, w, b]
    return record([out], inputs, lambda g: backward(g)[:len(inputs)], "conv2d")[0]


def lstm_cell(z, c_prev=None):
    """ConvLSTM state update from gate pre-activations.

    ``z`` is ``(..., 4*Ch)`` laid out ``[i | f | g | o]``; ``c_prev`` is
    ``(..., Ch)`` (zeros when omitted). Returns ``(h, c)``.
    """
    z = as_tensor(z)
    if z.shape[-1] % 4:
        raise ShapeError(f"lstm_cell: gate axis {z.shape[-1]} not divisible by 4")
    ch = z.shape[-1] // 4
    lead = z.shape[:-1]
    if c_prev is None:
        c_prev = Tensor(np.zeros(lead + (ch,), dtype=z.dtype))
    c_prev = as_tensor(c_prev)
    if c_prev.shape != lead + (ch,):
        raise ShapeError(f"lstm_cell: cell state {c_prev.shape} does not match gates {z.shape}")
    z2 = z.data.reshape(-1, 4 * ch)
    cp2 = c_prev.data.reshape(-1, ch)
    act, c, h = kernels.lstm_forward(z2, cp2)
    h_t = Tensor(h.reshape(lead + (ch,)))
    c_t = Tensor(c.reshape(lead + (ch,)))

    def backward(gh, gc):
        dz, dcp = kernels.lstm_backward(act, cp2, c, gh.reshape(-1, ch), gc.reshape(-1, ch))
        return dz.reshape(z.shape), dcp.reshape(c_prev.shape)

    return tuple(record([h_t, c_t], [z, c_prev], backward, "lstm_cell"))


class BatchNormState:
    """Running statistics of one batch-normalisation layer."""

    def __init__(self, channels, momentum=0.99, eps=1e-3, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool):
    """Normalise over every axis but the last (channels)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.running_mean.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but parameters sized {gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1.0 - m) * mu
        state.running_var[...] = m * state.running_var + (1.0 - m) * var
    else:
        mu, var = state.running_mean, state.running_var
    inv = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x.data - mu.astype(x.dtype)) * inv
    out = Tensor(xhat * gamma.data + beta.data)
    count = x.data.size // c

    def backward(g):
        gsum = g.sum(axis=axes)
        ggam = (g * xhat).sum(axis=axes)
        dxhat = g * gamma.data
        if training:
            gx = (inv / count) * (count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            gx = dxhat * inv
        return gx.astype(x.dtype, copy=False), ggam, gsum

    return record([out], [x, gamma, beta], backward, "batch_norm")[0]


def avg_pool2d(x, factor):
    """Block mean over ``factor x factor`` cells of a ``(..., H, W, C)`` tensor."""
    x = as_tensor(x)
    f = int(factor)
    if f < 1:
        raise ShapeError("avg_pool2d: factor must be >= 1")
    *lead, h, w, c = x.shape
    if h % f or w % f:
        raise ShapeError(f"avg_pool2d: grid {h}x{w} not divisible by {f}")
    y = x.data.reshape(*lead, h // f, f, w // f, f, c).mean(axis=(-4, -2))
    out = Tensor(y.astype(x.dtype, copy=False))

    def backward(g):
        g = np.repeat(np.repeat(g, f, axis=-3), f, axis=-2) / (f * f)
        return (g.astype(x.dtype, copy=False),)

    return record([out], [x], backward, "avg_pool2d")[0]


def upsample_nearest2d(x, factor):
    """Replicate each cell of a ``(..., H, W, C)`` tensor into a ``factor x factor`` block."""
    x = as_tensor(x)
    f = int(factor)
    if f < 1:
        raise ShapeError("upsample_nearest2d: factor must be >= 1")
    *lead, h, w, c = x.shape
    y = np.repeat(np.repeat(x.data, f, axis=-3), f, axis=-2)
    out = Tensor(y)

    def backward(g):
        return (g.reshape(*lead, h, f, w, f, c).sum(axis=(-4, -2)),)

    return record([out], [x], backward, "upsample_nearest2d")[0]


# -- loss --------------------------------------------------------------------------

def masked_msle(pred, target):
    """Mean squared log error over the cells where ``target`` is not NaN.

    Returns ``(loss, n_valid)``. Raises :class:`NoValidCellsError` when every
    target cell is NaN.
    """
    pred = as_tensor(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"masked_msle: prediction {pred.shape} vs target {target.shape}")
    valid = ~np.isnan(target)
    n = int(valid.sum())
    if n == 0:
        raise NoValidCellsError("every target cell is masked")
    tgt = np.where(valid, target, 0.0)
    diff = np.where(valid, np.log1p(pred.data) - np.log1p(tgt), 0.0)
    loss = Tensor(np.asarray(np.sum(diff * diff, dtype=np.float64) / n, dtype=pred.dtype))

    def backward(g):
        return ((g * 2.0 * diff / ((1.0 + pred.data) * n)).astype(pred.dtype, copy=False),)

    return record([loss], [pred], backward, "masked_msle")[0], n
