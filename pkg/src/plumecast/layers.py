"""Parameterised building blocks: convolution, ConvLSTM and batch norm."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def truncated_normal(rng, shape, std, bound=2.0):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class ParamStore:
    """Named trainable tensors and batch-norm states of one model."""

    def __init__(self, rng, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.bn: "OrderedDict[str, ad.BatchNormState]" = OrderedDict()

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def kernel(self, name, shape):
        fan_in = int(np.prod(shape[:-1]))
        return self.add(name, truncated_normal(self.rng, shape, np.sqrt(1.0 / fan_in)))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def batch_norm_state(self, name, channels):
        st = ad.BatchNormState(channels, dtype=self.dtype)
        self.bn[name] = st
        return st


def _flatten_time(x):
    """``(B, T, H, W, C)`` -> ``(B*T, H, W, C)`` (4-D input passes through)."""
    if x.ndim == 4:
        return x, None
    b, t = x.shape[:2]
    return x.reshape(b * t, *x.shape[2:]), (b, t)


def _unflatten_time(x, bt):
    if bt is None:
        return x
    return x.reshape(bt[0], bt[1], *x.shape[1:])


class Conv2D:
    """Same-padded convolution applied independently to every leading index."""

    def __init__(self, store: ParamStore, name, cin, cout, ksize=3):
        self.cin, self.cout, self.ksize = cin, cout, ksize
        self.kernel = store.kernel(f"{name}.kernel", (ksize, ksize, cin, cout))
        self.bias = store.zeros(f"{name}.bias", (cout,))

    def __call__(self, x):
        x4, bt = _flatten_time(x)
        return _unflatten_time(ad.conv2d(x4, self.kernel, self.bias), bt)


class BatchNorm:
    def __init__(self, store: ParamStore, name, channels):
        self.gamma = store.add(f"{name}.gamma", np.ones(channels))
        self.beta = store.zeros(f"{name}.beta", (channels,))
        self.state = store.batch_norm_state(name, channels)

    def __call__(self, x, training):
        return ad.batch_norm(x, self.gamma, self.beta, self.state, training)


class ConvLSTM:
    """Convolutional LSTM without peephole connections.

    Gate kernels for the input-to-state and state-to-state paths are stored as
    ``(k, k, C, 4*Ch)`` blocks laid out ``[i | f | g | o]``; the forget-gate bias
    starts at +1.
    """

    def __init__(self, store: ParamStore, name, cin, hidden, ksize=3):
        self.cin, self.hidden, self.ksize = cin, hidden, ksize
        self.w_x = store.kernel(f"{name}.input_kernel", (ksize, ksize, cin, 4 * hidden))
        self.w_h = store.kernel(f"{name}.recurrent_kernel", (ksize, ksize, hidden, 4 * hidden))
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        self.bias = store.add(f"{name}.bias", bias)

    def step(self, x, h, c):
        """One update from ``(B, H, W, C)`` input and state (``h``/``c`` may be None)."""
        z = ad.conv2d(x, self.w_x, self.bias)
        if h is not None:
            z = z + ad.conv2d(h, self.w_h)
        return ad.lstm_cell(z, c)

    def __call__(self, x_seq, return_sequences=True):
        """Scan over ``(B, T, H, W, C)``; returns ``(B, T, H, W, Ch)`` or the last ``h``."""
        if x_seq.ndim != 5 or x_seq.shape[-1] != self.cin:
            raise ad.ShapeError(f"ConvLSTM expects (B, T, H, W, {self.cin}), got {x_seq.shape}")
        b, t = x_seq.shape[:2]
        # the input path does not depend on the state: one batched convolution
        zx = ad.conv2d(x_seq.reshape(b * t, *x_seq.shape[2:]), self.w_x, self.bias)
        steps = ad.unstack(zx.reshape(b, t, *zx.shape[1:]), axis=1)
        h = c = None
        hs = []
        for z in steps:
            if h is not None:
                z = z + ad.conv2d(h, self.w_h)
            h, c = ad.lstm_cell(z, c)
            hs.append(h)
        return ad.stack(hs, axis=1) if return_sequences else h
