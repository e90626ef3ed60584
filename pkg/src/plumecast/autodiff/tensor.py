"""Tensor type and the reverse-mode graph walk."""
from __future__ import annotations

import contextlib
import threading
import weakref

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the requested operation."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One recorded operation: its inputs and how to push gradients back to them.

    ``backward`` receives one gradient array per output (zeros substituted for
    outputs that received none) and returns one gradient (or None) per input.
    """

    __slots__ = ("inputs", "outputs", "out_shapes", "backward", "name")

    def __init__(self, inputs, backward, name=""):
        self.inputs = inputs
        self.backward = backward
        self.outputs = []  # weak references; a dead output received no gradient
        self.out_shapes = []
        self.name = name


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # -- operator sugar (implementations live in ops) ----------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    # -- differentiation ---------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it.

        Each recorded node is visited exactly once, in reverse topological
        order; gradients reaching a tensor along several paths are summed.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if self.node is None:
            if self.requires_grad:
                self.grad = grad.copy() if self.grad is None else self.grad + grad
            return

        order = _toposort(self.node)
        grads = {id(self): grad}
        for node in reversed(order):
            outs = []
            for ref in node.outputs:
                out = ref()
                outs.append(None if out is None else grads.pop(id(out), None))
            if all(g is None for g in outs):
                continue
            outs = [np.zeros(shp, dtype=_dtype_of(node)) if g is None else g
                    for g, shp in zip(outs, node.out_shapes)]
            in_grads = node.backward(*outs)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if g.shape != t.data.shape:
                    raise ShapeError(f"{node.name}: gradient shape {g.shape} != input shape {t.data.shape}")
                if t.node is None:
                    t.grad = g.astype(t.data.dtype, copy=True) if t.grad is None else t.grad + g
                else:
                    k = id(t)
                    prev = grads.get(k)
                    grads[k] = g if prev is None else prev + g


def _dtype_of(node):
    for t in node.inputs:
        if isinstance(t, Tensor):
            return t.data.dtype
    return np.float64


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if isinstance(t, Tensor) and t.node is not None and id(t.node) not in seen:
                stack.append((t.node, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def record(outputs, inputs, backward, name=""):
    """Attach a graph node producing ``outputs`` from ``inputs``.

    ``outputs`` is a list of freshly created tensors. Nothing is recorded when
    grad mode is off or no input requires a gradient.
    """
    if not grad_enabled() or not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return outputs
    node = Node(tuple(inputs), backward, name)
    for out in outputs:
        out.requires_grad = True
        out.node = node
        node.outputs.append(weakref.ref(out))
        node.out_shapes.append(out.data.shape)
    return outputs
