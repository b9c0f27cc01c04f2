"""Dense float64 tensors with tape-based reverse-mode differentiation.

The op surface is deliberately small: exactly what a stride-1 padded
conv net and its dice/cross-entropy losses need. Forward math is plain
numpy; every op that sees a grad-requiring input while a Tape is active
records a backward rule on that tape. Accumulation order is fixed
(reverse record order, left-to-right inside each rule), so repeated
runs on identical inputs are bit-identical.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_ACTIVE = threading.local()


class TensorError(ValueError):
    """Shape mismatch, domain violation, or non-finite tensor contents."""


class Tensor:
    """Dense n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, validate=True):
        arr = np.asarray(data, dtype=np.float64)
        if validate and not np.all(np.isfinite(arr)):
            raise TensorError("tensor contains non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # convenience operators; the named functions below do the real work
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of differentiable operations.

    Entries are appended in execution order, which is by construction a
    topological order of the computation; backward() walks them once in
    reverse. Use as a context manager to make ops record themselves.
    """

    def __init__(self):
        self._ops = []  # (out, inputs, rule); rule(g_out) -> per-input grads

    def __enter__(self):
        stack = getattr(_ACTIVE, "stack", None)
        if stack is None:
            stack = _ACTIVE.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.stack.pop()
        return False

    def __len__(self):
        return len(self._ops)


def _active_tape():
    stack = getattr(_ACTIVE, "stack", None)
    return stack[-1] if stack else None


def _out(data, inputs, rule):
    """Wrap an op result; record on the active tape when grads are needed."""
    out = Tensor(data, validate=False)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._ops.append((out, inputs, rule))
    return out


def backward(tape, loss):
    """Accumulate dLoss/dx into .grad of every grad-requiring tensor.

    Each call propagates its own contribution, so calling twice without
    clearing grads doubles them. loss must be a scalar recorded on tape.
    """
    if loss.data.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for out, inputs, rule in reversed(tape._ops):
        g = grads.get(id(out))
        if g is None:
            continue
        for t, contrib in zip(inputs, rule(g)):
            if contrib is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
                holders[key] = t
    for key, t in holders.items():
        if t.requires_grad:
            # copy: rules may hand the same array to several inputs
            t.grad = grads[key].copy() if t.grad is None else t.grad + grads[key]


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b):
    if a.data.shape != b.data.shape:
        raise TensorError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _out(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if a.data.shape != b.data.shape:
        raise TensorError(f"sub shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _out(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    if a.data.shape != b.data.shape:
        raise TensorError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _out(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    if a.data.shape != b.data.shape:
        raise TensorError(f"div shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data / b.data
    return _out(out_data, (a, b), lambda g: (g / b.data, -g * out_data / b.data))


def scale(x, s):
    s = float(s)
    return _out(x.data * s, (x,), lambda g: (g * s,))


def add_const(x, c):
    c = np.asarray(c, dtype=np.float64)
    return _out(x.data + c, (x,), lambda g: (g,))


def mul_const(x, c):
    """Elementwise product with a constant array (no grad through c)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != x.data.shape:
        raise TensorError(f"mul_const shape mismatch: {x.data.shape} vs {c.shape}")
    return _out(x.data * c, (x,), lambda g: (g * c,))


def log(x):
    return _out(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x):
    mask = x.data > 0  # subgradient at 0 is 0
    return _out(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sum_all(x):
    shp = x.data.shape
    return _out(x.data.sum(), (x,), lambda g: (np.full(shp, float(g)),))


def sum_axes(x, axes):
    axes = tuple(axes)
    shp = x.data.shape
    keep = tuple(1 if i in axes else n for i, n in enumerate(shp))

    def rule(g):
        return (np.broadcast_to(g.reshape(keep), shp).copy(),)

    return _out(x.data.sum(axis=axes), (x,), rule)


def softmax_channels(logits):
    """Per-pixel softmax over the channel axis of an [N,C,H,W] tensor.

    Numerically stabilised by max-subtraction; each pixel's channel
    vector sums to 1.
    """
    if logits.data.ndim != 4 or logits.data.shape[1] < 2:
        raise TensorError(f"softmax_channels expects [N,C>=2,H,W], got {logits.data.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _out(p, (logits,), rule)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, kernel, bias):
    """3x3 stride-1 zero-padding-1 cross-correlation plus per-channel bias.

    x: [N,Cin,H,W], kernel: [Cout,Cin,3,3], bias: [Cout]. Output keeps the
    input's spatial size and is differentiable w.r.t. all three arguments.
    """
    if kernel.data.ndim != 4 or kernel.data.shape[2:] != (3, 3):
        raise TensorError(f"kernel must be [Cout,Cin,3,3], got {kernel.data.shape}")
    if x.data.ndim != 4:
        raise TensorError(f"conv2d input must be [N,Cin,H,W], got {x.data.shape}")
    if x.data.shape[1] != kernel.data.shape[1]:
        raise TensorError(
            f"conv2d channel mismatch: input {x.data.shape} vs kernel {kernel.data.shape}"
        )
    if bias.data.shape != (kernel.data.shape[0],):
        raise TensorError(f"bias must be [Cout], got {bias.data.shape}")

    n, cin, h, w = x.data.shape
    cout = kernel.data.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # [N,Cin,H,W,3,3]
    # one contiguous im2col buffer, shared by the forward GEMM and both
    # gradient GEMMs in the backward rule
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * h * w, cin * 9
    )
    wmat = kernel.data.reshape(cout, cin * 9)
    out = cols @ wmat.T  # [NHW, Cout]
    out_data = np.moveaxis(out.reshape(n, h, w, cout), 3, 1) + bias.data[
        None, :, None, None
    ]

    def rule(g):
        dx = dk = db = None
        gmat = g.transpose(0, 2, 3, 1).reshape(n * h * w, cout)
        if bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        if kernel.requires_grad:
            dk = (gmat.T @ cols).reshape(cout, cin, 3, 3)
        if x.requires_grad:
            dwin = (gmat @ wmat).reshape(n, h, w, cin, 3, 3)
            dxp = np.zeros((n, cin, h + 2, w + 2))
            for u in range(3):
                for v in range(3):
                    dxp[:, :, u : u + h, v : v + w] += dwin[:, :, :, :, u, v].transpose(
                        0, 3, 1, 2
                    )
            dx = dxp[:, :, 1 : h + 1, 1 : w + 1]
        return (dx, dk, db)

    return _out(out_data, (x, kernel, bias), rule)
