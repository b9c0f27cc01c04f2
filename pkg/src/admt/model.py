"""The small fully-convolutional segmenter and its parameter machinery.

Architecture is fixed: conv3x3(Cin->16)+relu, conv3x3(16->16)+relu,
conv3x3(16->16)+relu, conv3x3(16->C). All convs are stride-1
zero-padding-1, so spatial size is preserved for any H,W >= 1.

Parameters live in a single flat float64 vector; the layout is, per
layer in order, the row-major kernel followed by the bias. The same
(Cin, C) always yields the same layout, so student and teacher vectors
are interchangeable element-wise.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor, TensorError, conv2d, relu

HIDDEN = 16

CHECKPOINT_MAGIC = b"ADMT"
CHECKPOINT_VERSION = 1


class LayoutError(ValueError):
    """Parameter vectors disagree on layout."""


class SegModel:
    """4-layer stride-1 FCN pixel classifier; holds layout, not weights."""

    def __init__(self, in_channels, num_classes):
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.channels = [
            (in_channels, HIDDEN),
            (HIDDEN, HIDDEN),
            (HIDDEN, HIDDEN),
            (HIDDEN, num_classes),
        ]
        # (offset, kernel_shape, bias_len) per layer
        self._slots = []
        off = 0
        for cin, cout in self.channels:
            kshape = (cout, cin, 3, 3)
            ksize = cout * cin * 9
            self._slots.append((off, kshape, cout))
            off += ksize + cout
        self.param_count = off

    def init_params(self, rng):
        """He-uniform fan-in kernels, zero biases."""
        params = np.zeros(self.param_count)
        for off, kshape, blen in self._slots:
            cin9 = kshape[1] * 9
            limit = np.sqrt(6.0 / cin9)
            ksize = kshape[0] * cin9
            params[off : off + ksize] = rng.uniform(-limit, limit, ksize)
            # biases stay zero
        return params

    def unflatten(self, params):
        """Views into the flat vector: [(kernel[Cout,Cin,3,3], bias[Cout]), ...]."""
        if params.shape != (self.param_count,):
            raise LayoutError(
                f"expected {self.param_count} parameters, got {params.shape}"
            )
        parts = []
        for off, kshape, blen in self._slots:
            ksize = kshape[0] * kshape[1] * 9
            kernel = params[off : off + ksize].reshape(kshape)
            bias = params[off + ksize : off + ksize + blen]
            parts.append((kernel, bias))
        return parts

    def flatten(self, parts):
        """Inverse of unflatten; exact round-trip."""
        return np.concatenate([a.ravel() for pair in parts for a in pair])

    def bind(self, params, requires_grad=False):
        """Wrap each layer's kernel/bias as Tensors for a forward pass."""
        return [
            (Tensor(k, requires_grad=requires_grad), Tensor(b, requires_grad=requires_grad))
            for k, b in self.unflatten(params)
        ]

    def forward_bound(self, tensors, image):
        """Run the conv stack on already-bound parameter tensors."""
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.data.ndim != 4 or x.data.shape[1] != self.in_channels:
            raise TensorError(
                f"expected image [N,{self.in_channels},H,W], got {x.data.shape}"
            )
        n_layers = len(tensors)
        for i, (k, b) in enumerate(tensors):
            x = conv2d(x, k, b)
            if i < n_layers - 1:
                x = relu(x)
        return x

    def forward(self, params, image):
        """Inference-only forward: logits [N,C,H,W], nothing recorded."""
        return self.forward_bound(self.bind(params), image)

    def grad_vector(self, tensors):
        """Collect .grad of bound tensors into a flat vector (zeros where absent)."""
        out = np.zeros(self.param_count)
        for (off, kshape, blen), (k, b) in zip(self._slots, tensors):
            ksize = kshape[0] * kshape[1] * 9
            if k.grad is not None:
                out[off : off + ksize] = k.grad.ravel()
            if b.grad is not None:
                out[off + ksize : off + ksize + blen] = b.grad
        return out


def ema_update(teacher, student, decay):
    """teacher' = decay * teacher + (1 - decay) * student, element-wise."""
    if teacher.shape != student.shape:
        raise LayoutError(f"layout mismatch: {teacher.shape} vs {student.shape}")
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must be in [0,1], got {decay}")
    return decay * teacher + (1.0 - decay) * student


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """In-place SGD with momentum and decoupled-from-nothing weight decay.

    v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v.
    Weight decay hits kernels and biases alike.
    """
    if params.shape != grads.shape or params.shape != velocity.shape:
        raise LayoutError(
            f"layout mismatch: params {params.shape}, grads {grads.shape}, "
            f"velocity {velocity.shape}"
        )
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if not np.all(np.isfinite(grads)):
        raise TensorError("non-finite gradient, aborting optimizer step")
    velocity *= momentum
    velocity += grads + weight_decay * params
    params -= lr * velocity
    if not np.all(np.isfinite(params)):
        raise TensorError("non-finite parameters after optimizer step")


def poly_lr(iteration, max_iters, base_lr):
    """Polynomial decay: base_lr * (1 - iter/max_iter)^0.9."""
    if not 0 <= iteration <= max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {max_iters}]")
    return base_lr * (1.0 - iteration / max_iters) ** 0.9


def save_checkpoint(path, params):
    """Flat little-endian float64 dump behind a 16-byte header."""
    header = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, params.size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(params, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<IQ", header[4:])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        data = np.frombuffer(fh.read(count * 8), dtype="<f8")
        if data.size != count:
            raise ValueError(f"{path}: truncated checkpoint")
    return data.astype(np.float64)
