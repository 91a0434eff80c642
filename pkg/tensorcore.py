"""
Dense tensor arithmetic with reverse-mode differentiation.

Every layer op takes an optional ``tape``. When a tape is given the op appends
an entry holding its inputs, its output and a backward closure; ``backward``
then walks the tape in reverse and accumulates gradients into ``Tensor.grad``.
Without a tape the op is a plain forward evaluation, which is what inference
uses.

Runtime buffers are 32-bit floats. Ops keep the dtype of their inputs, so the
same code runs in 64-bit for the finite-difference oracle.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DimensionError, InputError, UsageError

logger = logging.getLogger(__name__)

LAYER_KINDS = ("linear", "conv2d", "batchnorm", "relu", "maxpool2x2", "flatten")
PRUNABLE_KINDS = ("linear", "conv2d")
BATCHNORM_MODES = ("train", "eval", "frozen")

DEFAULT_MOMENTUM = 0.1
DEFAULT_EPSILON = 1e-5


class Tensor:
    """N-dimensional float buffer with an optional gradient of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=np.float32):
        self.data = np.require(np.array(data, dtype=dtype), requirements="C")
        self.grad = None

    @classmethod
    def wrap(cls, array):
        """Wrap an existing array without copying it."""
        tensor = cls.__new__(cls)
        tensor.data = np.require(array, requirements="C")
        tensor.grad = None
        return tensor

    @property
    def shape(self) -> List[int]:
        return list(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate(self, gradient):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += np.asarray(gradient, dtype=self.data.dtype).reshape(self.data.shape)

    def copy(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], None]


@dataclass
class Tape:
    """Ordered record of ops; recording order is a topological order."""

    entries: List[TapeEntry] = field(default_factory=list)

    def record(self, op, inputs, output, backward):
        self.entries.append(TapeEntry(op, tuple(inputs), output, backward))

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class LayerSpec:
    """
    One backbone layer.

    For ``conv2d`` and ``linear`` the feature counts are channels/units; for
    ``batchnorm`` ``in_features`` is the channel count.
    """

    kind: str
    name: str = ""
    in_features: int = 0
    out_features: int = 0
    kernel_size: int = 1
    stride: int = 1
    padding: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InputError(f"Unknown layer kind '{self.kind}', expected one of {LAYER_KINDS}")
        if self.kind == "conv2d":
            if self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
                raise DimensionError(
                    f"conv2d '{self.name}': kernel_size={self.kernel_size}, stride={self.stride}, "
                    f"padding={self.padding} (need kernel >= 1, stride >= 1, padding >= 0)"
                )
        if self.kind in PRUNABLE_KINDS and (self.in_features < 1 or self.out_features < 1):
            raise DimensionError(
                f"{self.kind} '{self.name}' needs positive feature counts, "
                f"got in={self.in_features}, out={self.out_features}"
            )
        if self.kind == "batchnorm" and self.in_features < 1:
            raise DimensionError(f"batchnorm '{self.name}' has zero channel count")

    @property
    def prunable(self) -> bool:
        return self.kind in PRUNABLE_KINDS

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind == "conv2d":
            return (self.out_features, self.in_features, self.kernel_size, self.kernel_size)
        if self.kind == "linear":
            return (self.out_features, self.in_features)
        return ()

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


def _check_tensor(name, tensor, ndim):
    if tensor.data.ndim != ndim:
        raise DimensionError(f"{name} expects a {ndim}-d tensor, got shape {tensor.shape}")


def mask_weights(weight: Tensor, mask, tape: Optional[Tape] = None) -> Tensor:
    """Return ``weight`` with entries where ``mask`` is 0 replaced by exact zeros."""
    mask = np.asarray(mask, dtype=bool)
    if mask.size != weight.size:
        raise DimensionError(f"mask of {mask.size} entries does not match weight shape {weight.shape}")
    mask = mask.reshape(weight.data.shape)
    out = Tensor.wrap(np.where(mask, weight.data, weight.data.dtype.type(0)))

    if tape is not None:
        def _backward(grad):
            weight.accumulate(np.where(mask, grad, 0))
        tape.record("mask", (weight,), out, _backward)
    return out


def linear_forward(x: Tensor, W: Tensor, b: Optional[Tensor] = None, tape: Optional[Tape] = None) -> Tensor:
    """y[n, o] = sum_i x[n, i] * W[o, i] + b[o]"""
    _check_tensor("linear input", x, 2)
    _check_tensor("linear weight", W, 2)
    if x.shape[1] != W.shape[1]:
        raise DimensionError(f"linear: input shape {x.shape} does not match weight shape {W.shape}")
    if b is not None and b.shape != [W.shape[0]]:
        raise DimensionError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")

    y = x.data @ W.data.T
    if b is not None:
        y = y + b.data
    out = Tensor.wrap(y)

    if tape is not None:
        def _backward(grad):
            x.accumulate(grad @ W.data)
            W.accumulate(grad.T @ x.data)
            if b is not None:
                b.accumulate(grad.sum(axis=0))
        tape.record("linear", (x, W) if b is None else (x, W, b), out, _backward)
    return out


def conv_output_size(size, kernel, stride, pad):
    span = size + 2 * pad - kernel
    if span < 0 or span % stride != 0:
        raise DimensionError(
            f"conv2d: ({size} + 2*{pad} - {kernel}) / {stride} + 1 is not a positive integer"
        )
    return span // stride + 1


def conv2d_forward(x: Tensor, K: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0,
                   tape: Optional[Tape] = None) -> Tensor:
    """Cross-correlation of a [B, C, H, W] batch with [F, C, k, k] kernels."""
    _check_tensor("conv2d input", x, 4)
    _check_tensor("conv2d kernel", K, 4)
    batch, channels, height, width = x.shape
    filters, kernel_channels, k, k2 = K.shape
    if kernel_channels != channels or k != k2:
        raise DimensionError(f"conv2d: input shape {x.shape} does not match kernel shape {K.shape}")
    if b is not None and b.shape != [filters]:
        raise DimensionError(f"conv2d: bias shape {b.shape} does not match kernel shape {K.shape}")
    out_h = conv_output_size(height, k, stride, pad)
    out_w = conv_output_size(width, k, stride, pad)

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    y = np.tensordot(windows, K.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b.data[None, :, None, None]
    out = Tensor.wrap(y)

    if tape is not None:
        def _backward(grad):
            K.accumulate(np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3])))
            if b is not None:
                b.accumulate(grad.sum(axis=(0, 2, 3)))
            grad_windows = np.tensordot(grad, K.data, axes=([1], [0]))
            grad_padded = np.zeros_like(padded)
            row_end = stride * (out_h - 1) + 1
            col_end = stride * (out_w - 1) + 1
            for i in range(k):
                for j in range(k):
                    grad_padded[:, :, i:i + row_end:stride, j:j + col_end:stride] += (
                        grad_windows[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            x.accumulate(grad_padded[:, :, pad:pad + height, pad:pad + width])
        tape.record("conv2d", (x, K) if b is None else (x, K, b), out, _backward)
    return out


def batchnorm_forward(x: Tensor, gain: Tensor, bias: Tensor, running_mean: np.ndarray,
                      running_var: np.ndarray, mode: str = "train", momentum: float = DEFAULT_MOMENTUM,
                      epsilon: float = DEFAULT_EPSILON, tape: Optional[Tape] = None) -> Tensor:
    """
    Per-channel batch normalization over axis 1 of a 2-d or 4-d batch.

    ``train`` normalizes by batch statistics and updates the running buffers
    in place; ``eval`` and ``frozen`` normalize by the running buffers and
    leave them untouched.
    """
    if mode not in BATCHNORM_MODES:
        raise InputError(f"batchnorm mode '{mode}' not in {BATCHNORM_MODES}")
    if x.data.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects a 2-d or 4-d input, got shape {x.shape}")
    channels = x.shape[1]
    if channels == 0:
        raise DimensionError("batchnorm: zero channel count")
    for name, buffer in (("gain", gain.data), ("bias", bias.data),
                         ("running_mean", running_mean), ("running_var", running_var)):
        if buffer.size != channels:
            raise DimensionError(f"batchnorm: {name} has {buffer.size} entries for {channels} channels")

    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    view = (1, channels) if x.data.ndim == 2 else (1, channels, 1, 1)
    dtype = x.data.dtype
    eps = dtype.type(epsilon)

    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.size // channels
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running_mean *= (1 - momentum)
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= (1 - momentum)
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mean = running_mean.astype(dtype)
        var = running_var.astype(dtype)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)
    x_hat = (x.data - mean.reshape(view)) * inv_std.reshape(view)
    out = Tensor.wrap(gain.data.reshape(view) * x_hat + bias.data.reshape(view))

    if tape is not None:
        def _backward(grad):
            gain.accumulate((grad * x_hat).sum(axis=axes))
            bias.accumulate(grad.sum(axis=axes))
            grad_hat = grad * gain.data.reshape(view)
            if mode == "train":
                count = x.data.size // channels
                sum_grad = grad_hat.sum(axis=axes).reshape(view)
                sum_grad_hat = (grad_hat * x_hat).sum(axis=axes).reshape(view)
                x.accumulate(inv_std.reshape(view) / count
                             * (count * grad_hat - sum_grad - x_hat * sum_grad_hat))
            else:
                x.accumulate(grad_hat * inv_std.reshape(view))
        tape.record("batchnorm", (x, gain, bias), out, _backward)
    return out


def relu(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    out = Tensor.wrap(np.maximum(x.data, x.data.dtype.type(0)))
    if tape is not None:
        def _backward(grad):
            x.accumulate(grad * (x.data > 0))
        tape.record("relu", (x,), out, _backward)
    return out


def maxpool2x2(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    _check_tensor("maxpool2x2 input", x, 4)
    batch, channels, height, width = x.shape
    if height % 2 or width % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got shape {x.shape}")
    blocks = (x.data.reshape(batch, channels, height // 2, 2, width // 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(batch, channels, height // 2, width // 2, 4))
    winners = blocks.argmax(axis=-1)
    out = Tensor.wrap(np.take_along_axis(blocks, winners[..., None], axis=-1)[..., 0])

    if tape is not None:
        def _backward(grad):
            routed = np.zeros_like(blocks)
            np.put_along_axis(routed, winners[..., None], grad[..., None], axis=-1)
            x.accumulate(routed.reshape(batch, channels, height // 2, width // 2, 2, 2)
                         .transpose(0, 1, 2, 4, 3, 5)
                         .reshape(batch, channels, height, width))
        tape.record("maxpool2x2", (x,), out, _backward)
    return out


def flatten(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    out = Tensor.wrap(x.data.reshape(x.shape[0], -1))
    if tape is not None:
        def _backward(grad):
            x.accumulate(grad.reshape(x.data.shape))
        tape.record("flatten", (x,), out, _backward)
    return out


def softmax_xent(logits: Tensor, labels, tape: Optional[Tape] = None) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    _check_tensor("softmax_xent logits", logits, 2)
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise DimensionError(f"softmax_xent: labels shape {list(labels.shape)} for logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InputError(f"softmax_xent: labels must lie in [0, {classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(batch), labels]
    out = Tensor.wrap(np.asarray((log_norm - picked).mean(), dtype=logits.data.dtype))

    if tape is not None:
        def _backward(grad):
            probs = np.exp(shifted - log_norm[:, None])
            probs[np.arange(batch), labels] -= 1
            logits.accumulate(probs * (grad / batch))
        tape.record("softmax_xent", (logits,), out, _backward)
    return out


def sum_all(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    out = Tensor.wrap(np.asarray(x.data.sum(), dtype=x.data.dtype))
    if tape is not None:
        def _backward(grad):
            x.accumulate(np.broadcast_to(grad, x.data.shape))
        tape.record("sum", (x,), out, _backward)
    return out


def mul(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = Tensor.wrap(a.data * b.data)
    if tape is not None:
        def _backward(grad):
            a.accumulate(grad * b.data)
            b.accumulate(grad * a.data)
        tape.record("mul", (a, b), out, _backward)
    return out


def backward(tape: Tape, loss: Tensor) -> List[Tensor]:
    """
    Populate ``grad`` on every tensor reachable from ``loss``.

    Returns the leaf tensors (those not produced by any recorded op) that
    received a gradient, in first-use order.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(entry.output) for entry in tape.entries}
    if id(loss) not in produced:
        raise UsageError("backward: loss was not recorded on this tape")

    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        if entry.output.grad is not None:
            entry.backward(entry.output.grad)

    leaves, seen = [], set()
    for entry in tape.entries:
        for tensor in entry.inputs:
            if id(tensor) not in produced and id(tensor) not in seen and tensor.grad is not None:
                seen.add(id(tensor))
                leaves.append(tensor)
    return leaves


def sgd_masked_step(param: Tensor, grad, lr: float, update_mask):
    """param[i] -= lr * grad[i] where update_mask[i] is set; other entries are untouched."""
    mask = np.asarray(update_mask, dtype=bool)
    if mask.size != param.size:
        raise DimensionError(f"sgd_masked_step: mask of {mask.size} entries for parameter shape {param.shape}")
    if grad is None:
        return
    grad = grad.data if isinstance(grad, Tensor) else np.asarray(grad)
    if grad.size != param.size:
        raise DimensionError(f"sgd_masked_step: gradient of {grad.size} entries for parameter shape {param.shape}")
    step = param.data.dtype.type(lr) * grad.reshape(param.data.shape).astype(param.data.dtype)
    np.subtract(param.data, step, out=param.data, where=mask.reshape(param.data.shape))


def gradient_check(build_loss: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                   rng: Optional[np.random.Generator] = None, samples: int = 16,
                   floor: float = 1e-4) -> float:
    """
    Largest relative error between tape gradients and central differences.

    ``build_loss`` records a fresh forward pass and returns ``(tape, loss)``.
    Checks ``samples`` random entries of each parameter; intended for 64-bit
    parameters. ``floor`` bounds the denominator for near-zero gradients.
    """
    rng = rng or np.random.default_rng(0)
    for param in params:
        param.zero_grad()
    tape, loss = build_loss()
    backward(tape, loss)
    analytic = [param.grad.copy() for param in params]

    worst = 0.0
    for param, grad in zip(params, analytic):
        flat = param.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        for index in picks:
            original = flat[index]
            flat[index] = original + step
            plus = float(build_loss()[1].data)
            flat[index] = original - step
            minus = float(build_loss()[1].data)
            flat[index] = original
            numeric = (plus - minus) / (2 * step)
            exact = float(grad.reshape(-1)[index])
            scale = max(abs(numeric), abs(exact), floor)
            worst = max(worst, abs(numeric - exact) / scale)
    return worst
