"""Dense NCHW tensor primitives (forward direction).

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channels, height, width). Every op keeps the dtype of its input:
float32 is the working precision, float64 is used for oracle checks.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError

DEFAULT_DTYPE = np.float32


class MacTally:
    def __init__(self):
        self.count = 0


class MacCounter:
    """Dispatches multiply-add counts to every active :func:`count_macs` tally."""

    def __init__(self):
        self.active = []

    def add(self, n):
        for tally in self.active:
            tally.count += int(n)


mac_counter = MacCounter()


@contextlib.contextmanager
def count_macs():
    """Count multiply-adds performed inside the ``with`` body.

    >>> with count_macs() as c:
    ...     _ = relu(np.zeros((1, 1, 2, 2)))
    >>> c.count
    0
    """
    tally = MacTally()
    mac_counter.active.append(tally)
    try:
        yield tally
    finally:
        mac_counter.active.remove(tally)


def as_tensor(data, dtype=DEFAULT_DTYPE) -> np.ndarray:
    x = np.asarray(data, dtype=dtype)
    check_nchw(x)
    return x


def check_nchw(x, name="input"):
    if x.ndim != 4:
        raise DimensionError(f"{name} must be rank 4 (N,C,H,W), got rank {x.ndim}", axis="rank")
    for axis, size in zip("NCHW", x.shape):
        if size < 1:
            raise DimensionError(f"{name} axis {axis} must be >= 1, got {size}", axis=axis)


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        n = len(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if len(getattr(self, name)) != n:
                raise DimensionError(f"batch-norm {name} has length {len(getattr(self, name))}, expected {n}",
                                     axis="C")
        if self.eps < 0:
            raise ValidationError("batch-norm epsilon must be non-negative")

    @property
    def channels(self):
        return len(self.gamma)

    @classmethod
    def identity(cls, channels, dtype=DEFAULT_DTYPE, eps=1e-5):
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), eps)

    def scale_shift(self):
        """Per-channel (scale, shift) such that bn(x) == scale * x + shift."""
        std = np.sqrt(self.running_var + self.eps)
        scale = self.gamma / std
        return scale, self.beta - self.running_mean * scale

    def copy(self):
        return BatchNormParams(self.gamma.copy(), self.beta.copy(), self.running_mean.copy(),
                               self.running_var.copy(), self.eps)


def conv_output_size(size, k, stride, padding):
    span = size + 2 * padding - k
    if span < 0:
        return 0
    return span // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation with zero padding.

    The loop nest runs over kernel taps in row-major order; each tap adds a
    (Cout x Cin) matrix product over all output positions. For fixed inputs
    the summation order is fixed, so results are reproducible bit for bit.
    """
    check_nchw(x)
    if weight.ndim != 4:
        raise DimensionError("kernel must be rank 4 (Cout,Cin,kh,kw)", axis="rank")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise DimensionError(f"input has {c} channels, kernel expects {cin}", axis="C")
    if stride < 1 or padding < 0:
        raise ValidationError("stride must be >= 1 and padding >= 0")
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho < 1:
        raise DimensionError(f"output height would be {ho}", axis="H")
    if wo < 1:
        raise DimensionError(f"output width would be {wo}", axis="W")
    if bias is not None and len(bias) != cout:
        raise DimensionError(f"bias length {len(bias)} != Cout {cout}", axis="Cout")

    xc = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
    if padding:
        xc = np.pad(xc, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((cout, n * ho * wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xc[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out += weight[:, :, i, j].astype(x.dtype, copy=False) @ patch.reshape(cin, -1)
    if bias is not None:
        out += np.asarray(bias, dtype=x.dtype)[:, None]
    mac_counter.add(n * cout * ho * wo * cin * kh * kw)
    return np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))


def relu(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def batchnorm_infer(x, bn: BatchNormParams):
    check_nchw(x)
    if bn.channels != x.shape[1]:
        raise DimensionError(f"batch-norm has {bn.channels} channels, input has {x.shape[1]}", axis="C")
    std = np.sqrt(bn.running_var.astype(x.dtype) + x.dtype.type(bn.eps))
    mean = bn.running_mean.astype(x.dtype)[None, :, None, None]
    gamma = bn.gamma.astype(x.dtype)[None, :, None, None]
    beta = bn.beta.astype(x.dtype)[None, :, None, None]
    mac_counter.add(x.size)
    return gamma * ((x - mean) / std[None, :, None, None]) + beta


def global_avg_pool(x):
    check_nchw(x)
    return x.mean(axis=(2, 3), keepdims=True)


def dense(x, weight, bias):
    """``y = x @ W.T + b`` for ``x`` of shape (N, F) and ``W`` of shape (K, F)."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError("dense input must be (N, F)", axis="rank")
    k, f = weight.shape
    if x.shape[1] != f:
        raise DimensionError(f"dense input has {x.shape[1]} features, weights expect {f}", axis="F")
    if len(bias) != k:
        raise DimensionError(f"bias length {len(bias)} != {k}", axis="K")
    mac_counter.add(x.shape[0] * k * f)
    return x @ weight.T.astype(x.dtype, copy=False) + bias.astype(x.dtype, copy=False)


def softmax(logits):
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def resize_bilinear(x, out_h, out_w):
    """Bilinear resize with the align-corners convention (corners map exactly)."""
    check_nchw(x)
    if out_h < 1 or out_w < 1:
        raise ValidationError("output size must be >= 1")
    _, _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()

    def axis_weights(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(np.intp), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(x.dtype)

    y0, y1, fy = axis_weights(h, out_h)
    x0, x1, fx = axis_weights(w, out_w)
    top = x[:, :, y0, :] * (1 - fy)[:, None] + x[:, :, y1, :] * fy[:, None]
    return top[..., x0] * (1 - fx) + top[..., x1] * fx

