"""Dense float64 numerics shared by every cell and model.

Conventions used throughout the package:

* all arithmetic is double precision (gradient checks at 1e-5 step sizes
  are hopeless in float32),
* states are column vectors, so a batch of B states of size H is an
  (H, B) array and the single-sample case is simply B == 1,
* 1-D convolutions treat signals as (channels, length), optionally with a
  trailing batch axis, and zero-pad so the output length equals the input
  length.
"""

from __future__ import annotations

from enum import Enum

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigError(ValueError):
    """A structural parameter is outside its allowed range."""


class Activation(Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"
    LINEAR = "linear"


def as_matrix(values) -> np.ndarray:
    """Coerce to a float64 2-D array; 1-D input becomes a column vector."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1 if a.ndim > 1 else 0] != b.shape[0] or a.ndim != 2:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise product needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def concat_rows(h: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Stack h on top of x. h may have zero rows (neutral element)."""
    if h.shape[1] != x.shape[1]:
        raise ShapeError(f"column mismatch stacking {h.shape} on {x.shape}")
    return np.concatenate([h, x], axis=0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def apply_activation(kind: Activation, m: np.ndarray) -> np.ndarray:
    """Elementwise nonlinearity. LINEAR returns the input object unchanged."""
    if kind is Activation.SIGMOID:
        return sigmoid(m)
    if kind is Activation.TANH:
        return np.tanh(m)
    if kind is Activation.RELU:
        return relu(m)
    if kind is Activation.LINEAR:
        return m
    raise ConfigError(f"unknown activation {kind!r}")


def activation_grad(kind: Activation, pre_activation: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the activation at the given pre-activation."""
    if kind is Activation.SIGMOID:
        s = sigmoid(pre_activation)
        return s * (1.0 - s)
    if kind is Activation.TANH:
        t = np.tanh(pre_activation)
        return 1.0 - t * t
    if kind is Activation.RELU:
        return (pre_activation > 0.0).astype(np.float64)
    if kind is Activation.LINEAR:
        return np.ones_like(pre_activation)
    raise ConfigError(f"unknown activation {kind!r}")


def pad_for_same_conv(sig: np.ndarray, taps: int) -> np.ndarray:
    """Zero-pad a (channels, length, batch) signal along length for taps."""
    channels, length, batch = sig.shape
    pad = taps // 2
    padded = np.zeros((channels, length + taps - 1, batch))
    padded[:, pad:pad + length, :] = sig
    return padded


def tap_windows(padded: np.ndarray, taps: int, length: int) -> np.ndarray:
    """Strided (channels, taps, length, batch) view of a padded signal."""
    channels, _, batch = padded.shape
    s0, s1, s2 = padded.strides
    return np.lib.stride_tricks.as_strided(
        padded, shape=(channels, taps, length, batch), strides=(s0, s1, s1, s2), writeable=False
    )


def conv_output(kernels: np.ndarray, windows: np.ndarray, biases: np.ndarray) -> np.ndarray:
    """Apply a (filters, channels, taps) bank to tap windows: one GEMM."""
    out = np.tensordot(kernels, windows, axes=([1, 2], [0, 1]))
    out += biases[:, :, None]
    return out


def conv_kernel_grad(grad: np.ndarray, windows: np.ndarray) -> np.ndarray:
    """d/d kernels of conv_output for an upstream (filters, length, batch) grad."""
    return np.tensordot(grad, windows, axes=([1, 2], [2, 3]))


def add_signal_grad(kernels: np.ndarray, grad: np.ndarray, d_padded: np.ndarray) -> None:
    """Accumulate d/d padded-signal of conv_output into d_padded in place."""
    length = grad.shape[1]
    for k in range(kernels.shape[2]):
        d_padded[:, k:k + length, :] += np.tensordot(kernels[:, :, k], grad, axes=(0, 0))


def _check_bank_shapes(signal: np.ndarray, kernels: np.ndarray) -> None:
    filters, in_channels, taps = kernels.shape
    if taps % 2 == 0:
        raise ConfigError(f"kernel length must be odd, got {taps}")
    if in_channels != signal.shape[0]:
        raise ShapeError(
            f"kernel expects {in_channels} channels, signal has {signal.shape[0]} "
            f"(kernels {kernels.shape}, signal {signal.shape})"
        )


def conv1d_same(signal: np.ndarray, kernel: np.ndarray, bias: float) -> np.ndarray:
    """Cross-correlate one kernel with a (channels, length) signal.

    Zero padding keeps the output length equal to the input length; the
    result sums over input channels, giving a (1, length) array.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2:
        raise ShapeError(f"kernel must be (channels, taps), got shape {kernel.shape}")
    return conv1d_bank(signal, kernel[None, :, :], np.array([[float(bias)]]))


def conv1d_bank(signal: np.ndarray, kernels: np.ndarray, biases: np.ndarray) -> np.ndarray:
    """Cross-correlate a bank of kernels with a signal.

    signal:  (channels, length) or (channels, length, batch)
    kernels: (filters, channels, taps), taps odd
    biases:  (filters, 1)
    returns  (filters, length) or (filters, length, batch)
    """
    single = signal.ndim == 2
    sig = signal[:, :, None] if single else signal
    if sig.ndim != 3:
        raise ShapeError(f"signal must be 2-D or 3-D, got shape {signal.shape}")
    _check_bank_shapes(sig, kernels)
    taps = kernels.shape[2]
    length = sig.shape[1]
    windows = tap_windows(pad_for_same_conv(sig, taps), taps, length)
    out = conv_output(kernels, windows, biases)
    return out[:, :, 0] if single else out


def conv1d_bank_backward(
    grad_out: np.ndarray, signal: np.ndarray, kernels: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv1d_bank w.r.t. kernels, biases and the signal."""
    single = signal.ndim == 2
    sig = signal[:, :, None] if single else signal
    g = grad_out[:, :, None] if single else grad_out
    length = sig.shape[1]
    taps = kernels.shape[2]
    pad = taps // 2
    padded = pad_for_same_conv(sig, taps)
    windows = tap_windows(padded, taps, length)

    d_kernels = conv_kernel_grad(g, windows)
    d_biases = g.sum(axis=(1, 2)).reshape(kernels.shape[0], 1)
    d_padded = np.zeros_like(padded)
    add_signal_grad(kernels, g, d_padded)
    d_signal = d_padded[:, pad:pad + length, :]
    if single:
        d_signal = d_signal[:, :, 0]
    return d_kernels, d_biases, d_signal
