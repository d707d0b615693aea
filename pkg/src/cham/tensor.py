"""Dense rank-3 tensor primitives.

A feature map is a plain ``numpy.ndarray`` of shape ``(height, width,
channels)`` in C (row-major) order. Kernels are stored as
``(kh, kw, in_channels, out_channels)``. Convolution is cross-correlation
with zero padding so the spatial size is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np


def as_tensor3(x, name: str = "tensor") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3 or min(x.shape) < 1:
        raise ValueError(f"{name} must have shape (height, width, channels), got {x.shape}")
    return x


@dataclass
class ConvKernel:
    weights: np.ndarray  # (kh, kw, in_channels, out_channels)
    bias: Optional[np.ndarray] = None  # (out_channels,)

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 4:
            raise ValueError(f"kernel weights must be rank 4 (kh, kw, in, out), got {w.shape}")
        kh, kw = w.shape[:2]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel height/width must be odd, got {kh}x{kw}")
        if self.bias is not None and np.shape(self.bias) != (w.shape[3],):
            raise ValueError(
                f"bias shape {np.shape(self.bias)} does not match out_channels {w.shape[3]}"
            )
        self.weights = w

    @property
    def kh(self) -> int:
        return self.weights.shape[0]

    @property
    def kw(self) -> int:
        return self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]


def _check_conv(x: np.ndarray, kernel: ConvKernel) -> None:
    x = as_tensor3(x, "input")
    if x.shape[2] != kernel.in_channels:
        raise ValueError(
            f"input shape {x.shape} incompatible with kernel shape {kernel.weights.shape}: "
            f"channels {x.shape[2]} != in_channels {kernel.in_channels}"
        )


@lru_cache(maxsize=64)
def _patch_index(h: int, w: int, kh: int, kw: int) -> np.ndarray:
    """Flat indices into the padded (H+kh-1, W+kw-1) grid, ordered (i, j, a, b)."""
    pw = w + kw - 1
    i, j, a, b = np.meshgrid(np.arange(h), np.arange(w), np.arange(kh), np.arange(kw),
                             indexing="ij")
    return ((i + a) * pw + (j + b)).reshape(-1)


def _pad(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    h, w, c = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    padded = np.zeros((h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
    padded[ph:ph + h, pw:pw + w] = x
    return padded


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Zero-padded patches as a ``(H*W, kh*kw*C)`` matrix, columns ordered (kh, kw, C)."""
    h, w, c = x.shape
    if kh == 1 and kw == 1:
        return x.reshape(h * w, c)
    flat = _pad(x, kh, kw).reshape(-1, c)
    return flat[_patch_index(h, w, kh, kw)].reshape(h * w, kh * kw * c)


def col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back onto the grid."""
    h, w, c = shape
    if kh == 1 and kw == 1:
        return cols.reshape(h, w, c)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    patches = cols.reshape(h, w, kh, kw, c)
    padded = np.zeros((h + 2 * ph, w + 2 * pw, c), dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            padded[a:a + h, b:b + w] += patches[:, :, a, b]
    return padded[ph:ph + h, pw:pw + w]


def conv2d_same(x: np.ndarray, kernel: ConvKernel, add_bias: bool = True) -> np.ndarray:
    _check_conv(x, kernel)
    h, w, _ = x.shape
    cols = im2col(x, kernel.kh, kernel.kw)
    out = cols @ kernel.weights.reshape(-1, kernel.out_channels)
    if add_bias and kernel.bias is not None:
        out = out + kernel.bias
    return out.reshape(h, w, kernel.out_channels)


def conv2d_backward(x: np.ndarray, kernel: ConvKernel, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d_same`."""
    _check_conv(x, kernel)
    h, w, _ = x.shape
    grad_out = as_tensor3(grad_out, "grad_out")
    if grad_out.shape != (h, w, kernel.out_channels):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(h, w, kernel.out_channels)}"
        )
    g = grad_out.reshape(h * w, kernel.out_channels)
    cols = im2col(x, kernel.kh, kernel.kw)
    wmat = kernel.weights.reshape(-1, kernel.out_channels)
    grad_w = (cols.T @ g).reshape(kernel.weights.shape)
    grad_in = col2im(g @ wmat.T, x.shape, kernel.kh, kernel.kw)
    grad_b = g.sum(axis=0)
    return grad_in, grad_w, grad_b


def sigmoid(x: np.ndarray) -> np.ndarray:
    # logaddexp form never overflows and keeps precision in both tails
    return np.exp(-np.logaddexp(0, -np.asarray(x)))


def activation(t: np.ndarray, kind: str) -> np.ndarray:
    if kind == "sigmoid":
        return sigmoid(t)
    if kind == "tanh":
        return np.tanh(t)
    raise ValueError(f"unknown activation {kind!r}; expected 'sigmoid' or 'tanh'")


def activation_grad(y: np.ndarray, kind: str) -> np.ndarray:
    """Derivative expressed through the activation's output ``y``."""
    if kind == "sigmoid":
        return y * (1 - y)
    if kind == "tanh":
        return 1 - y * y
    raise ValueError(f"unknown activation {kind!r}; expected 'sigmoid' or 'tanh'")


def softmax_grid(logits: np.ndarray) -> np.ndarray:
    """Softmax jointly over every spatial position of a single-channel map."""
    logits = as_tensor3(logits, "logits")
    if logits.shape[2] != 1:
        raise ValueError(f"softmax_grid expects 1 channel, got shape {logits.shape}")
    e = np.exp(logits - logits.max())
    return e / e.sum()


def softmax_grid_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    return probs * (grad_probs - np.sum(probs * grad_probs))


def broadcast_mul(weight_map: np.ndarray, features: np.ndarray) -> np.ndarray:
    weight_map = as_tensor3(weight_map, "map")
    features = as_tensor3(features, "features")
    if weight_map.shape[2] != 1:
        raise ValueError(f"map must have 1 channel, got shape {weight_map.shape}")
    if weight_map.shape[:2] != features.shape[:2]:
        raise ValueError(
            f"spatial mismatch: map {weight_map.shape} vs features {features.shape}"
        )
    return weight_map * features


def global_avg_pool(t: np.ndarray) -> np.ndarray:
    t = as_tensor3(t)
    return t.mean(axis=(0, 1))


def global_avg_pool_backward(grad: np.ndarray, shape: tuple) -> np.ndarray:
    h, w, c = shape
    return np.broadcast_to(grad / (h * w), shape).copy()
