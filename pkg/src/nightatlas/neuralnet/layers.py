"""Forward/backward kernels for the layer kinds used by the classifier.

Activations are ``(batch, channels, height, width)``; dense activations are
``(batch, units)``. Convolution is cross-correlation.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {k} with pad {pad} does not fit a {h}x{w} input")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (n, c, ho, wo, k, k) -> (n*ho*wo, c*k*k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    n, c = x.shape[:2]
    f, cw, k, k2 = weights.shape
    if c != cw or k != k2:
        raise ShapeError(f"input has {c} channels, kernel expects {cw}")
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = cols @ weights.reshape(f, -1).T + bias
    return out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)


def conv2d_backward(
    x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray, stride: int = 1, pad: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    f, _, k, _ = weights.shape
    cols, ho, wo = _im2col(x, k, stride, pad)
    if grad_out.shape != (n, f, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, f, ho, wo)}")
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    grad_w = (g.T @ cols).reshape(weights.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    gcols = (g @ weights.reshape(f, -1)).reshape(n, ho, wo, c, k, k)
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
    for i in range(k):
        for j in range(k):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return gx, grad_w, grad_b


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense input has {x.shape[1]} features, weights expect {weights.shape[0]}")
    return x @ weights + bias


def dense_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray):
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def flatten_forward(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def flatten_backward(x_shape: tuple, grad_out: np.ndarray) -> np.ndarray:
    return grad_out.reshape(x_shape)


def dropout_mask(shape: tuple, rate: float, seed) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else ``1/(1-rate)``."""
    keep = np.random.default_rng(seed).random(shape) >= rate
    return keep / (1.0 - rate)


def dropout_forward(x: np.ndarray, rate: float, train: bool, seed=0) -> tuple[np.ndarray, np.ndarray | None]:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if not train or rate == 0.0:
        return x, None
    mask = dropout_mask(x.shape, rate, seed).astype(x.dtype)
    return x * mask, mask


def dropout_backward(mask: np.ndarray | None, grad_out: np.ndarray) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise ValueError(f"labels must be {n} indices in [0, {classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n
