"""Forward and backward kernels for the fixed layer set.

All activations use the (N, C, H, W) layout. Kernels are pure functions of
their arguments; layers in :mod:`matforge.nn.layers` hold the caches.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError


@dataclass(frozen=True)
class ConvParams:
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.out_channels < 1 or self.kernel_h < 1 or self.kernel_w < 1:
            raise ConfigurationError(f"non-positive conv dimension in {self}")
        if self.stride < 1:
            raise ConfigurationError(f"stride must be >= 1, got {self.stride}")
        if self.pad < 0:
            raise ConfigurationError(f"pad must be >= 0, got {self.pad}")
        if self.groups < 1 or self.out_channels % self.groups:
            raise ConfigurationError(
                f"out_channels={self.out_channels} not divisible by groups={self.groups}")

    def weight_shape(self, in_channels):
        if in_channels % self.groups:
            raise ConfigurationError(
                f"in_channels={in_channels} not divisible by groups={self.groups}")
        return (self.out_channels, in_channels // self.groups, self.kernel_h, self.kernel_w)

    def output_hw(self, h, w):
        hp, wp = h + 2 * self.pad, w + 2 * self.pad
        if hp < self.kernel_h or wp < self.kernel_w:
            raise ConfigurationError(
                f"input {h}x{w} (pad {self.pad}) smaller than kernel "
                f"{self.kernel_h}x{self.kernel_w}")
        return ((hp - self.kernel_h) // self.stride + 1,
                (wp - self.kernel_w) // self.stride + 1)


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(xp, kh, kw, stride, ho, wo):
    # (N, C, Ho, Wo, kh, kw) view; no copy until consumed by tensordot
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d_forward(x, weight, bias, params):
    """Grouped cross-correlation plus per-channel bias."""
    n, c, h, w = x.shape
    expected = params.weight_shape(c)
    if weight.shape != expected:
        raise ConfigurationError(
            f"weight shape {weight.shape} does not match input channels {c} "
            f"(expected {expected})")
    ho, wo = params.output_hw(h, w)
    g = params.groups
    cg, fg = c // g, params.out_channels // g
    win = _windows(_pad(x, params.pad), params.kernel_h, params.kernel_w, params.stride, ho, wo)
    out = np.empty((n, params.out_channels, ho, wo), dtype=np.result_type(x, weight))
    for gi in range(g):
        cols = win[:, gi * cg:(gi + 1) * cg]
        wg = weight[gi * fg:(gi + 1) * fg]
        res = np.tensordot(cols, wg, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, Fg
        out[:, gi * fg:(gi + 1) * fg] = res.transpose(0, 3, 1, 2)
    out += bias.reshape(1, -1, 1, 1)
    return out


def conv2d_backward(grad_out, x, weight, params):
    """Return ``(grad_in, grad_weight, grad_bias)`` for :func:`conv2d_forward`."""
    n, c, h, w = x.shape
    _, _, ho, wo = grad_out.shape
    g = params.groups
    cg, fg = c // g, params.out_channels // g
    kh, kw, s, p = params.kernel_h, params.kernel_w, params.stride, params.pad
    xp = _pad(x, p)
    win = _windows(xp, kh, kw, s, ho, wo)

    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_w = np.empty_like(weight)
    grad_xp = np.zeros_like(xp)
    for gi in range(g):
        dy = grad_out[:, gi * fg:(gi + 1) * fg]
        cols = win[:, gi * cg:(gi + 1) * cg]
        grad_w[gi * fg:(gi + 1) * fg] = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3]))
        dcols = np.tensordot(dy, weight[gi * fg:(gi + 1) * fg], axes=([1], [0]))
        # dcols: N, Ho, Wo, Cg, kh, kw -> scatter back onto the padded input
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
        target = grad_xp[:, gi * cg:(gi + 1) * cg]
        for i in range(kh):
            for j in range(kw):
                target[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, :, i, j]
    grad_x = grad_xp[:, :, p:p + h, p:p + w] if p else grad_xp
    return grad_x, grad_w, grad_b


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def pool_output_hw(h, w, size, stride):
    if size > h or size > w:
        raise ConfigurationError(f"pool size {size} larger than input {h}x{w}")
    return (h - size) // stride + 1, (w - size) // stride + 1


def maxpool_forward(x, size, stride):
    """Max pooling without padding.

    Returns ``(out, argmax)`` where ``argmax`` holds the row-major offset of
    the winning element inside each window. Ties keep the first element.
    """
    n, c, h, w = x.shape
    ho, wo = pool_output_hw(h, w, size, stride)
    out = None
    arg = np.zeros((n, c, ho, wo), dtype=np.int32)
    for di in range(size):
        for dj in range(size):
            win = x[:, :, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride]
            if out is None:
                out = win.copy()
                continue
            better = win > out
            out[better] = win[better]
            arg[better] = di * size + dj
    return out, arg


def maxpool_backward(grad_out, argmax, input_shape, size, stride):
    n, c, h, w = input_shape
    ho, wo = grad_out.shape[2:]
    grad_in = np.zeros(input_shape, dtype=grad_out.dtype)
    for di in range(size):
        for dj in range(size):
            hit = argmax == di * size + dj
            grad_in[:, :, di:di + stride * (ho - 1) + 1:stride,
                    dj:dj + stride * (wo - 1) + 1:stride] += np.where(hit, grad_out, 0)
    return grad_in


def _channel_window_sum(a, n):
    """Sum over a centred channel window of width ``n``, clipped at the edges."""
    half = n // 2
    c = a.shape[1]
    out = a.copy()
    for off in range(1, half + 1):
        out[:, off:] += a[:, :c - off]
        out[:, :c - off] += a[:, off:]
    return out


def lrn_forward(x, n=5, alpha=1e-4, beta=0.75, k=1.0):
    """Cross-channel local response normalisation.

    Returns ``(out, scale)``; ``scale`` is needed by the backward pass.
    """
    if n < 1 or n % 2 == 0:
        raise ConfigurationError(f"LRN window must be a positive odd number, got {n}")
    scale = k + (alpha / n) * _channel_window_sum(x * x, n)
    return x * scale ** (-beta), scale


def lrn_backward(grad_out, x, scale, n=5, alpha=1e-4, beta=0.75):
    t = grad_out * x * scale ** (-beta - 1)
    return grad_out * scale ** (-beta) - (2 * alpha * beta / n) * x * _channel_window_sum(t, n)


def fc_forward(x, weight, bias):
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigurationError(
            f"fully connected input {x.shape} does not match weight {weight.shape}")
    return x @ weight + bias


def fc_backward(grad_out, x, weight, grad_w=None):
    """``grad_w`` may be a preallocated (in, out) buffer to write into."""
    if grad_w is None:
        grad_w = x.T @ grad_out
    elif x.shape[0] == 1:
        np.multiply(x.T, grad_out, out=grad_w)
    else:
        np.matmul(x.T, grad_out, out=grad_w)
    return grad_out @ weight.T, grad_w, grad_out.sum(axis=0)


def dropout_forward(x, ratio, train, rng=None):
    """Inverted dropout. Returns ``(out, mask)``; ``mask`` is None when unused."""
    if not 0 <= ratio < 1:
        raise ConfigurationError(f"dropout ratio must lie in [0, 1), got {ratio}")
    if not train or ratio == 0:
        return x, None
    if rng is None:
        raise ConfigurationError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= ratio
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - ratio))
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_loss(logits, labels):
    """Mean negative log-likelihood.

    Returns ``(loss, probs, grad_logits)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise ConfigurationError(f"labels must be {n} integers in [0, {classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= n
    return loss, probs, grad
