"""Layer kernels with explicit forward and backward passes.

Signals are batched channels-last: ``(batch, length, channels)``. Every
``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes the
upstream gradient and that cache. Convolution is cross-correlation (no
kernel flip).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LN_EPS = 1e-5
DEFAULT_KAPPA = 1e-8


class ShapeError(ValueError):
    pass


# -- convolution -----------------------------------------------------------------

def conv1d_forward(x, w, b, pad=False):
    """x: (N, L, C), w: (F, C, K), b: (F,). ``pad`` keeps the length (symmetric zeros)."""
    n, length, c = x.shape
    f, cw, k = w.shape
    if cw != c:
        raise ShapeError(f"kernel expects {cw} input channels, input has {c}")
    if pad:
        lo = (k - 1) // 2
        x = np.pad(x, ((0, 0), (lo, k - 1 - lo), (0, 0)))
    elif k > length:
        raise ShapeError(f"kernel length {k} exceeds input length {length}")
    lout = x.shape[1] - k + 1
    cols = np.ascontiguousarray(sliding_window_view(x, k, axis=1)).reshape(n * lout, c * k)
    wm = w.reshape(f, c * k).astype(x.dtype, copy=False)
    out = (cols @ wm.T).reshape(n, lout, f) + b.astype(x.dtype, copy=False)
    return out, (cols, wm, x.shape, k, pad)


def conv1d_backward(dout, cache):
    cols, wm, xshape, k, pad = cache
    n, lp, c = xshape
    f = wm.shape[0]
    d2 = dout.reshape(-1, f)
    dw = (d2.T @ cols).reshape(f, c, k)
    db = d2.sum(axis=0)
    dcols = (d2 @ wm).reshape(n, -1, c, k)
    lout = dcols.shape[1]
    dx = np.zeros(xshape, dtype=dout.dtype)
    for j in range(k):
        dx[:, j:j + lout, :] += dcols[:, :, :, j]
    if pad:
        lo = (k - 1) // 2
        dx = dx[:, lo:lp - (k - 1 - lo), :]
    return dx, dw, db


def fft_correlate_forward(x, taps):
    """Valid cross-correlation of single-channel signals x (N, L) with a bank (B, T) -> (N, L-T+1, B)."""
    n, length = x.shape
    bcount, t = taps.shape
    if t > length:
        raise ShapeError("filter longer than signal")
    nfft = 1 << int(np.ceil(np.log2(length + t - 1)))
    xf = np.fft.rfft(x, nfft)
    tf = np.fft.rfft(taps[:, ::-1], nfft)
    full = np.fft.irfft(xf[:, None, :] * tf[None, :, :], nfft)
    out = full[:, :, t - 1:length].transpose(0, 2, 1)
    return np.ascontiguousarray(out.astype(x.dtype, copy=False)), (xf, nfft, length, t)


def fft_correlate_backward(dout, cache):
    """Gradient with respect to the taps, shape (B, T)."""
    xf, nfft, length, t = cache
    lout = length - t + 1
    df = np.fft.rfft(dout.transpose(0, 2, 1), nfft)  # (N, B, F)
    # dtaps[b, k] = sum_n sum_l dout[n, l, b] x[n, l + k]
    acc = np.einsum("nf,nbf->bf", xf, np.conj(df))
    corr = np.fft.irfft(acc, nfft)
    return corr[:, :t]


# -- pooling / activations ----------------------------------------------------

def maxpool_forward(x, size=3, stride=3):
    n, length, c = x.shape
    if length < size:
        raise ShapeError(f"pool size {size} exceeds length {length}")
    win = sliding_window_view(x, size, axis=1)[:, ::stride]  # (N, Lout, C, size)
    idx = np.argmax(win, axis=3)  # first maximum wins ties
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    return out, (idx, x.shape, size, stride)


def maxpool_backward(dout, cache):
    idx, xshape, size, stride = cache
    n, lout, c = idx.shape
    dx = np.zeros(xshape, dtype=dout.dtype)
    pos = np.arange(lout)[None, :, None] * stride + idx
    ni = np.arange(n)[:, None, None]
    ci = np.arange(c)[None, None, :]
    np.add.at(dx, (np.broadcast_to(ni, pos.shape), pos, np.broadcast_to(ci, pos.shape)), dout)
    return dx


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


# -- normalization / dense ----------------------------------------------------

def layernorm_forward(x, scale, offset, eps=LN_EPS):
    """Normalize each example over all non-batch axes; per-channel (last axis) scale and offset."""
    axes = tuple(range(1, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * scale.astype(x.dtype, copy=False) + offset.astype(x.dtype, copy=False)
    return out, (xhat, inv, scale)


def layernorm_backward(dout, cache):
    xhat, inv, scale = cache
    red = tuple(range(dout.ndim - 1))
    dscale = (dout * xhat).sum(axis=red)
    doffset = dout.sum(axis=red)
    dxhat = dout * scale.astype(dout.dtype, copy=False)
    axes = tuple(range(1, dout.ndim))
    dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
    return dx, dscale, doffset


def dense_forward(x, w, b):
    """x: (N, p), w: (p, q), b: (q,)."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense expects {w.shape[0]} inputs, got {x.shape[1]}")
    return x @ w.astype(x.dtype, copy=False) + b.astype(x.dtype, copy=False), (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T.astype(dout.dtype, copy=False), x.T @ dout, dout.sum(axis=0)


# -- output ------------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent_forward(logits, labels, kappa=DEFAULT_KAPPA):
    """Per-example jittered loss ``-log((1 - 2 kappa) p_label + kappa)`` and probabilities."""
    if not 0.0 <= kappa <= 0.1:
        raise ValueError("kappa must lie in [0, 0.1]")
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range for {k} classes")
    probs = softmax(logits.astype(np.float64))
    py = probs[np.arange(len(labels)), labels]
    loss = -np.log((1.0 - 2.0 * kappa) * py + kappa)
    return loss, probs, (probs, labels, py, kappa)


def softmax_xent_backward(dloss, cache):
    """dloss: per-example upstream gradient (N,). Returns d/d logits."""
    probs, labels, py, kappa = cache
    n = len(labels)
    scale = -(1.0 - 2.0 * kappa) * py / ((1.0 - 2.0 * kappa) * py + kappa)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    return (np.asarray(dloss)[:, None] * scale[:, None]) * (onehot - probs)
