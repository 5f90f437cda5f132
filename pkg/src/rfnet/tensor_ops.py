"""Dense numerical primitives on float64 numpy arrays.

Feature maps are ``[..., H, W]`` arrays; leading axes (channels, batch) are
carried through untouched.  Correlation is the forward primitive and uses
"same" zero padding.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _taps(kernel) -> np.ndarray:
    return np.asarray(getattr(kernel, "taps", kernel), dtype=np.float64)


def correlate2d(x, kernel) -> np.ndarray:
    """Cross-correlation of every ``[H, W]`` plane of ``x`` with one kernel.

    ``out[i, j] = sum_{u,v} x[i+u, j+v] * k[u+r, v+r]`` with zeros outside.
    """
    x = np.asarray(x, dtype=np.float64)
    k = _taps(kernel)
    r = k.shape[0] // 2
    h, w = x.shape[-2:]
    if k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise ValueError(f"kernel must be square with odd side, got {k.shape}")
    if r >= min(h, w):
        raise ValueError(f"kernel radius {r} does not fit a {h}x{w} input")
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    win = sliding_window_view(np.pad(x, pad), k.shape, axis=(-2, -1))
    return np.einsum("...ij,ij->...", win, k)


def convolve2d(x, kernel) -> np.ndarray:
    """True convolution: correlation with the 180-degree rotated kernel."""
    return correlate2d(x, _taps(kernel)[::-1, ::-1])


def correlate1d(x, taps, axis: int) -> np.ndarray:
    """Correlate along one spatial axis with a bank of 1D kernels.

    ``taps`` is ``[P, 2r+1]``; the result gains a new axis of length P just
    before the two spatial axes.
    """
    x = np.asarray(x, dtype=np.float64)
    taps = np.atleast_2d(np.asarray(taps, dtype=np.float64))
    r = taps.shape[1] // 2
    ax = x.ndim + axis if axis < 0 else axis
    if r >= x.shape[ax]:
        raise ValueError(f"1D kernel radius {r} does not fit axis of length {x.shape[ax]}")
    pad = [(0, 0)] * x.ndim
    pad[ax] = (r, r)
    win = sliding_window_view(np.pad(x, pad), taps.shape[1], axis=ax)
    out = np.tensordot(win, taps, axes=([-1], [1]))  # [..., H, W, P]
    return np.moveaxis(out, -1, -3)


def correlation_matrix(taps, n: int) -> np.ndarray:
    """``[n, n]`` operator C with ``(x @ C) == correlate1d(x, taps)`` along the last axis.

    The operator for the flipped kernel is exactly ``C.T``.
    """
    taps = np.asarray(taps, dtype=np.float64)
    r = taps.shape[0] // 2
    c = np.zeros((n, n))
    j = np.arange(n)
    for off in range(-r, r + 1):
        ok = (j + off >= 0) & (j + off < n)
        c[j[ok] + off, j[ok]] = taps[off + r]
    return c


def _pool_local(x):
    """Window maxima and the in-window winner (0..3, row-major, first max wins)."""
    h, w = x.shape[-2:]
    ho, wo = -(-h // 2), -(-w // 2)
    if (h, w) != (2 * ho, 2 * wo):
        pad = [(0, 0)] * (x.ndim - 2) + [(0, 2 * ho - h), (0, 2 * wo - w)]
        x = np.pad(x, pad, constant_values=-np.inf)
    q = [x[..., 0::2, 0::2], x[..., 0::2, 1::2], x[..., 1::2, 0::2], x[..., 1::2, 1::2]]
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    local = np.full(out.shape, 3, dtype=np.int8)
    for j in (2, 1, 0):
        local[q[j] == out] = j
    return out, local


def maxpool2x2(x):
    """Non-overlapping 2x2 max pooling; an odd trailing row/column forms 1-wide windows.

    Returns ``(out, argmax)`` where ``argmax`` holds, per output cell, the
    flat ``H*W`` index of the winning input pixel (first maximum wins).
    """
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"maxpool2x2 needs H, W >= 2, got {h}x{w}")
    out, local = _pool_local(x)
    ho, wo = out.shape[-2:]
    rows = 2 * np.arange(ho)[:, None] + local // 2
    cols = 2 * np.arange(wo)[None, :] + local % 2
    return out, rows * w + cols


def maxpool2x2_backward(upstream, argmax, input_shape) -> np.ndarray:
    """Route each pooled gradient to its stored argmax position."""
    upstream = np.asarray(upstream, dtype=np.float64)
    h, w = input_shape[-2:]
    ho, wo = upstream.shape[-2:]
    # recover the in-window position and scatter through strided views
    rows, cols = np.divmod(argmax, w)
    local = 2 * (rows - 2 * np.arange(ho)[:, None]) + (cols - 2 * np.arange(wo)[None, :])
    return unpool_local(upstream, local, input_shape)


def unpool_local(upstream, local, input_shape) -> np.ndarray:
    """Scatter pooled gradients given in-window winners from ``_pool_local``."""
    h, w = input_shape[-2:]
    ho, wo = upstream.shape[-2:]
    grad = np.zeros(upstream.shape[:-2] + (2 * ho, 2 * wo))
    for j in range(4):
        grad[..., j // 2::2, j % 2::2] = np.where(local == j, upstream, 0.0)
    if (h, w) != (2 * ho, 2 * wo):
        grad = np.ascontiguousarray(grad[..., :h, :w])
    return grad


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(upstream, x) -> np.ndarray:
    """Gradient of relu; the derivative at exactly 0 is taken as 0."""
    return upstream * (np.asarray(x) > 0)


def global_avg_pool(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=(-2, -1))


def global_avg_pool_backward(upstream, input_shape) -> np.ndarray:
    h, w = input_shape[-2:]
    up = np.asarray(upstream, dtype=np.float64)[..., None, None] / (h * w)
    return np.broadcast_to(up, tuple(input_shape)).copy()


def softmax_xent(logits, label):
    """Cross-entropy of softmax(logits) against integer labels.

    ``logits`` is ``[K]`` (scalar label) or ``[N, K]`` (label vector).
    Returns per-sample ``(loss, grad)`` with ``grad = softmax - onehot``.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    k = z2.shape[1]
    if k < 2:
        raise ValueError("softmax_xent needs at least two classes")
    if labels.shape[0] != z2.shape[0] or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels {labels} incompatible with logits of shape {z.shape}")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    loss = lse - shifted[rows, labels]
    grad = np.exp(shifted - lse[:, None])
    grad[rows, labels] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def im2col(x, k: int) -> np.ndarray:
    """Zero-padded ``k x k`` patches: ``[N, C, H, W] -> [N, C*k*k, H*W]``."""
    n, c, h, w = x.shape
    r = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N C H W k k
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, h * w)
