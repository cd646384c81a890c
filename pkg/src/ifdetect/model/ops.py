"""Layer kernels with hand-written reverse passes.

Activations are channels-last, ``(batch, height, width, channels)``. Convolutions
are 3x3, stride 1, zero padding 1. Pooling is 2x2 max, stride 2, dropping a
trailing odd row or column; an axis of length 1 passes through unpooled.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KERNEL = 3


def im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, H*W, C*9), column order (channel, ky, kx)."""
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (KERNEL, KERNEL), axis=(1, 2))  # (B, H, W, C, 3, 3)
    return win.reshape(b, h * w, c * KERNEL * KERNEL)


def col2im(dcols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    b, h, w, c = shape
    d = dcols.reshape(b, h, w, c, KERNEL, KERNEL)
    dxp = np.zeros((b, h + 2, w + 2, c))
    for i in range(KERNEL):
        for j in range(KERNEL):
            dxp[:, i : i + h, j : j + w, :] += d[..., i, j]
    return dxp[:, 1:-1, 1:-1, :]


def conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """weight is (C_out, C_in, 3, 3). Returns output (B, H, W, C_out) and the cols cache."""
    b, h, w, _ = x.shape
    cols = im2col(x)
    out = cols @ weight.reshape(weight.shape[0], -1).T + bias
    return out.reshape(b, h, w, -1), cols


def conv_backward(dout: np.ndarray, cols: np.ndarray, weight: np.ndarray, x_shape, per_sample: bool):
    b, h, w, c_out = dout.shape
    d2 = dout.reshape(b, h * w, c_out)
    wmat = weight.reshape(c_out, -1)
    if per_sample:
        dw = np.einsum("bpo,bpk->bok", d2, cols).reshape((b,) + weight.shape)
        db = d2.sum(axis=1)
    else:
        dw = (d2.reshape(-1, c_out).T @ cols.reshape(-1, cols.shape[-1])).reshape(weight.shape)
        db = d2.sum(axis=(0, 1))
    dx = col2im(d2 @ wmat, x_shape)
    return dx, dw, db


def pooled_size(n: int) -> int:
    return 1 if n == 1 else n // 2


def pool_forward(x: np.ndarray):
    b, h, w, c = x.shape
    h2, w2 = pooled_size(h), pooled_size(w)
    xp = np.full((b, 2 * h2, 2 * w2, c), -np.inf)
    hh, ww = min(h, 2 * h2), min(w, 2 * w2)
    xp[:, :hh, :ww, :] = x[:, :hh, :ww, :]
    blocks = xp.reshape(b, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def pool_backward(dout: np.ndarray, cache) -> np.ndarray:
    arg, (b, h, w, c) = cache
    h2, w2 = dout.shape[1], dout.shape[2]
    blocks = np.zeros((b, h2, w2, c, 4))
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    dxp = blocks.reshape(b, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, 2 * h2, 2 * w2, c)
    dx = np.zeros((b, h, w, c))
    hh, ww = min(h, 2 * h2), min(w, 2 * w2)
    dx[:, :hh, :ww, :] = dxp[:, :hh, :ww, :]
    return dx


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))
