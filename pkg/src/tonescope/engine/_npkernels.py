"""Pure numpy versions of the hot loops. Same signatures as ``_ckernels``."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride):
    """Unfold a padded ``(N, C, Hp, Wp)`` batch into ``(N*Ho*Wo, C*kh*kw)`` rows."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def col2im(cols, n, c, hp, wp, kh, kw, stride):
    """Adjoint of :func:`im2col`; overlapping contributions are summed."""
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    d = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += d[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return out


def maxpool_forward(x, window):
    """Non-overlapping max pool. Returns ``(out, argmax)``.

    ``argmax`` holds flat offsets into each ``H*W`` input plane, first
    row-major maximum on ties.
    """
    n, c, h, w = x.shape
    ho, wo = h // window, w // window
    blocks = x.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, window * window)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * window + arg // window
    cols = np.arange(wo)[None, :] * window + arg % window
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.int64)


def maxpool_backward(grad, argmax, h, w):
    n, c = grad.shape[:2]
    dx = np.zeros((n, c, h * w), dtype=grad.dtype)
    np.put_along_axis(dx, argmax.reshape(n, c, -1), grad.reshape(n, c, -1), axis=2)
    return dx.reshape(n, c, h, w)
