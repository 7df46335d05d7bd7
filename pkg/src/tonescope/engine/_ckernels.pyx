# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot loops. Mirrors ``_npkernels`` exactly."""

import numpy as np
cimport cython

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, ::1] xp, real[:, ::1] cols, int kh, int kw, int stride):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t ho = (xp.shape[2] - kh) // stride + 1
    cdef Py_ssize_t wo = (xp.shape[3] - kw) // stride + 1
    cdef Py_ssize_t b, oh, ow, ch, i, j, row, col
    with nogil:
        for b in range(n):
            for oh in range(ho):
                for ow in range(wo):
                    row = (b * ho + oh) * wo + ow
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                cols[row, col] = xp[b, ch, oh * stride + i, ow * stride + j]
                                col += 1


def _col2im(real[:, ::1] cols, real[:, :, :, ::1] out, int kh, int kw, int stride):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t ho = (out.shape[2] - kh) // stride + 1
    cdef Py_ssize_t wo = (out.shape[3] - kw) // stride + 1
    cdef Py_ssize_t b, oh, ow, ch, i, j, row, col
    # kernel offsets outermost so each pixel sums its terms in the same
    # order as the numpy fallback (bit-identical results)
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        col = (ch * kh + i) * kw + j
                        for oh in range(ho):
                            row = (b * ho + oh) * wo
                            for ow in range(wo):
                                out[b, ch, oh * stride + i, ow * stride + j] += cols[row + ow, col]


def _maxpool_fwd(real[:, :, :, ::1] x, real[:, :, :, ::1] out, long long[:, :, :, ::1] arg, int window):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], w = x.shape[3]
    cdef Py_ssize_t ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t b, ch, oh, ow, i, j, r, q, best_idx
    cdef real best, v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        r = oh * window
                        q = ow * window
                        best = x[b, ch, r, q]
                        best_idx = r * w + q
                        for i in range(window):
                            for j in range(window):
                                v = x[b, ch, r + i, q + j]
                                if v > best:
                                    best = v
                                    best_idx = (r + i) * w + q + j
                        out[b, ch, oh, ow] = best
                        arg[b, ch, oh, ow] = best_idx


def _maxpool_bwd(real[:, :, :, ::1] grad, long long[:, :, :, ::1] arg, real[:, :, ::1] dx):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1], ho = grad.shape[2], wo = grad.shape[3]
    cdef Py_ssize_t b, ch, oh, ow
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        dx[b, ch, arg[b, ch, oh, ow]] += grad[b, ch, oh, ow]


def im2col(xp, int kh, int kw, int stride):
    xp = np.ascontiguousarray(xp)
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((n * ho * wo, c * kh * kw), dtype=xp.dtype)
    _im2col(xp, cols, kh, kw, stride)
    return cols


def col2im(cols, int n, int c, int hp, int wp, int kh, int kw, int stride):
    cols = np.ascontiguousarray(cols)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride)
    return out


def maxpool_forward(x, int window):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.empty((n, c, h // window, w // window), dtype=x.dtype)
    arg = np.empty((n, c, h // window, w // window), dtype=np.int64)
    _maxpool_fwd(x, out, arg, window)
    return out, arg


def maxpool_backward(grad, argmax, int h, int w):
    grad = np.ascontiguousarray(grad)
    n, c = grad.shape[:2]
    dx = np.zeros((n, c, h * w), dtype=grad.dtype)
    _maxpool_bwd(grad, np.ascontiguousarray(argmax, dtype=np.int64), dx)
    return dx.reshape(n, c, h, w)
