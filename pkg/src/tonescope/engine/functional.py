"""Differentiable layer operations: conv, pool, relu, linear, dropout, loss."""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from tonescope.engine import kernels
from tonescope.engine.tensor import ShapeError, Tensor, _needs_grad, apply


_local = threading.local()


@contextmanager
def record_activation_patterns():
    """Collect every ReLU mask and max-pool argmax computed inside the block.

    Two evaluations with identical patterns lie in the same smooth piece of
    the network, which is what the finite-difference check relies on.
    """
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    rec: list[np.ndarray] = []
    stack.append(rec)
    try:
        yield rec
    finally:
        stack.pop()


def _note(pattern: np.ndarray) -> None:
    stack = getattr(_local, "stack", None)
    if stack:
        stack[-1].append(pattern)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernels_: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x[N,C,H,W]`` with ``kernels_[F,C,kH,kW]`` and add ``bias[F]``."""
    if x.data.ndim != 4 or kernels_.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernels, got {x.shape} and {kernels_.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernels_.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernels expect {kc}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if kh > h + 2 * padding or kw > w + 2 * padding or ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = kernels.im2col(xp, kh, kw, stride)
    wmat = kernels_.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f) + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    need_x = _needs_grad(x)
    hp, wp = xp.shape[2], xp.shape[3]

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dw = (g2.T @ cols).reshape(kernels_.shape)
        db = g2.sum(axis=0)
        dx = None
        if need_x:
            dxp = kernels.col2im(g2 @ wmat, n, c, hp, wp, kh, kw, stride)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dw, db

    return apply("conv2d", (x, kernels_, bias), out, back)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pool; gradient goes to the first maximum of each window."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"maxpool2d: {h}x{w} not divisible by window {window}")
    out, arg = kernels.maxpool_forward(x.data, window)
    _note(arg)

    def back(g):
        return (kernels.maxpool_backward(g, arg, h, w),)

    return apply("maxpool2d", (x,), out, back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note(mask)
    return apply("relu", (x,), x.data * mask, lambda g: (g * mask,))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x[N,D] @ weight[D,U] + bias[U]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    a, wt = x.data, weight.data

    def back(g):
        return g @ wt.T, a.T @ g, g.sum(axis=0)

    return apply("linear", (x, weight, bias), a @ wt + bias.data, back)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` so eval is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return apply("dropout", (x,), x.data * mask, lambda g: (g * mask,))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``).

    Returns the scalar loss tensor and the row probabilities.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be 2-d, got {logits.shape}")
    n, k = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for {n} rows")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got {sorted(set(y.tolist()))}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = logsum - z[rows, y]
    probs = np.exp(z - logsum[:, None])
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def back(g):
        d = probs.copy()
        d[rows, y] -= 1.0
        return (d * (g / n),)

    return apply("softmax_xent", (logits,), loss, back), probs
