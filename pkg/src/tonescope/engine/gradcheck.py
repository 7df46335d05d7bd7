"""Central finite-difference check against reverse-mode gradients.

ReLU and max-pool make the network piecewise smooth. A central difference
whose two probes land in different pieces measures a kink, not the
derivative, so each probe's activation pattern is compared with the
unperturbed one and the step is shrunk until all three agree.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from tonescope.engine.functional import record_activation_patterns
from tonescope.engine.tensor import Tensor

MAX_SHRINKS = 6


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def _eval(f) -> tuple[float, list[np.ndarray]]:
    with record_activation_patterns() as rec:
        value = f().data.item()
    return value, rec


def _same(p, q) -> bool:
    return len(p) == len(q) and all(np.array_equal(a, b) for a, b in zip(p, q))


def numeric_grad(f: Callable[[], Tensor], t: Tensor, index, eps: float, base_pattern=None) -> Optional[float]:
    """Central difference of ``f`` along ``t[index]``.

    With ``base_pattern`` the step is divided by 4 (up to ``MAX_SHRINKS``
    times) until neither probe changes the activation pattern; returns None
    if that never happens.
    """
    old = t.data[index]
    h = eps
    try:
        for _ in range(MAX_SHRINKS + 1):
            t.data[index] = old + h
            fp, pp = _eval(f)
            t.data[index] = old - h
            fm, pm = _eval(f)
            if base_pattern is None or (_same(pp, base_pattern) and _same(pm, base_pattern)):
                return (fp - fm) / (2.0 * h)
            h /= 4.0
    finally:
        t.data[index] = old
    return None


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    eps: float = 1e-5,
) -> float:
    """Worst relative error between analytic and central-difference gradients of ``f`` at ``point``."""
    errors = check_tensors(lambda: f(point), [point], eps=eps)
    return max(errors.values())


def check_tensors(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    skipped: Optional[list] = None,
) -> dict[int, float]:
    """Check gradients of the scalar ``f()`` w.r.t. each tensor in ``tensors``.

    With ``max_coords`` set, at most that many coordinates per tensor are
    sampled (without replacement) from ``rng``. Returns the worst relative
    error per tensor position. Coordinates where no kink-free step was found
    are appended to ``skipped`` as ``(position, index)``.
    """
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with record_activation_patterns() as base:
        loss = f()
    if loss.graph is not None:
        loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    for t, s in zip(tensors, saved):
        t.requires_grad = s
        t.grad = None

    out = {}
    for pos, (t, g) in enumerate(zip(tensors, analytic)):
        worst = 0.0
        for idx in _coords(t, max_coords, rng):
            num = numeric_grad(f, t, idx, eps, base)
            if num is None:
                if skipped is not None:
                    skipped.append((pos, idx))
                continue
            worst = max(worst, float(relative_error(g[idx], num)))
        out[pos] = worst
    return out


def _coords(t: Tensor, max_coords, rng) -> Iterable[tuple]:
    size = t.data.size
    flat = np.arange(size)
    if max_coords is not None and size > max_coords:
        flat = np.sort((rng or np.random.default_rng(0)).choice(size, max_coords, replace=False))
    for k in flat:
        yield np.unravel_index(int(k), t.shape)
