"""Adam, SGD and RMSProp over lists of parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tonescope.engine.tensor import ShapeError, Tensor


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def _check(params, grads):
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param shape {p.shape} != grad shape {g.shape}")


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    _check(params, grads)
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype, copy=False)
    return state


class Optimizer:
    def __init__(self, params: list[Tensor], lr: float) -> None:
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self) -> list[np.ndarray]:
        return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        raise NotImplementedError


class Adam(Optimizer):
    def __init__(self, params, lr=1e-5, beta1=0.9, beta2=0.999, epsilon=1e-8):
        super().__init__(params, lr)
        self.state = AdamState(beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self) -> None:
        adam_step([p.data for p in self.params], self._grads(), self.state, self.lr)


class SGD(Optimizer):
    def step(self) -> None:
        for p, g in zip(self.params, self._grads()):
            p.data -= (self.lr * g).astype(p.dtype, copy=False)


class RMSProp(Optimizer):
    def __init__(self, params, lr=1e-3, decay=0.99, epsilon=1e-8):
        super().__init__(params, lr)
        self.decay = decay
        self.epsilon = epsilon
        self.sq = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, g, s in zip(self.params, self._grads(), self.sq):
            s *= self.decay
            s += (1.0 - self.decay) * g * g
            p.data -= (self.lr * g / (np.sqrt(s) + self.epsilon)).astype(p.dtype, copy=False)


OPTIMIZERS = {"adam": Adam, "sgd": SGD, "rmsprop": RMSProp}


def make_optimizer(name: str, params, lr: float) -> Optimizer:
    try:
        cls = OPTIMIZERS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}") from None
    return cls(params, lr=lr)
