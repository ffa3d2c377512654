"""Adam optimiser."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[list, AdamState]:
    """One Adam update. Returns new parameter arrays and the advanced state."""
    if len(params) != len(grads):
        raise ShapeError("adam_step", (len(params),), (len(grads),), "parameter/gradient count")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ShapeError("adam_step", np.shape(p), np.shape(g))
    if not state.m:
        state.m = [np.zeros(np.shape(p)) for p in params]
        state.v = [np.zeros(np.shape(p)) for p in params]
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = beta1 * state.m[i] + (1.0 - beta1) * g
        v = beta2 * state.v[i] + (1.0 - beta2) * g * g
        state.m[i], state.v[i] = m, v
        out.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
    state.step = t
    return out, state


class Adam:
    """Adam over a fixed list of parameter tensors, updated in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state,
                                    lr=self.lr, beta1=self.betas[0], beta2=self.betas[1],
                                    eps=self.eps)
        for p, d in zip(self.params, new):
            p.data[...] = d
