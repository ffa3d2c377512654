"""Parameter containers and small layers built on the tensor ops."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .io import load_container, save_container
from .tensor import Tensor


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used for every stochastic choice in the package."""
    return np.random.Generator(np.random.Philox(int(seed)))


def param(array) -> Tensor:
    return Tensor(np.array(array, dtype=np.float64), requires_grad=True)


class Module:
    """Holds parameters (trainable tensors) and sub-modules as attributes.

    Traversal order is attribute insertion order, so parameter names and
    the order seen by optimisers are stable across runs.
    """

    training = True

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if strict and (missing or set(state) - set(own)):
            raise KeyError(f"state mismatch: missing={sorted(missing)} "
                           f"unexpected={sorted(set(state) - set(own))}")
        for k, v in state.items():
            if k in own:
                if own[k].shape != tuple(np.shape(v)):
                    raise T.ShapeError("load_state_dict", own[k].shape, np.shape(v), k)
                own[k].data[...] = v

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False

    def save(self, path, meta=None):
        save_container(path, self.state_dict(), meta)

    def load(self, path) -> dict:
        tensors, meta = load_container(Path(path))
        self.load_state_dict(tensors)
        return meta

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        scale = 0.0 if zero else np.sqrt(2.0 / (n_in + n_out))
        self.weight = param(rng.standard_normal((n_in, n_out)) * scale)
        self.bias = param(np.zeros(n_out)) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Two linear layers with a ReLU in between."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator,
                 zero_last: bool = False):
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng, zero=zero_last)

    def forward(self, x):
        return self.fc2(T.relu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1):
        fan_in = c_in * k * k
        self.weight = param(rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in))
        self.bias = param(np.zeros(c_out))
        self.stride = stride

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride)
