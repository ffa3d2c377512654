"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def _relerr(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def _scalar(out: Tensor, where: str) -> float:
    if not isinstance(out, Tensor) or out.data.size != 1:
        shape = getattr(out, "shape", type(out))
        raise ValueError(f"{where}: function must return a scalar Tensor, got {shape}")
    return float(out.data.reshape(()))


def grad_check(function: Callable[[Tensor], Tensor], point, step: float = 1e-6) -> float:
    """Max relative error between the analytic gradient of ``function`` at ``point``
    and its central-difference estimate.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64),
               requires_grad=True)
    out = function(x)
    _scalar(out, "grad_check")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar(function(x), "grad_check")
            flat[i] = orig - step
            fm = _scalar(function(x), "grad_check")
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
    return float(_relerr(analytic, numeric).max()) if flat.size else 0.0


def check_parameters(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                     step: float = 1e-6, max_coords: int | None = 24,
                     rng: np.random.Generator | None = None) -> dict:
    """Gradient check of a closure w.r.t. tensors it reads, perturbed in place.

    At most ``max_coords`` coordinates per tensor are probed (chosen with
    ``rng``); ``None`` probes all. Returns ``{index: max_relative_error}``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = loss_fn()
    _scalar(loss, "check_parameters")
    loss.backward()
    errors = {}
    with no_grad():
        for k, p in enumerate(params):
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            n = flat.size
            coords = np.arange(n) if max_coords is None or n <= max_coords \
                else rng.choice(n, size=max_coords, replace=False)
            worst = 0.0
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                fp = _scalar(loss_fn(), "check_parameters")
                flat[i] = orig - step
                fm = _scalar(loss_fn(), "check_parameters")
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                worst = max(worst, float(_relerr(analytic.reshape(-1)[i], num)))
            errors[k] = worst
    for p in params:
        p.grad = None
    return errors
