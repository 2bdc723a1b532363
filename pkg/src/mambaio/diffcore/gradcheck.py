from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor


class EvaluationError(ArithmeticError):
    """The checked function produced a non-finite value."""


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
                      max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between backward gradients and central differences.

    ``f`` is re-evaluated with each parameter entry nudged by ``±eps`` in place.
    The relative error of one entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``max_entries`` samples at most that many entries per parameter.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    _check_finite(loss)
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = _check_finite(f())
            flat[i] = orig - eps
            down = _check_finite(f())
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = float(grad.reshape(-1)[i])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


def _check_finite(t: Tensor) -> float:
    value = float(np.asarray(t.data).sum())
    if not np.isfinite(value):
        raise EvaluationError(f"function value is not finite: {value}")
    return value
