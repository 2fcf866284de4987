"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..exceptions import ContractError
from .tensor import Tensor

#: denominators below this are treated as this value, so coordinates whose
#: true gradient is ~0 are judged on absolute error instead of blowing up.
REL_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    floor: float = REL_FLOOR,
) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` is called as ``f(*inputs)`` and must return a scalar tensor. Every
    coordinate of every input is perturbed in place and restored.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    out = f(*inputs)
    if not isinstance(out, Tensor) or out.data.size != 1:
        shape = out.shape if isinstance(out, Tensor) else type(out).__name__
        raise ContractError(f"grad_check needs a scalar-valued function, got {shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(*inputs).data.item()
            flat[i] = orig - step
            fm = f(*inputs).data.item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * step)
        if flat.size:
            worst = max(worst, float(relative_error(a.reshape(-1), numeric, floor).max()))
    for t in inputs:
        t.grad = None
    return worst
