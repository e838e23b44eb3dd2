"""Finite-difference verification of the hand-written backward passes."""

from __future__ import annotations

import numpy as np

from .optim import GradientError
from .tensor import Tensor


def grad_check(f, inputs, step: float = 1e-5, tolerance: float | None = None) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor; it must be
    deterministic (dropout off, any rng reseeded inside) and read the given
    ``inputs`` tensors by reference so perturbations take effect. Returns
    the max over all input coordinates of

        |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)

    and raises if a tolerance is supplied and exceeded.
    """
    tensors = [t.value if hasattr(t, "value") else t for t in inputs]
    for t in tensors:
        if not isinstance(t, Tensor) or not t.requires_grad:
            raise ValueError("grad_check inputs must be Tensors with requires_grad")
        t.grad = None
    out = f()
    out.backward()
    analytic = []
    for t in tensors:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(t.grad.copy())
        t.grad = None

    worst = 0.0
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            hi = f().item()
            flat[i] = saved - step
            lo = f().item()
            flat[i] = saved
            numeric = (hi - lo) / (2.0 * step)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    if tolerance is not None and worst > tolerance:
        raise GradientError(f"gradient check failed: max relative error {worst:.3e} > {tolerance:g}")
    return worst
