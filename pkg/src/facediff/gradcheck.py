"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor


class GradCheckError(AssertionError):
    pass


FLOOR = 1e-8
"""Denominator floor of the relative error."""


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               seed: int = 0, names: Sequence[str] | None = None, require_fp64: bool = True) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` rebuilds the graph from ``inputs`` on every call. The scalar probed
    is ``sum(fn() * W)`` for a fixed random ``W`` so every output entry counts.
    Every entry of every input is perturbed. Inputs must be float64 unless
    ``require_fp64`` is False (errors are then only indicative).
    """
    names = list(names) if names is not None else [getattr(t, "name", "") or f"input{i}"
                                                    for i, t in enumerate(inputs)]
    for t, name in zip(inputs, names):
        if require_fp64 and t.data.dtype != np.float64:
            raise GradCheckError(f"{name}: grad_check requires float64, got {t.data.dtype}")
    for t in inputs:
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
    flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        out = fn()
        weights = np.random.default_rng(seed).normal(size=out.shape)
        (out * weights).sum().backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

        def probe() -> float:
            return float((fn().data * weights).sum())

        worst = 0.0
        for t, name, g in zip(inputs, names, analytic):
            if not np.all(np.isfinite(g)):
                raise GradCheckError(f"non-finite gradient for {name}")
            flat = t.data.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = probe()
                flat[i] = orig - eps
                down = probe()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * eps)
            if not np.all(np.isfinite(numeric)):
                raise GradCheckError(f"non-finite finite-difference estimate for {name}")
            worst = max(worst, float(relative_error(g.reshape(-1), numeric).max(initial=0.0)))
        return worst
    finally:
        for t, flag in zip(inputs, flags):
            t.requires_grad = flag
            t.grad = None
