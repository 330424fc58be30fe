"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    out = []
    with no_grad():
        for t in inputs:
            g = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * h)
            out.append(g)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference scaled by the largest gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Relative error between backward() and finite differences, jointly over all ``inputs``.

    The scale is the largest gradient entry of any input, so tensors whose
    true gradient is zero (e.g. attention key biases) are not judged on
    finite-difference noise alone. ``fn`` must close over ``inputs``.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    backward(fn())
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    numeric = numerical_grad(fn, inputs, h)
    return relative_error(np.concatenate([a.ravel() for a in analytic]), np.concatenate([n.ravel() for n in numeric]))
