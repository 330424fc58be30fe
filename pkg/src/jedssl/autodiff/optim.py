"""Adam with bias correction and the warmup learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class WarmupSchedule:
    """Linear ramp to ``peak_lr`` over ``warmup_steps``, then inverse-sqrt decay."""

    peak_lr: float
    warmup_steps: int

    def __post_init__(self):
        if not self.peak_lr > 0:
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")

    def lr_at_step(self, step: int) -> float:
        if step < 1:
            raise ValueError(f"lr_at_step: step must be >= 1, got {step}")
        w = self.warmup_steps
        return self.peak_lr * min(step / w, math.sqrt(w / step))


def lr_at_step(sched: WarmupSchedule, step: int) -> float:
    return sched.lr_at_step(step)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float) -> None:
    """One in-place Adam update over every named parameter that has a gradient.

    Parameters whose gradient is ``None`` keep their value and moments.
    """
    if not lr > 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise FloatingPointError(f"adam_step: non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Thin stateful wrapper binding a parameter dict to an :class:`AdamState`."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.98, eps=1e-8):
        self.params = params
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.requires_grad}
        adam_step(self.params, grads, self.state, lr)
