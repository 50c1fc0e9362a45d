"""Adam optimiser over named parameter tensors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place and zero the grads."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.value = p.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()


def zero_grad(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


def cosine_lr(base: float, final: float | None, step: int, total: int) -> float:
    """Cosine interpolation from ``base`` at step 1 to ``final`` at ``total``; constant if ``final`` is None."""
    if final is None or total <= 1:
        return base
    frac = min(max(step - 1, 0) / (total - 1), 1.0)
    return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * frac))
