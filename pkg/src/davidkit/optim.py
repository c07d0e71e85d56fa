"""Adam optimizer over named parameter dicts.

Weight decay is multiplicative: when `decay < 1`, every step first scales
the parameter by `decay` and then applies the bias-corrected Adam update.
With zero gradients and decay 1 a step is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 1.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        return self.lr


@dataclass
class CosineAdamState(AdamState):
    """Adam with cosine learning-rate decay over `total_steps`."""

    total_steps: int = 1
    lr_final: float = 0.0

    def lr_at(self, step: int) -> float:
        frac = min(step / max(1, self.total_steps), 1.0)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1 + np.cos(np.pi * frac))


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> None:
    """One in-place Adam update on every parameter present in `grads`."""
    state.step_count += 1
    t = state.step_count
    lr = state.lr_at(t - 1)
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise NumericalError(
                f"adam_step: gradient shape {g.shape} != param {name!r} shape {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"adam_step: non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        if state.decay != 1.0:
            p *= state.decay
        p -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
