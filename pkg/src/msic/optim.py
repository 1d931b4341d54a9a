"""Adam with a linearly decaying learning rate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter


@dataclass
class AdamState:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def ensure(self, params: list[Parameter]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        if len(self.m) != len(params) or any(m.shape != p.shape for m, p in zip(self.m, params)):
            raise ValueError("optimizer state does not match the parameter list")


def adam_step(params: list[Parameter], state: AdamState, lr_scale: float = 1.0) -> None:
    """One Adam update at rate ``alpha * lr_scale``; clears gradients.

    A non-finite gradient aborts the update before any parameter changes.
    """
    if not 0.0 <= lr_scale <= 1.0:
        raise ValueError(f"lr_scale must lie in [0, 1], got {lr_scale}")
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in {p.name or 'parameter'}; update aborted")
    state.ensure(params)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    rate = state.alpha * lr_scale
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if rate:
            p.data -= (rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype)
        p.grad = None


def linear_decay(update: int, total: int, decay_start: float = 0.75) -> float:
    """Learning-rate multiplier: 1 until ``decay_start * total``, then linear to 0 at ``total``."""
    if total <= 0:
        return 1.0
    start = decay_start * total
    if update < start:
        return 1.0
    return max(0.0, (total - update) / (total - start)) if total > start else 0.0
