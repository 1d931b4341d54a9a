"""Deterministic multi-level quantizer with a soft-rounding backward pass."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import BatchNorm, batchnorm
from .tensor import Tensor, _make, as_tensor, clip, mul


@dataclass(frozen=True)
class QuantizerConfig:
    N: int = 7
    u: float = 4.0
    alpha: float = 0.5

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if not self.u > 0:
            raise ValueError("u must be positive")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")


def round_hard(x):
    """ceil(x - 0.5): nearest integer with halves rounding down."""
    return np.ceil(np.asarray(x) - 0.5)


def round_soft(x, alpha: float = 0.5):
    x = np.asarray(x)
    return x - alpha * np.sin(2 * math.pi * x) / (2 * math.pi)


def round_soft_grad(x, alpha: float = 0.5):
    return 1 - alpha * np.cos(2 * math.pi * np.asarray(x))


def quantize(x: Tensor, alpha: float = 0.5) -> Tensor:
    """Hard rounding forward; backward scales by the soft-round derivative."""
    x = as_tensor(x)
    out = round_hard(x.data).astype(x.dtype)
    return _make(out, (x,), lambda g: ((g * round_soft_grad(x.data, alpha)).astype(g.dtype),))


def soft_surrogate(x: Tensor, alpha: float = 0.5, offset: np.ndarray | None = None) -> Tensor:
    """Differentiable ``round_soft(x) + offset``.

    With ``offset = round_hard(x0) - round_soft(x0)`` frozen at a point x0 this
    reproduces the hard forward value at x0 while having the soft derivative,
    so finite differences of it check the quantizer's backward rule.
    """
    x = as_tensor(x)
    out = round_soft(x.data, alpha).astype(x.dtype)
    if offset is not None:
        out = out + offset.astype(x.dtype)
    return _make(out, (x,), lambda g: ((g * round_soft_grad(x.data, alpha)).astype(g.dtype),))


def preprocess(z: Tensor, bn: BatchNorm, config: QuantizerConfig, train: bool) -> Tensor:
    """BN, clip to [0, u], then stretch to [0, N-1]."""
    normed = batchnorm(z, bn, train)
    return mul(clip(normed, 0.0, config.u), (config.N - 1) / config.u)


def quantize_levels(x: np.ndarray, config: QuantizerConfig) -> np.ndarray:
    """Integer levels for already-preprocessed values."""
    return np.clip(round_hard(x), 0, config.N - 1).astype(np.int64)
