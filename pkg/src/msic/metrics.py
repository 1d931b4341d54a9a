"""MS-SSIM distortion and bits-per-pixel accounting.

MS-SSIM is computed per colour channel on [0, 1] images and averaged over
channels. Between scales the images are 2x2 mean-pooled. The per-scale means
are clamped at zero before exponentiation, which keeps the product real.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, Tensor

WANG_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
K1, K2 = 0.01, 0.03


@dataclass(frozen=True)
class MsSsimConfig:
    scales: int = 5
    weights: tuple[float, ...] = tuple(w / sum(WANG_WEIGHTS) for w in WANG_WEIGHTS)
    window: int = 11
    sigma: float = 1.5
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window % 2 != 1:
            raise ValueError("window size must be odd")
        if len(self.weights) < self.scales:
            raise ValueError("need one weight per scale")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights[: self.scales]) - 1) > 1e-9:
            raise ValueError("scale weights must be nonnegative and sum to 1")

    def taps(self) -> np.ndarray:
        r = np.arange(self.window) - self.window // 2
        g = np.exp(-(r**2) / (2 * self.sigma**2))
        return g / g.sum()

    def fit(self, height: int, width: int) -> tuple[int, tuple[float, ...]]:
        """Scale count and renormalised weights usable at the given size."""
        side = min(height, width)
        scales = self.scales
        while scales > 1 and side < self.window * 2 ** (scales - 1):
            scales -= 1
        if side < self.window:
            raise ConfigurationError(f"image {height}x{width} is smaller than the {self.window}px window")
        weights = self.weights[:scales]
        if scales < self.scales:
            warnings.warn(
                f"image {height}x{width} too small for {self.scales} MS-SSIM scales; using {scales}",
                stacklevel=3,
            )
            total = sum(weights)
            weights = tuple(w / total for w in weights)
        return scales, weights


DEFAULT = MsSsimConfig()


def ms_ssim_tensor(x, y, config: MsSsimConfig = DEFAULT) -> Tensor:
    """Per-(image, channel) MS-SSIM for (B, C, H, W) inputs, differentiable in both."""
    x, y = T.as_tensor(x), T.as_tensor(y)
    if x.shape != y.shape:
        raise ConfigurationError(f"shape mismatch {x.shape} vs {y.shape}")
    scales, weights = config.fit(*x.shape[-2:])
    taps = config.taps()
    c1 = (K1 * config.dynamic_range) ** 2
    c2 = (K2 * config.dynamic_range) ** 2
    result = None
    for j in range(scales):
        mu_x = T.separable_filter_valid(x, taps)
        mu_y = T.separable_filter_valid(y, taps)
        mu_xx = mu_x * mu_x
        mu_yy = mu_y * mu_y
        mu_xy = mu_x * mu_y
        s_xx = T.separable_filter_valid(x * x, taps) - mu_xx
        s_yy = T.separable_filter_valid(y * y, taps) - mu_yy
        s_xy = T.separable_filter_valid(x * y, taps) - mu_xy
        cs = (2 * s_xy + c2) / (s_xx + s_yy + c2)
        if j < scales - 1:
            term = T.mean(cs, axis=(-2, -1))
            x, y = T.avg_pool2(x), T.avg_pool2(y)
        else:
            lum = (2 * mu_xy + c1) / (mu_xx + mu_yy + c1)
            term = T.mean(lum * cs, axis=(-2, -1))
        factor = T.relu_power(term, weights[j])
        result = factor if result is None else result * factor
    return result


def ms_ssim(a, b, config: MsSsimConfig = DEFAULT) -> float:
    """Channel-averaged MS-SSIM of two (C, H, W) images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch {a.shape} vs {b.shape}")
    per_channel = ms_ssim_tensor(a[None], b[None], config).data
    return float(per_channel.mean())


def distortion_loss(x, x_hat, config: MsSsimConfig = DEFAULT) -> Tensor:
    """Batch mean of 1 - MS-SSIM (channel-averaged)."""
    return 1.0 - T.mean(ms_ssim_tensor(x, x_hat, config))


def bpp(file_bytes: int, width: int, height: int) -> float:
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    return 8.0 * file_bytes / (width * height)


def entropy_bits(counts: np.ndarray) -> float:
    """Shannon entropy in bits of a histogram."""
    p = np.asarray(counts, dtype=np.float64)
    p = p[p > 0] / p.sum()
    return float(-(p * np.log2(p)).sum()) if p.size else 0.0

