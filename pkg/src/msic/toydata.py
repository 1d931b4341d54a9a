"""Procedural natural-ish RGB images for desk-scale experiments.

Each image is a smooth colour gradient overlaid with a few soft-edged
ellipses and rectangles plus low-amplitude blurred noise, so it has both
coarse structure and fine texture.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit


def toy_image(rng: np.random.Generator, height: int = 64, width: int = 64) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    ys /= max(height - 1, 1)
    xs /= max(width - 1, 1)
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.clip(0.5 + (np.cos(angle) * (xs - 0.5) + np.sin(angle) * (ys - 0.5)), 0, 1)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(rng.integers(2, 6)):
        colour = rng.uniform(0, 1, size=3)
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.08, 0.35, size=2)
        if rng.random() < 0.5:
            d = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2
        else:
            d = np.maximum(np.abs(ys - cy) / ry, np.abs(xs - cx) / rx) ** 2
        edge = rng.uniform(0.02, 0.2)
        alpha = expit((1.0 - d) / edge)
        img = img * (1 - alpha) + colour[:, None, None] * alpha
    noise = gaussian_filter(rng.normal(size=(3, height, width)), sigma=(0, 1.0, 1.0))
    img = img + rng.uniform(0.0, 0.08) * noise
    return np.clip(img, 0, 1).astype(np.float32)


def toy_corpus(count: int, height: int = 64, width: int = 64, seed: int = 0) -> list[np.ndarray]:
    return [toy_image(np.random.default_rng([seed, i]), height, width) for i in range(count)]


def quantize8(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid PNG files can hold."""
    return (np.round(np.clip(image, 0, 1) * 255) / 255).astype(np.float32)
