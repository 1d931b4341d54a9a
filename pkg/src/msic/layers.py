"""Trainable layers built on the tensor engine."""

from __future__ import annotations

import numpy as np

from .tensor import ConfigurationError, Parameter, Tensor, as_tensor, conv2d, he_uniform, mean, power, reshape

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Conv2d:
    """Zero-padded ("same" for stride 1) convolution with bias."""

    def __init__(self, rng, in_ch: int, out_ch: int, k: int = 3, stride: int = 1, name: str = "conv", dtype=np.float32):
        self.stride = stride
        self.pad = k // 2
        self.weight = Parameter(he_uniform(rng, (out_ch, in_ch, k, k), dtype), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def buffers(self) -> list[np.ndarray]:
        return []


class BatchNorm:
    """Per-channel batch normalisation with learned scale and shift.

    Train mode normalises with the batch statistics (biased variance) and
    folds them into the running estimates; eval mode uses the running
    estimates only.
    """

    def __init__(self, channels: int, name: str = "bn", dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batchnorm(x, self, train)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> list[np.ndarray]:
        return [self.running_mean, self.running_var]


def batchnorm(x: Tensor, bn: BatchNorm, train: bool) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ConfigurationError(f"batchnorm expects (B, C, H, W), got {x.shape}")
    channels = x.shape[1]
    if bn.gamma.shape != (channels,):
        raise ConfigurationError(f"batchnorm has {bn.gamma.shape[0]} channels, input has {channels}")
    if train:
        if x.shape[0] < 2:
            raise ConfigurationError("train-mode batchnorm needs a batch of at least 2")
        mu = mean(x, axis=(0, 2, 3), keepdims=True)
        centered = x - mu
        var = mean(centered * centered, axis=(0, 2, 3), keepdims=True)
        xhat = centered * power(var + BN_EPS, -0.5)
        m = 1 - BN_MOMENTUM
        bn.running_mean[...] = BN_MOMENTUM * bn.running_mean + m * mu.data.reshape(-1)
        bn.running_var[...] = BN_MOMENTUM * bn.running_var + m * var.data.reshape(-1)
    else:
        mu = bn.running_mean.reshape(1, -1, 1, 1)
        inv = 1.0 / np.sqrt(bn.running_var.reshape(1, -1, 1, 1) + BN_EPS)
        xhat = (x - mu.astype(x.dtype)) * inv.astype(x.dtype)
    return xhat * reshape(bn.gamma, (1, channels, 1, 1)) + reshape(bn.beta, (1, channels, 1, 1))
