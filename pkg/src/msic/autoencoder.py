"""Multi-scale analyzer/synthesizer pair and its distortion-only training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .layers import BatchNorm, Conv2d
from .metrics import MsSsimConfig, distortion_loss, ms_ssim
from .optim import AdamState, adam_step, linear_decay
from .quantizer import QuantizerConfig, preprocess, quantize, quantize_levels, round_hard, round_soft, soft_surrogate
from .tensor import ConfigurationError


@dataclass(frozen=True)
class CodecConfig:
    M: int = 4
    channels: tuple[int, ...] = (1, 2, 4, 8)
    N: int = 7
    u: float = 4.0
    alpha: float = 0.5
    hidden_width: int = 16
    depth: int = 6
    K: int = 4
    coder_width: int = 16

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.M < 1 or len(self.channels) != self.M:
            raise ConfigurationError(f"need M >= 1 and one channel count per scale, got M={self.M}, {self.channels}")
        if self.channels[-1] < 1 or any(c < 0 for c in self.channels):
            raise ConfigurationError("the deepest scale needs at least one channel and counts must be >= 0")
        if max(self.channels) > 255 or self.N > 255 or self.M > 255 or self.K > 255:
            raise ConfigurationError("M, N, K and channel counts must fit in one byte")
        if self.depth - self.M < 2:
            raise ConfigurationError("depth must leave at least two downsampling layers before the first tap")
        if self.K < 0 or self.K % 2:
            raise ConfigurationError("K must be even and nonnegative")
        QuantizerConfig(self.N, self.u, self.alpha)

    @property
    def quantizer(self) -> QuantizerConfig:
        return QuantizerConfig(self.N, self.u, self.alpha)

    @property
    def pad_multiple(self) -> int:
        """Image dims must be multiples of this for both the network and the schedule."""
        return max(2 ** (self.M + 1), 4 * 2 ** (self.K // 2))

    def feature_shapes(self, height: int, width: int) -> list[tuple[int, int, int]]:
        return [(c, height // 2 ** (i + 2), width // 2 ** (i + 2)) for i, c in enumerate(self.channels)]

    def to_header(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_header(cls, values: dict[str, str]) -> "CodecConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            if f.name == "channels":
                kwargs[f.name] = tuple(int(v) for v in raw.split(",") if v.strip())
            elif f.name in ("u", "alpha"):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


FULL_SCALE_PRESET = CodecConfig(M=4, channels=(2, 8, 24, 32), N=7, depth=6, K=8, hidden_width=64, coder_width=64)


def single_scale(config: CodecConfig, scale: int, channels: int) -> CodecConfig:
    """The "only z(i)" baseline: same trunk up to scale ``scale``, one tap, nothing deeper."""
    return replace(config, M=scale, channels=(0,) * (scale - 1) + (channels,), depth=scale + 2)


@dataclass(frozen=True)
class TrainSchedule:
    updates: int = 2000
    batch: int = 8
    crop: int = 32
    lr: float = 1e-3
    decay_start: float = 0.75
    seed: int = 0


class Autoencoder:
    """Analyzer F, quantizer taps with batch norm, and synthesizer G."""

    def __init__(self, config: CodecConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        width = config.hidden_width
        pre = config.depth - config.M
        self.strides = [2 if l < 2 else 1 for l in range(pre)] + [1] + [2] * (config.M - 1)
        self.trunk: list[Conv2d] = []
        in_ch = 3
        for l, stride in enumerate(self.strides):
            k = 5 if l == 0 else 3
            self.trunk.append(Conv2d(rng, in_ch, width, k, stride, name=f"F.{l}", dtype=dtype))
            in_ch = width
        self.taps = [Conv2d(rng, width, c, 3, name=f"F.tap{i}", dtype=dtype) if c else None for i, c in enumerate(config.channels)]
        self.bns = [BatchNorm(c, name=f"Q.bn{i}", dtype=dtype) if c else None for i, c in enumerate(config.channels)]
        # synthesizer, deepest scale first
        self.syn_in = [Conv2d(rng, c, width, 3, name=f"G.in{i}", dtype=dtype) if c else None for i, c in enumerate(config.channels)]
        self.syn_mix = [Conv2d(rng, width, width, 3, name=f"G.mix{i}", dtype=dtype) for i in range(config.M - 1)]
        self.syn_pre: list[Conv2d] = []
        for l in reversed(range(pre)):
            last = l == 0
            self.syn_pre.append(Conv2d(rng, width, 3 if last else width, 5 if last else 3, name=f"G.pre{l}", dtype=dtype))
        # start at a flat mid-grey image: with He-scaled weights most outputs land in the
        # clamp's flat region, get no gradient, and training stalls on a saturated image
        self.syn_pre[-1].weight.data[...] = 0
        self.syn_pre[-1].bias.data[...] = 0.5

    # -- parameter bookkeeping -------------------------------------------------
    def analyzer_parameters(self) -> list[T.Parameter]:
        ps = [p for c in self.trunk for p in c.parameters()]
        ps += [p for c in self.taps if c for p in c.parameters()]
        ps += [p for b in self.bns if b for p in b.parameters()]
        return ps

    def synthesizer_parameters(self) -> list[T.Parameter]:
        ps = [p for c in self.syn_in if c for p in c.parameters()]
        ps += [p for c in self.syn_mix for p in c.parameters()]
        ps += [p for c in self.syn_pre for p in c.parameters()]
        return ps

    def parameters(self) -> list[T.Parameter]:
        return self.analyzer_parameters() + self.synthesizer_parameters()

    def buffers(self) -> list[np.ndarray]:
        return [buf for b in self.bns if b for buf in b.buffers()]

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()] + self.buffers()

    # -- forward passes ----------------------------------------------------------
    def _check(self, x: T.Tensor) -> None:
        h, w = x.shape[-2:]
        m = 2 ** (self.config.M + 1)
        if h % m or w % m:
            raise ConfigurationError(f"image {h}x{w} must be padded to multiples of {m}")

    def analyze(self, x) -> list[T.Tensor | None]:
        """Real-valued tap outputs z(i) for a (B, 3, H, W) batch; None for empty scales."""
        x = T.as_tensor(x)
        self._check(x)
        pre = self.config.depth - self.config.M
        taps: list[T.Tensor | None] = []
        h = x
        for l, conv in enumerate(self.trunk):
            h = T.leaky_relu(conv(h))
            if l >= pre:
                tap = self.taps[l - pre]
                taps.append(tap(h) if tap else None)
        return taps

    def quantize(self, z: Sequence[T.Tensor | None], train: bool, surrogate_offsets=None) -> list[T.Tensor | None]:
        """Preprocess and round each tap. ``surrogate_offsets`` swaps in the soft surrogate."""
        qc = self.config.quantizer
        out = []
        for i, (zi, bn) in enumerate(zip(z, self.bns)):
            if zi is None:
                out.append(None)
                continue
            pre = preprocess(zi, bn, qc, train)
            if surrogate_offsets is None:
                out.append(quantize(pre, qc.alpha))
            else:
                out.append(soft_surrogate(pre, qc.alpha, surrogate_offsets[i]))
        return out

    def surrogate_offsets(self, x, train: bool = False) -> list[np.ndarray | None]:
        """Per-scale ``round_hard - round_soft`` at the current point.

        Frozen offsets turn the quantizer into a smooth function that equals
        the hard forward value here and has the soft backward derivative, so
        finite differences of it check the training gradient.
        """
        qc = self.config.quantizer
        out = []
        for zi, bn in zip(self.analyze(x), self.bns):
            if zi is None:
                out.append(None)
                continue
            pre = preprocess(zi, bn, qc, train).data
            out.append(round_hard(pre) - round_soft(pre, qc.alpha))
        return out

    def synthesize(self, q: Sequence[T.Tensor | np.ndarray | None]) -> T.Tensor:
        """Reconstruction in [0, 1] from per-scale levels (presented as reals)."""
        cfg = self.config
        if len(q) != cfg.M:
            raise ConfigurationError(f"expected {cfg.M} feature maps, got {len(q)}")
        g = None
        for i in reversed(range(cfg.M)):
            qi = q[i]
            if cfg.channels[i]:
                qi = T.as_tensor(qi)
                if qi.data.ndim == 3:
                    qi = T.reshape(qi, (1,) + qi.shape)
                if qi.shape[1] != cfg.channels[i]:
                    raise ConfigurationError(f"scale {i + 1} expects {cfg.channels[i]} channels, got {qi.shape[1]}")
                if g is not None and qi.shape[-2:] != (g.shape[-2] * 2, g.shape[-1] * 2):
                    raise ConfigurationError(f"scale {i + 1} has spatial shape {qi.shape[-2:]}, inconsistent with deeper scales")
            if g is None:
                g = T.leaky_relu(self.syn_in[i](qi))
            else:
                mixed = self.syn_mix[i](T.unpool_nearest(g, 2))
                if cfg.channels[i]:
                    mixed = mixed + self.syn_in[i](qi)
                g = T.leaky_relu(mixed)
        pre_strides = list(reversed(self.strides[: cfg.depth - cfg.M]))
        for j, (conv, stride) in enumerate(zip(self.syn_pre, pre_strides)):
            if stride == 2:
                g = T.unpool_nearest(g, 2)
            g = conv(g)
            if j < len(self.syn_pre) - 1:
                g = T.leaky_relu(g)
        return T.clip(g, 0.0, 1.0)

    def forward(self, x, train: bool) -> T.Tensor:
        return self.synthesize(self.quantize(self.analyze(x), train))

    # -- inference helpers -------------------------------------------------------
    def encode_levels(self, image: np.ndarray) -> list[np.ndarray]:
        """Integer levels per scale for one padded (3, H, W) image (eval-mode BN)."""
        z = self.analyze(np.asarray(image, dtype=np.float32)[None])
        qc = self.config.quantizer
        levels = []
        for i, (zi, bn) in enumerate(zip(z, self.bns)):
            if zi is None:
                c, h, w = self.config.feature_shapes(*image.shape[-2:])[i]
                levels.append(np.zeros((0, h, w), dtype=np.int64))
            else:
                levels.append(quantize_levels(preprocess(zi, bn, qc, False).data[0], qc))
        return levels

    def decode_levels(self, levels: Sequence[np.ndarray]) -> np.ndarray:
        q = [np.asarray(l, dtype=np.float32)[None] if c else None for l, c in zip(levels, self.config.channels)]
        return self.synthesize(q).data[0]


def reflect_pad(image: np.ndarray, multiple: int) -> np.ndarray:
    """Reflect-pad (C, H, W) at the bottom/right up to multiples of ``multiple``."""
    _, h, w = image.shape
    ph = -h % multiple
    pw = -w % multiple
    if not ph and not pw:
        return image
    mode = "reflect" if h > 1 and w > 1 else "edge"
    return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode=mode)


def random_crops(images: Sequence[np.ndarray], size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((count, 3, size, size), dtype=np.float32)
    for n in range(count):
        img = images[rng.integers(len(images))]
        _, h, w = img.shape
        if h < size or w < size:
            img = reflect_pad(img, size)
            _, h, w = img.shape
        y = rng.integers(h - size + 1)
        x = rng.integers(w - size + 1)
        out[n] = img[:, y : y + size, x : x + size]
    return out


@dataclass
class TrainLog:
    updates: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    lr_scale: list[float] = field(default_factory=list)

    def rows(self) -> Iterator[tuple[int, float, float]]:
        return zip(self.updates, self.loss, self.lr_scale)


def train_autoencoder(
    images: Sequence[np.ndarray],
    config: CodecConfig,
    schedule: TrainSchedule = TrainSchedule(),
    model: Autoencoder | None = None,
    state: AdamState | None = None,
    start: int = 0,
    log: TrainLog | None = None,
    msssim: MsSsimConfig = MsSsimConfig(),
    stop: int | None = None,
) -> tuple[Autoencoder, AdamState, TrainLog]:
    """Minimise 1 - MS-SSIM over random crops with Adam and linear decay.

    Batch ``u`` draws its crops from a generator seeded by (seed, u), so a
    run resumed from (model, state, start) reproduces the uninterrupted one.
    ``stop`` ends the run early without changing the learning-rate schedule.
    """
    model = model or Autoencoder(config, schedule.seed)
    state = state or AdamState(alpha=schedule.lr)
    log = log or TrainLog()
    params = model.parameters()
    for update in range(start + 1, (schedule.updates if stop is None else stop) + 1):
        rng = np.random.default_rng([schedule.seed, 0, update])
        batch = random_crops(images, schedule.crop, schedule.batch, rng)
        loss = distortion_loss(batch, model.forward(batch, train=True), msssim)
        if not math.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite distortion loss at update {update}")
        loss.backward()
        scale = linear_decay(update, schedule.updates, schedule.decay_start)
        adam_step(params, state, scale)
        log.updates.append(update)
        log.loss.append(loss.item())
        log.lr_scale.append(scale)
    return model, state, log


def evaluate_distortion(model: Autoencoder, images: Sequence[np.ndarray], msssim: MsSsimConfig = MsSsimConfig()) -> float:
    """Mean 1 - MS-SSIM in eval mode over full (padded, then cropped) images."""
    losses = []
    for img in images:
        padded = reflect_pad(img, 2 ** (model.config.M + 1))
        rec = model.decode_levels(model.encode_levels(padded))[:, : img.shape[1], : img.shape[2]]
        losses.append(1.0 - ms_ssim(img, rec, msssim))
    return float(np.mean(losses))
