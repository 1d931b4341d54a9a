"""Parallel multi-scale conditional coding of quantized feature maps.

Coarser feature maps are unpooled to the finest quantized resolution and
stacked into one integrated grid. Positions are then coded coarse to fine:
a sparse seed grid with per-channel histograms, followed by K steps that
alternate between diagonal centres and axis midpoints, halving the grid
stride every two steps. Each step has its own small CNN that predicts a
distribution for every target position at once from the already-known
positions, so a whole image needs exactly K network evaluations.

A channel that came from scale i is constant over 2**(i-1) blocks; only
the top-left "owner" of each block is coded, the rest are copies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import Conv2d
from .optim import AdamState, adam_step, linear_decay
from .rangecoder import CorruptStreamError, RangeDecoder, RangeEncoder, quantize_probs


class ScheduleError(ValueError):
    """Grid dimensions are incompatible with the requested number of blocks."""


# ---------------------------------------------------------------------------
# integration


@dataclass
class IntegratedFeatureMap:
    grid: np.ndarray  # (C_total, H, W) int levels
    strides: np.ndarray  # per-channel ownership stride 2**(scale-1)
    scales: np.ndarray  # per-channel 0-based scale index

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.grid.shape


def channel_layout(channels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    strides, scales = [], []
    for i, c in enumerate(channels):
        strides += [2**i] * c
        scales += [i] * c
    return np.array(strides, dtype=np.int64), np.array(scales, dtype=np.int64)


def integrate(features: Sequence[np.ndarray]) -> IntegratedFeatureMap:
    """Unpool every scale to the finest resolution and concatenate channels."""
    if not features:
        raise ValueError("no feature maps")
    h, w = features[0].shape[1:]
    parts = []
    for i, f in enumerate(features):
        f = np.asarray(f)
        factor = 2**i
        if f.shape[1] * factor != h or f.shape[2] * factor != w:
            raise ValueError(f"scale {i + 1} has spatial shape {f.shape[1:]}, expected {(h // factor, w // factor)}")
        parts.append(np.repeat(np.repeat(f, factor, axis=1), factor, axis=2))
    strides, scales = channel_layout([f.shape[0] for f in features])
    grid = np.concatenate(parts, axis=0).astype(np.int64)
    return IntegratedFeatureMap(grid, strides, scales)


def split(imap_grid: np.ndarray, channels: Sequence[int]) -> list[np.ndarray]:
    """Inverse of ``integrate``: read each channel back at its owner positions."""
    out, c0 = [], 0
    for i, c in enumerate(channels):
        t = 2**i
        out.append(np.ascontiguousarray(imap_grid[c0 : c0 + c, ::t, ::t]))
        c0 += c
    return out


def owner_mask(strides: np.ndarray, height: int, width: int) -> np.ndarray:
    """(C, H, W) bool: True where the position is the owner of that channel's block."""
    ys = np.arange(height)[None, :, None]
    xs = np.arange(width)[None, None, :]
    t = strides[:, None, None]
    return (ys % t == 0) & (xs % t == 0)


def channel_known(known_pos: np.ndarray, strides: np.ndarray) -> np.ndarray:
    """(C, H, W) bool: a channel is known wherever its block owner is known."""
    h, w = known_pos.shape[-2:]
    out = np.empty(known_pos.shape[:-2] + (len(strides), h, w), dtype=bool)
    for c, t in enumerate(strides):
        owners = known_pos[..., ::t, ::t]
        out[..., c, :, :] = np.repeat(np.repeat(owners, t, axis=-2), t, axis=-1)
    return out


# ---------------------------------------------------------------------------
# schedule


@dataclass
class Step:
    kind: str  # "diagonal" or "axis"
    stride: int  # grid stride of the pair this step belongs to
    targets: np.ndarray  # (H, W) bool
    known: np.ndarray  # (H, W) bool, positions available as conditioning

    @property
    def lattice(self) -> int:
        """Spacing of the sub-lattice holding both this step's targets and its conditioning."""
        return self.stride // 2

    def positions(self) -> np.ndarray:
        return np.argwhere(self.targets)


@dataclass
class GridSchedule:
    height: int
    width: int
    blocks: int  # K the models were built for
    dropped: int = 0
    steps: list[Step] = field(default_factory=list)
    seed: np.ndarray | None = None  # (H, W) bool, positions coded by histogram

    @property
    def seed_stride(self) -> int:
        return 2 ** ((self.blocks - self.dropped) // 2)

    @property
    def base_stride(self) -> int:
        return 2 ** (self.blocks // 2)

    @property
    def model_indices(self) -> range:
        return range(self.dropped, self.blocks)


def _grid(height: int, width: int, stride: int, oy: int = 0, ox: int = 0) -> np.ndarray:
    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]
    return (ys % stride == oy) & (xs % stride == ox)


def build_schedule(height: int, width: int, blocks: int) -> GridSchedule:
    if blocks < 0 or blocks % 2:
        raise ScheduleError(f"number of blocks must be even and nonnegative, got {blocks}")
    s0 = 2 ** (blocks // 2)
    if height % s0 or width % s0:
        raise ScheduleError(f"grid {height}x{width} must be divisible by {s0} for K={blocks}; pad the input")
    known = _grid(height, width, s0)
    schedule = GridSchedule(height, width, blocks, seed=known.copy())
    s = s0
    while s > 1:
        h = s // 2
        diag = _grid(height, width, s, h, h)
        schedule.steps.append(Step("diagonal", s, diag, known.copy()))
        known = known | diag
        axis = _grid(height, width, s, 0, h) | _grid(height, width, s, h, 0)
        schedule.steps.append(Step("axis", s, axis, known.copy()))
        known = known | axis
        s = h
    return schedule


def drop_schedule(schedule: GridSchedule, n: int) -> GridSchedule:
    """Skip the first ``n`` (coarsest) steps; their positions join the histogram-coded seed."""
    n_total = schedule.dropped + n
    if n < 0 or n % 2 or n_total > schedule.blocks:
        raise ScheduleError(f"cannot drop {n} blocks from a K={schedule.blocks} schedule")
    if n == 0:
        return schedule
    steps = schedule.steps[n:]
    seed = steps[0].known.copy() if steps else np.ones((schedule.height, schedule.width), dtype=bool)
    return GridSchedule(schedule.height, schedule.width, schedule.blocks, n_total, steps, seed)


# ---------------------------------------------------------------------------
# models


@dataclass
class BaseHistogram:
    counts: np.ndarray  # (C, N)

    def probs(self) -> np.ndarray:
        smoothed = self.counts.astype(np.float64) + 1.0
        return smoothed / smoothed.sum(axis=1, keepdims=True)

    def tables(self) -> np.ndarray:
        return quantize_probs(self.probs()) if len(self.counts) else np.zeros((0, self.counts.shape[1] + 1), np.int64)


def fit_histogram(feature_sets: Sequence[Sequence[np.ndarray]], levels: int) -> BaseHistogram:
    """Per-channel level counts over every native-resolution element."""
    channels = [f.shape[0] for f in feature_sets[0]]
    counts = np.zeros((sum(channels), levels), dtype=np.int64)
    for fs in feature_sets:
        c0 = 0
        for f in fs:
            for row in f.reshape(f.shape[0], f[0].size if len(f) else 0):
                counts[c0] += np.bincount(row, minlength=levels)[:levels]
                c0 += 1
    return BaseHistogram(counts)


class StepModel:
    """Four 3x3 convolutions on a step's sub-lattice; outputs C*N logits."""

    def __init__(self, rng, channels: int, levels: int, width: int, name: str, dtype=np.float32):
        self.channels = channels
        self.levels = levels
        self.layers = [
            Conv2d(rng, channels + 1, width, 3, name=f"{name}.0", dtype=dtype),
            Conv2d(rng, width, width, 3, name=f"{name}.1", dtype=dtype),
            Conv2d(rng, width, width, 3, name=f"{name}.2", dtype=dtype),
            Conv2d(rng, width, channels * levels, 3, name=f"{name}.3", dtype=dtype),
        ]
        self.layers[-1].weight.data[...] = 0

    def __call__(self, x: T.Tensor) -> T.Tensor:
        for layer in self.layers[:-1]:
            x = T.leaky_relu(layer(x))
        logits = self.layers[-1](x)
        b, _, h, w = logits.shape
        return T.reshape(logits, (b, self.channels, self.levels, h, w))

    def parameters(self) -> list[T.Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


class ContextModel:
    def __init__(self, channels: Sequence[int], levels: int, blocks: int, width: int = 32, seed: int = 0, dtype=np.float32):
        self.channels = list(channels)
        self.levels = levels
        self.blocks = blocks
        self.width = width
        self.strides, _ = channel_layout(self.channels)
        rng = np.random.default_rng(seed)
        total = sum(self.channels)
        self.steps = [StepModel(rng, total, levels, width, f"coder.{k}", dtype) for k in range(blocks)]
        self.forward_count = 0

    def parameters(self) -> list[T.Parameter]:
        return [p for m in self.steps for p in m.parameters()]

    def set_prior(self, hist: BaseHistogram) -> None:
        """Bias every output head towards the histogram so training starts at the marginal."""
        logp = np.log(hist.probs()).astype(np.float32).reshape(-1)
        for m in self.steps:
            m.layers[-1].bias.data[...] = logp

    def logits(self, k: int, inputs: np.ndarray) -> T.Tensor:
        self.forward_count += 1
        return self.steps[k](T.Tensor(inputs))


def model_inputs(grid: np.ndarray, known_pos: np.ndarray, strides: np.ndarray, levels: int, lattice: int) -> np.ndarray:
    """Masked network input on a step's sub-lattice.

    ``grid`` is (B, C, H, W) or (C, H, W). Known values enter as
    ``(level + 1) / N`` and unknown ones as 0, followed by a position mask.
    """
    single = grid.ndim == 3
    if single:
        grid = grid[None]
        known_pos = known_pos[None]
    known_ch = channel_known(known_pos, strides)
    values = np.where(known_ch, (grid + 1) / levels, 0.0).astype(np.float32)
    x = np.concatenate([values, known_pos[:, None].astype(np.float32)], axis=1)
    return np.ascontiguousarray(x[:, :, ::lattice, ::lattice])


def step_coded(step: Step, strides: np.ndarray) -> np.ndarray:
    """(C, H, W) bool: (position, channel) pairs that this step actually codes."""
    h, w = step.targets.shape
    return owner_mask(strides, h, w) & step.targets[None]


def step_probabilities(model: ContextModel, k: int, grid: np.ndarray, known_pos: np.ndarray, step: Step) -> np.ndarray:
    """Softmax output (C, N, H/l, W/l) of step ``k`` on one integrated grid."""
    x = model_inputs(grid, known_pos, model.strides, model.levels, step.lattice)
    logits = model.logits(k, x).data[0].astype(np.float64)
    return T.softmax(logits, axis=1)


def step_tables(model: ContextModel, k: int, grid: np.ndarray, known_pos: np.ndarray, step: Step):
    """Coding order (y, x, c) and fixed-point tables for one step."""
    probs = step_probabilities(model, k, grid, known_pos, step)
    coded = step_coded(step, model.strides)
    c_idx, ys, xs = np.nonzero(coded)
    order = np.lexsort((c_idx, xs, ys))
    c_idx, ys, xs = c_idx[order], ys[order], xs[order]
    l = step.lattice
    p = probs[c_idx, :, ys // l, xs // l]
    return ys, xs, c_idx, quantize_probs(p) if len(p) else np.zeros((0, model.levels + 1), np.int64)


def seed_order(schedule: GridSchedule, strides: np.ndarray):
    coded = owner_mask(strides, schedule.height, schedule.width) & schedule.seed[None]
    c_idx, ys, xs = np.nonzero(coded)
    order = np.lexsort((c_idx, xs, ys))
    return ys[order], xs[order], c_idx[order]


# ---------------------------------------------------------------------------
# coding


def _check_dims(schedule: GridSchedule, grid_shape) -> None:
    if tuple(grid_shape[-2:]) != (schedule.height, schedule.width):
        raise ScheduleError(f"schedule is for {schedule.height}x{schedule.width}, features are {tuple(grid_shape[-2:])}")


def _walk(imap: IntegratedFeatureMap, model: ContextModel, hist: BaseHistogram, schedule: GridSchedule):
    """Yield (symbols, tables) per coding stage for known features."""
    _check_dims(schedule, imap.grid.shape)
    ys, xs, cs = seed_order(schedule, imap.strides)
    yield imap.grid[cs, ys, xs], hist.tables()[cs]
    for k, step in zip(schedule.model_indices, schedule.steps):
        ys, xs, cs, tables = step_tables(model, k, imap.grid, step.known, step)
        yield imap.grid[cs, ys, xs], tables


def encode_features(features: Sequence[np.ndarray], model: ContextModel, hist: BaseHistogram, schedule: GridSchedule) -> bytes:
    imap = integrate(features)
    enc = RangeEncoder()
    for symbols, tables in _walk(imap, model, hist, schedule):
        for s, cdf in zip(symbols.tolist(), tables.tolist()):
            enc.encode(s, cdf)
    return enc.finish()


def factorized_logprob(features: Sequence[np.ndarray], model: ContextModel, hist: BaseHistogram, schedule: GridSchedule) -> float:
    """Ideal code length in bits, sum of -log2 p_hat over every coded symbol."""
    imap = integrate(features)
    bits = 0.0
    for symbols, tables in _walk(imap, model, hist, schedule):
        if len(symbols):
            mass = tables[np.arange(len(symbols)), symbols + 1] - tables[np.arange(len(symbols)), symbols]
            bits -= float(np.log2(mass / 65536.0).sum())
    return bits


def decode_features(
    data: bytes,
    model: ContextModel,
    hist: BaseHistogram,
    schedule: GridSchedule,
    channels: Sequence[int],
) -> list[np.ndarray]:
    """Exact inverse of ``encode_features``; raises CorruptStreamError on bad input."""
    strides, _ = channel_layout(channels)
    grid = np.zeros((len(strides), schedule.height, schedule.width), dtype=np.int64)
    dec = RangeDecoder(data)

    def place(ys, xs, cs, tables):
        for y, x, c, cdf in zip(ys.tolist(), xs.tolist(), cs.tolist(), tables.tolist()):
            t = int(strides[c])
            grid[c, y : y + t, x : x + t] = dec.decode(cdf)

    ys, xs, cs = seed_order(schedule, strides)
    place(ys, xs, cs, hist.tables()[cs])
    for k, step in zip(schedule.model_indices, schedule.steps):
        place(*step_tables(model, k, grid, step.known, step))
    dec.finish()
    return split(grid, channels)


# ---------------------------------------------------------------------------
# training


@dataclass
class CoderTrainLog:
    updates: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    lr_scale: list[float] = field(default_factory=list)


class _StepBatcher:
    """Precomputed masks for training one step model on fixed-size grids."""

    def __init__(self, step: Step, strides: np.ndarray):
        self.step = step
        self.weight = step_coded(step, strides)[:, :: step.lattice, :: step.lattice]
        self.count = int(self.weight.sum())

    def loss(self, model: ContextModel, k: int, grids: np.ndarray) -> T.Tensor:
        known = np.broadcast_to(self.step.known, (len(grids),) + self.step.known.shape)
        x = model_inputs(grids, known, model.strides, model.levels, self.step.lattice)
        logits = model.steps[k](T.Tensor(x))
        l = self.step.lattice
        targets = grids[:, :, ::l, ::l]
        weight = np.broadcast_to(self.weight, targets.shape)
        return T.cross_entropy_bits(logits, targets, weight) * (1.0 / (self.count * len(grids)))


def coded_bits_per_element(
    feature_sets: Sequence[Sequence[np.ndarray]], model: ContextModel, hist: BaseHistogram, schedule: GridSchedule
) -> float:
    bits = sum(factorized_logprob(fs, model, hist, schedule) for fs in feature_sets)
    elements = sum(f.size for fs in feature_sets for f in fs)
    return bits / max(elements, 1)


def train_context_model(
    feature_sets: Sequence[Sequence[np.ndarray]],
    levels: int,
    blocks: int,
    updates: int = 2000,
    batch: int = 6,
    width: int = 32,
    lr: float = 1e-3,
    decay_start: float = 0.75,
    seed: int = 0,
    model: ContextModel | None = None,
    hist: BaseHistogram | None = None,
    state: AdamState | None = None,
    start: int = 0,
    log: CoderTrainLog | None = None,
    stop: int | None = None,
) -> tuple[ContextModel, BaseHistogram, AdamState, CoderTrainLog]:
    """Fit one model per step by minimising the per-step cross-entropy in bits.

    All training feature sets must share one shape. Passing ``model``,
    ``hist``, ``state`` and ``start`` resumes an earlier run exactly; ``stop``
    ends a run early without changing the learning-rate schedule.
    """
    channels = [f.shape[0] for f in feature_sets[0]]
    grids = np.stack([integrate(fs).grid for fs in feature_sets])
    _, _, h, w = grids.shape
    schedule = build_schedule(h, w, blocks)
    if hist is None:
        hist = fit_histogram(feature_sets, levels)
    if model is None:
        model = ContextModel(channels, levels, blocks, width, seed)
        model.set_prior(hist)
    state = state or AdamState(alpha=lr)
    log = log or CoderTrainLog()
    batchers = [_StepBatcher(step, model.strides) for step in schedule.steps]
    params = model.parameters()
    for update in range(start + 1, (updates if stop is None else stop) + 1):
        rng = np.random.default_rng([seed, 1, update])
        idx = rng.choice(len(grids), size=min(batch, len(grids)), replace=len(grids) < batch)
        batch_grids = grids[idx]
        total = 0.0
        for k, b in enumerate(batchers):
            if b.count == 0:
                continue
            loss = b.loss(model, k, batch_grids)
            loss.backward()
            total += loss.item()
        if not math.isfinite(total):
            raise FloatingPointError(f"non-finite context-model loss at update {update}")
        scale = linear_decay(update, updates, decay_start)
        adam_step(params, state, scale)
        log.updates.append(update)
        log.loss.append(total)
        log.lr_scale.append(scale)
    return model, hist, state, log


def drop_last_blocks(schedule: GridSchedule, model: ContextModel, n: int = 2) -> tuple[GridSchedule, ContextModel]:
    """Test-time variant without the ``n`` coarsest step models.

    The models themselves are kept; the returned schedule simply starts at
    step ``n`` with a denser histogram-coded seed grid.
    """
    return drop_schedule(schedule, n), model


__all__ = [
    "BaseHistogram",
    "ContextModel",
    "CorruptStreamError",
    "GridSchedule",
    "IntegratedFeatureMap",
    "ScheduleError",
    "build_schedule",
    "decode_features",
    "drop_last_blocks",
    "encode_features",
    "factorized_logprob",
    "integrate",
    "split",
    "step_probabilities",
    "train_context_model",
]
