"""End-to-end codec: model files, image compression and decompression."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autoencoder import Autoencoder, CodecConfig, TrainLog, TrainSchedule, random_crops, reflect_pad, train_autoencoder
from .blob import FormatError, checksum64, fill_arrays, read_checkpoint, write_checkpoint
from .container import Header, read_container, write_container
from .lossless import (
    BaseHistogram,
    ContextModel,
    build_schedule,
    decode_features,
    drop_schedule,
    encode_features,
    factorized_logprob,
    train_context_model,
)
from .optim import AdamState

MODEL_FORMAT = "msic-model"


class ModelMismatchError(ValueError):
    """The container was produced by a different model or configuration."""


@dataclass(frozen=True)
class CoderSchedule:
    updates: int = 2000
    batch: int = 6
    crop: int = 64
    lr: float = 1e-3
    decay_start: float = 0.75
    seed: int = 0


SCHEDULE_KEYS = {
    "updates": ("ae", "updates"),
    "batch": ("ae", "batch"),
    "crop": ("ae", "crop"),
    "lr": ("ae", "lr"),
    "decay_start": ("ae", "decay_start"),
    "coder_updates": ("coder", "updates"),
    "coder_batch": ("coder", "batch"),
    "coder_crop": ("coder", "crop"),
    "coder_lr": ("coder", "lr"),
    "coder_decay_start": ("coder", "decay_start"),
}


def parse_config(values: dict[str, str], seed: int = 0) -> tuple[CodecConfig, TrainSchedule, CoderSchedule]:
    """Split a key=value mapping into codec config and the two training schedules."""
    known = {f.name for f in dataclasses.fields(CodecConfig)} | set(SCHEDULE_KEYS)
    unknown = set(values) - known - {"format", "stage", "updates_done", "adam_step"}
    if unknown:
        raise FormatError(f"unknown config keys: {', '.join(sorted(unknown))}")
    config = CodecConfig.from_header(values)
    ae_kw: dict[str, object] = {"seed": seed}
    coder_kw: dict[str, object] = {"seed": seed}
    for key, (stage, name) in SCHEDULE_KEYS.items():
        if key in values:
            cast = float if name in ("lr", "decay_start") else int
            (ae_kw if stage == "ae" else coder_kw)[name] = cast(values[key])
    return config, TrainSchedule(**ae_kw), CoderSchedule(**coder_kw)


@dataclass
class Codec:
    config: CodecConfig
    ae: Autoencoder
    coder: ContextModel | None = None
    hist: BaseHistogram | None = None
    optimizer: AdamState | None = None
    updates_done: int = 0
    meta: dict[str, str] = field(default_factory=dict)

    @classmethod
    def create(cls, config: CodecConfig, seed: int = 0) -> "Codec":
        return cls(config, Autoencoder(config, seed))

    @property
    def stage(self) -> str:
        return "full" if self.coder is not None else "ae"

    # -- serialisation -----------------------------------------------------------
    def _arrays(self) -> list[np.ndarray]:
        arrays = self.ae.state_arrays()
        if self.coder is not None:
            arrays.append(self.hist.counts.astype(np.float32))
            arrays += [p.data for p in self.coder.parameters()]
        if self.optimizer is not None and self.optimizer.m:
            arrays += self.optimizer.m + self.optimizer.v
        return arrays

    def to_bytes(self) -> bytes:
        header: dict[str, object] = {"format": MODEL_FORMAT, "stage": self.stage}
        header.update(self.config.to_header())
        header.update(self.meta)
        if self.optimizer is not None and self.optimizer.m:
            header["updates_done"] = self.updates_done
            header["adam_step"] = self.optimizer.step
        return write_checkpoint(header, self._arrays())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Codec":
        header, flat = read_checkpoint(data)
        if header.get("format") != MODEL_FORMAT:
            raise FormatError("not an msic model file")
        config = CodecConfig.from_header(header)
        codec = cls.create(config)
        targets = codec.ae.state_arrays()
        if header.get("stage") == "full":
            codec.coder = ContextModel(config.channels, config.N, config.K, config.coder_width)
            codec.hist = BaseHistogram(np.zeros((sum(config.channels), config.N), dtype=np.float32))
            targets.append(codec.hist.counts)
            targets += [p.data for p in codec.coder.parameters()]
        elif header.get("stage") != "ae":
            raise FormatError(f"unknown model stage {header.get('stage')!r}")
        if "adam_step" in header:
            trained = codec.coder.parameters() if codec.coder is not None else codec.ae.parameters()
            codec.optimizer = AdamState(step=int(header["adam_step"]))
            codec.optimizer.ensure(trained)
            targets += codec.optimizer.m + codec.optimizer.v
            codec.updates_done = int(header["updates_done"])
        fill_arrays(flat, targets)
        if codec.hist is not None:
            codec.hist = BaseHistogram(np.rint(codec.hist.counts).astype(np.int64))
        skip = {"format", "stage", "updates_done", "adam_step"} | {f.name for f in dataclasses.fields(CodecConfig)}
        codec.meta = {k: v for k, v in header.items() if k not in skip}
        return codec

    @property
    def model_id(self) -> bytes:
        return checksum64(self.to_bytes())

    # -- coding ------------------------------------------------------------------
    def _require_coder(self) -> None:
        if self.coder is None:
            raise ModelMismatchError("model has no trained lossless coder (run the coder training stage)")

    def schedule(self, height: int, width: int, drop: int = 0):
        return drop_schedule(build_schedule(height, width, self.config.K), drop)

    def features(self, image: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        padded = reflect_pad(np.asarray(image, dtype=np.float32), self.config.pad_multiple)
        return padded, self.ae.encode_levels(padded)

    def compress(self, image: np.ndarray, drop: int = 0) -> bytes:
        """Container bytes for a (3, H, W) image in [0, 1]."""
        self._require_coder()
        _, h, w = image.shape
        padded, levels = self.features(image)
        schedule = self.schedule(*levels[0].shape[1:], drop)
        payload = encode_features(levels, self.coder, self.hist, schedule)
        header = Header(
            h, w, padded.shape[1], padded.shape[2], self.config.channels, self.config.N, self.config.K, drop, self.model_id, len(payload)
        )
        return write_container(header, payload)

    def decompress_levels(self, data: bytes) -> tuple[Header, list[np.ndarray]]:
        self._require_coder()
        ci = read_container(data)
        hd = ci.header
        if hd.model_id != self.model_id:
            raise ModelMismatchError("file was produced by a different model")
        cfg = self.config
        if hd.channels != cfg.channels or hd.N != cfg.N or hd.K != cfg.K:
            raise ModelMismatchError("file configuration does not match the model")
        m = cfg.pad_multiple
        if hd.padded_height % m or hd.padded_width % m or hd.padded_height - hd.height >= m or hd.padded_width - hd.width >= m:
            raise FormatError("inconsistent padded dimensions in header")
        if hd.dropped % 2 or hd.dropped > cfg.K:
            raise FormatError(f"invalid dropped-block count {hd.dropped}")
        shapes = cfg.feature_shapes(hd.padded_height, hd.padded_width)
        schedule = self.schedule(shapes[0][1], shapes[0][2], hd.dropped)
        levels = decode_features(ci.payload, self.coder, self.hist, schedule, cfg.channels)
        return hd, levels

    def decompress(self, data: bytes) -> np.ndarray:
        hd, levels = self.decompress_levels(data)
        return self.ae.decode_levels(levels)[:, : hd.height, : hd.width]

    def reconstruct(self, image: np.ndarray) -> np.ndarray:
        """In-process analyze, quantize, synthesize without the file boundary."""
        _, h, w = image.shape
        _, levels = self.features(image)
        return self.ae.decode_levels(levels)[:, :h, :w]

    def rate_bits(self, image: np.ndarray, drop: int = 0) -> float:
        self._require_coder()
        _, levels = self.features(image)
        return factorized_logprob(levels, self.coder, self.hist, self.schedule(*levels[0].shape[1:], drop))


def train_ae_stage(
    images: Sequence[np.ndarray],
    config: CodecConfig,
    schedule: TrainSchedule,
    resume: Codec | None = None,
    stop: int | None = None,
) -> tuple[Codec, TrainLog]:
    """First training step: the autoencoder alone, on distortion."""
    if resume is not None:
        if resume.stage != "ae":
            raise ModelMismatchError("resume checkpoint is not an autoencoder-stage model")
        if resume.config != config:
            raise ModelMismatchError("resume checkpoint has a different configuration")
        codec = resume
        codec.coder = codec.hist = None
    else:
        codec = Codec.create(config, schedule.seed)
    ae, state, log = train_autoencoder(
        images,
        config,
        schedule,
        model=codec.ae,
        state=codec.optimizer if resume else None,
        start=codec.updates_done if resume else 0,
        stop=stop,
    )
    codec.optimizer = state
    codec.updates_done = schedule.updates if stop is None else stop
    return codec, log


def coder_training_features(codec: Codec, images: Sequence[np.ndarray], crop: int, count: int, seed: int) -> list[list[np.ndarray]]:
    """Quantized features of random crops, computed with the frozen autoencoder."""
    rng = np.random.default_rng([seed, 2])
    crops = random_crops(images, crop, count, rng)
    return [codec.ae.encode_levels(c) for c in crops]


def train_coder_stage(
    codec: Codec,
    images: Sequence[np.ndarray],
    schedule: CoderSchedule,
    resume: Codec | None = None,
    crops: int | None = None,
    stop: int | None = None,
):
    """Second training step: fit the context models with the autoencoder frozen."""
    if schedule.crop % codec.config.pad_multiple:
        raise ValueError(f"coder crop {schedule.crop} must be a multiple of {codec.config.pad_multiple}")
    feature_sets = coder_training_features(codec, images, schedule.crop, crops or max(4 * len(images), 64), schedule.seed)
    kwargs = {}
    if resume is not None:
        if resume.coder is None or resume.optimizer is None:
            raise ModelMismatchError("resume checkpoint has no coder training state")
        kwargs = dict(model=resume.coder, hist=resume.hist, state=resume.optimizer, start=resume.updates_done)
    model, hist, state, log = train_context_model(
        feature_sets,
        codec.config.N,
        codec.config.K,
        updates=schedule.updates,
        batch=schedule.batch,
        width=codec.config.coder_width,
        lr=schedule.lr,
        decay_start=schedule.decay_start,
        seed=schedule.seed,
        stop=stop,
        **kwargs,
    )
    done = schedule.updates if stop is None else stop
    # counts are stored as f32; round now so the in-memory codec matches a reloaded one
    hist = BaseHistogram(hist.counts.astype(np.float32).astype(np.int64))
    full = Codec(codec.config, codec.ae, model, hist, state, done, dict(codec.meta))
    return full, log
