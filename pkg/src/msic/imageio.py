"""8-bit RGB PNG reading and writing."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .blob import FormatError


def decode_png(data: bytes) -> np.ndarray:
    """(3, H, W) float32 in [0, 1]; images with alpha are rejected."""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:  # PIL raises a zoo of exception types
        raise FormatError(f"cannot decode PNG: {exc}") from None
    if img.format != "PNG":
        raise FormatError(f"expected a PNG file, got {img.format}")
    if "A" in img.getbands() or "transparency" in img.info:
        raise FormatError("PNG images with an alpha channel are not supported")
    if img.mode not in ("RGB", "L", "P", "1"):
        raise FormatError(f"unsupported PNG mode {img.mode}; expected 8-bit RGB")
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_png(path) -> np.ndarray:
    return decode_png(Path(path).read_bytes())


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_png(image))


def list_pngs(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"corpus directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
