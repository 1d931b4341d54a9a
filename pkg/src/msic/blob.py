"""Model blob and checkpoint serialisation.

Blob layout (little-endian)::

    b"MSICMDL" | u16 version | u32 float count | float32 * count | 8-byte checksum

The checksum is BLAKE2b-64 over the float payload. A checkpoint is a
``key=value`` ASCII header, one pair per line, closed by an empty line and
followed by the blob.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Mapping, Sequence

import numpy as np

BLOB_MAGIC = b"MSICMDL"
BLOB_VERSION = 1
_PREFIX = struct.Struct("<7sHI")


class FormatError(ValueError):
    """Malformed or corrupted serialised data."""


def checksum64(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def pack_blob(arrays: Sequence[np.ndarray]) -> bytes:
    flat = np.concatenate([np.asarray(a, dtype="<f4").reshape(-1) for a in arrays]) if arrays else np.zeros(0, "<f4")
    payload = flat.astype("<f4").tobytes()
    return _PREFIX.pack(BLOB_MAGIC, BLOB_VERSION, flat.size) + payload + checksum64(payload)


def unpack_blob(data: bytes) -> np.ndarray:
    if len(data) < _PREFIX.size + 8:
        raise FormatError("model blob truncated")
    magic, version, count = _PREFIX.unpack_from(data)
    if magic != BLOB_MAGIC:
        raise FormatError("not a model blob (bad magic)")
    if version != BLOB_VERSION:
        raise FormatError(f"unsupported model blob version {version}")
    end = _PREFIX.size + 4 * count
    if len(data) != end + 8:
        raise FormatError("model blob length does not match its float count")
    payload = data[_PREFIX.size : end]
    if checksum64(payload) != data[end:]:
        raise FormatError("model blob checksum mismatch")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32)


def fill_arrays(flat: np.ndarray, targets: Sequence[np.ndarray]) -> None:
    """Copy a flat vector into ``targets`` in order; sizes must add up exactly."""
    total = sum(t.size for t in targets)
    if total != flat.size:
        raise FormatError(f"blob holds {flat.size} floats, model expects {total}")
    offset = 0
    for t in targets:
        t[...] = flat[offset : offset + t.size].reshape(t.shape)
        offset += t.size


def format_header(values: Mapping[str, object]) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        text = f"{key}={value}"
        if "\n" in text or not text.isascii():
            raise FormatError(f"header entry {key!r} is not single-line ASCII")
        lines.append(text)
    return "\n".join(lines) + "\n"


def parse_header(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"line {lineno}: expected key=value, got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def write_checkpoint(header: Mapping[str, object], arrays: Sequence[np.ndarray]) -> bytes:
    return format_header(header).encode("ascii") + b"\n" + pack_blob(arrays)


def read_checkpoint(data: bytes) -> tuple[dict[str, str], np.ndarray]:
    head, sep, blob = data.partition(b"\n\n")
    if not sep:
        raise FormatError("checkpoint has no header terminator")
    try:
        text = head.decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError("checkpoint header is not ASCII") from exc
    return parse_header(text), unpack_blob(blob)
