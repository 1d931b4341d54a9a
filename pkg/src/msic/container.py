"""The .msic file format: a fixed little-endian header followed by the payload.

=======  ==========  ==================================
offset   type        field
=======  ==========  ==================================
0        4 bytes     magic ``MSIC``
4        u8          format version
5        u16 x 2     original height, width
9        u16 x 2     padded height, width
13       u8          M (number of quantized scales)
14       u8 x M      channels per scale
14+M     u8 x 3      N, K, dropped blocks
17+M     8 bytes     model identifier
25+M     u32         payload length
29+M     ...         range-coded payload
=======  ==========  ==================================
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .blob import FormatError

MAGIC = b"MSIC"
VERSION = 1


class CorruptContainerError(FormatError):
    """The container is truncated or its lengths are inconsistent."""


@dataclass(frozen=True)
class Header:
    height: int
    width: int
    padded_height: int
    padded_width: int
    channels: tuple[int, ...]
    N: int
    K: int
    dropped: int
    model_id: bytes
    payload_length: int
    version: int = VERSION

    @property
    def M(self) -> int:
        return len(self.channels)

    def validate(self) -> None:
        for name in ("height", "width", "padded_height", "padded_width"):
            v = getattr(self, name)
            if not 0 <= v <= 0xFFFF:
                raise FormatError(f"{name}={v} does not fit in u16")
        if self.padded_height < self.height or self.padded_width < self.width:
            raise FormatError("padded dims must not be smaller than the original dims")
        if not 1 <= len(self.channels) <= 255:
            raise FormatError("M must be between 1 and 255")
        for v in (*self.channels, self.N, self.K, self.dropped, self.version):
            if not 0 <= v <= 255:
                raise FormatError(f"value {v} does not fit in u8")
        if len(self.model_id) != 8:
            raise FormatError("model identifier must be 8 bytes")
        if not 0 <= self.payload_length <= 0xFFFFFFFF:
            raise FormatError("payload length does not fit in u32")

    def size(self) -> int:
        return 29 + self.M


@dataclass(frozen=True)
class CompressedImage:
    header: Header
    payload: bytes


def write_container(header: Header, payload: bytes) -> bytes:
    header.validate()
    if header.payload_length != len(payload):
        raise FormatError(f"header declares {header.payload_length} payload bytes, got {len(payload)}")
    parts = [
        MAGIC,
        struct.pack("<BHHHHB", header.version, header.height, header.width, header.padded_height, header.padded_width, header.M),
        bytes(header.channels),
        struct.pack("<BBB", header.N, header.K, header.dropped),
        header.model_id,
        struct.pack("<I", header.payload_length),
        payload,
    ]
    return b"".join(parts)


def read_container(data: bytes) -> CompressedImage:
    data = bytes(data)
    if len(data) < 14:
        raise CorruptContainerError("file too short for a header")
    if data[:4] != MAGIC:
        raise FormatError("not an MSIC file (bad magic)")
    version, h, w, ph, pw, m = struct.unpack_from("<BHHHHB", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if m == 0:
        raise FormatError("header declares zero scales")
    end = 29 + m
    if len(data) < end:
        raise CorruptContainerError("file too short for its header")
    channels = tuple(data[14 : 14 + m])
    n, k, dropped = struct.unpack_from("<BBB", data, 14 + m)
    model_id = data[17 + m : 25 + m]
    (length,) = struct.unpack_from("<I", data, 25 + m)
    payload = data[end:]
    if len(payload) != length:
        raise CorruptContainerError(f"header declares {length} payload bytes, file has {len(payload)}")
    header = Header(h, w, ph, pw, channels, n, k, dropped, model_id, length, version)
    try:
        header.validate()
    except FormatError as exc:
        raise FormatError(f"invalid header: {exc}") from None
    return CompressedImage(header, payload)
