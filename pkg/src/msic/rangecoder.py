"""Integer range coder driven by 16-bit fixed-point CDF tables.

The coder keeps a 32-bit ``low``/``range`` window and renormalises a byte
at a time once ``range`` drops below 2**24. Sub-interval bounds are
``(range * cdf[s]) >> 16`` computed with exact integer products, so the only
coding loss is the flooring of those bounds (under 2**-8 of a symbol's
interval, typically far less). Termination emits the fewest bytes that pin a
value inside the final interval; the decoder reads zeros past the end.

The decoder re-encodes what it decodes and ``finish`` compares the result
with the input, which catches truncated or altered streams.
"""

from __future__ import annotations

import math
from bisect import bisect_right

import numpy as np

PROB_BITS = 16
PROB_ONE = 1 << PROB_BITS
_TOP = 1 << 32
_RENORM = 1 << 24
_MASK = _TOP - 1


class CorruptStreamError(ValueError):
    """The byte stream is not a valid encoding for the given tables."""


def check_table(cdf) -> None:
    c = [int(v) for v in cdf]
    if len(c) < 2 or c[0] != 0 or c[-1] != PROB_ONE:
        raise ValueError("cdf must start at 0 and end at 2**16")
    if any(b <= a for a, b in zip(c, c[1:])):
        raise ValueError("cdf must be strictly increasing")


def quantize_probs(p) -> np.ndarray:
    """Fixed-point CDFs (last axis N+1) for probability vectors (last axis N).

    Every symbol receives one unit up front; the remaining ``2**16 - N`` units
    are apportioned by largest remainder, ties going to the lower index.
    """
    p = np.asarray(p, dtype=np.float64)
    lead = p.shape[:-1]
    p = p.reshape(-1, p.shape[-1])
    n = p.shape[-1]
    if n > PROB_ONE:
        raise ValueError("too many symbols for 16-bit tables")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite and nonnegative")
    total = p.sum(axis=1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("probability vector sums to zero")
    spare = PROB_ONE - n
    scaled = p / total * spare
    base = np.floor(scaled).astype(np.int64)
    remainder = scaled - base
    short = spare - base.sum(axis=1)
    # rank 0 = largest remainder; stable sort keeps lower indices first on ties
    order = np.argsort(-remainder, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(n)[None, :].repeat(len(p), 0), axis=1)
    mass = 1 + base + (rank < short[:, None])
    # float rounding can leave the floors one unit high; take it from the largest mass
    over = mass.sum(axis=1) - PROB_ONE
    for row in np.nonzero(over)[0]:
        mass[row, np.argmax(mass[row])] -= over[row]
    cdf = np.zeros((len(p), n + 1), dtype=np.int64)
    np.cumsum(mass, axis=1, out=cdf[:, 1:])
    return cdf.reshape(*lead, n + 1)


def uniform_table(n: int) -> np.ndarray:
    return quantize_probs(np.full(n, 1.0 / n))


def table_probs(cdf) -> np.ndarray:
    return np.diff(np.asarray(cdf, dtype=np.int64), axis=-1) / PROB_ONE


def self_information(symbols, tables) -> float:
    """Sum of -log2 p_hat(symbol) under fixed-point tables."""
    bits = 0.0
    for s, cdf in zip(symbols, tables):
        bits -= math.log2((int(cdf[s + 1]) - int(cdf[s])) / PROB_ONE)
    return bits


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.out = bytearray()

    def _carry(self) -> None:
        i = len(self.out) - 1
        while self.out[i] == 0xFF:
            self.out[i] = 0
            i -= 1
        self.out[i] += 1

    def encode(self, symbol: int, cdf) -> None:
        lo = (self.range * int(cdf[symbol])) >> PROB_BITS
        hi = (self.range * int(cdf[symbol + 1])) >> PROB_BITS
        self.low += lo
        self.range = hi - lo
        if self.low >= _TOP:
            self.low -= _TOP
            self._carry()
        while self.range < _RENORM:
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & _MASK
            self.range <<= 8

    def finish(self) -> bytes:
        """Shortest byte tail identifying a point in [low, low + range)."""
        for nbytes in range(5):
            unit = 1 << (32 - 8 * nbytes)
            value = -(-self.low // unit) * unit
            if value < self.low + self.range:
                break
        if value >= _TOP:
            value -= _TOP
            self._carry()
        for i in range(nbytes):
            self.out.append((value >> (24 - 8 * i)) & 0xFF)
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.range = _MASK
        self.offset = 0
        for _ in range(4):
            self.offset = (self.offset << 8) | self._next()
        self._mirror = RangeEncoder()

    def _next(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
        elif self.pos < len(self.data) + 4:
            b = 0
        else:
            raise CorruptStreamError("stream exhausted")
        self.pos += 1
        return b

    def decode(self, cdf) -> int:
        r = self.range
        offset = self.offset
        if offset >= r:
            raise CorruptStreamError("code value outside the coding interval")
        # largest s with (r * cdf[s]) >> 16 <= offset
        target = ((offset + 1) << PROB_BITS) - 1
        symbol = bisect_right(_ScaledView(cdf, r), target) - 1
        n = len(cdf) - 1
        if not 0 <= symbol < n:
            raise CorruptStreamError("code value maps to no symbol")
        lo = (r * int(cdf[symbol])) >> PROB_BITS
        hi = (r * int(cdf[symbol + 1])) >> PROB_BITS
        self.offset = offset - lo
        self.range = hi - lo
        while self.range < _RENORM:
            self.offset = (self.offset << 8) | self._next()
            self.range <<= 8
        self._mirror.encode(symbol, cdf)
        return symbol

    def finish(self) -> None:
        """Verify that the consumed symbols re-encode to exactly the input bytes."""
        if self._mirror.finish() != self.data:
            raise CorruptStreamError("stream does not match the decoded symbols (truncated or corrupted)")


class _ScaledView:
    """Read-only sequence of ``range * cdf[i]`` for bisection."""

    __slots__ = ("cdf", "r")

    def __init__(self, cdf, r):
        self.cdf = cdf
        self.r = r

    def __len__(self):
        return len(self.cdf)

    def __getitem__(self, i):
        return self.r * int(self.cdf[i])


def encode_symbols(symbols, tables) -> bytes:
    enc = RangeEncoder()
    for s, cdf in zip(symbols, tables):
        enc.encode(int(s), cdf)
    return enc.finish()


def decode_symbols(data: bytes, tables) -> list[int]:
    dec = RangeDecoder(data)
    out = [dec.decode(cdf) for cdf in tables]
    dec.finish()
    return out
