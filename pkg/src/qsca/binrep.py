"""Bit-exact value encodings: two's complement integers, IEEE 754 single
precision floats, Hamming weight and distance.

Bit index 0 is the least significant bit everywhere in this library. Display
strings follow the usual written order (most significant bit first), so
``encode_twos_complement(7, 4)`` prints as ``"0111"``.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

from .errors import DimensionError, RangeError, UnsupportedEncodingError

MAX_WIDTH = 64


class BitVector:
    """Immutable fixed-width vector of bits, LSB at index 0."""

    __slots__ = ("bits",)

    def __init__(self, bits: Iterable[int]):
        bits = tuple(int(b) for b in bits)
        if not 1 <= len(bits) <= MAX_WIDTH:
            raise DimensionError(f"width must be in [1, {MAX_WIDTH}], got {len(bits)}")
        if any(b not in (0, 1) for b in bits):
            raise ValueError("bits must all be 0 or 1")
        object.__setattr__(self, "bits", bits)

    def __setattr__(self, name, value):
        raise AttributeError("BitVector is immutable")

    @property
    def width(self) -> int:
        return len(self.bits)

    @classmethod
    def from_unsigned(cls, pattern: int, width: int) -> "BitVector":
        """Build from the unsigned integer whose binary expansion is the bits."""
        if not 1 <= width <= MAX_WIDTH:
            raise DimensionError(f"width must be in [1, {MAX_WIDTH}], got {width}")
        if not 0 <= pattern < (1 << width):
            raise RangeError(f"pattern {pattern} does not fit in {width} bits")
        return cls((pattern >> i) & 1 for i in range(width))

    @classmethod
    def from_string(cls, text: str) -> "BitVector":
        """Parse a written bit string, most significant bit first."""
        return cls(int(c) for c in reversed(text.strip()))

    def to_unsigned(self) -> int:
        value = 0
        for i, b in enumerate(self.bits):
            value |= b << i
        return value

    def __eq__(self, other) -> bool:
        return isinstance(other, BitVector) and self.bits == other.bits

    def __hash__(self) -> int:
        return hash(self.bits)

    def __str__(self) -> str:
        return "".join(str(b) for b in reversed(self.bits))

    def __repr__(self) -> str:
        return f"BitVector('{self}')"


def encode_twos_complement(value: int, width: int) -> BitVector:
    """Encode a signed integer in ``width``-bit two's complement."""
    value = int(value)
    lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
    if not lo <= value <= hi:
        raise RangeError(
            f"value {value} is outside the {width}-bit two's complement "
            f"range [{lo}, {hi}]"
        )
    return BitVector.from_unsigned(value & ((1 << width) - 1), width)


def decode_twos_complement(bv: BitVector) -> int:
    """Exact inverse of :func:`encode_twos_complement` at the same width."""
    raw = bv.to_unsigned()
    if bv.bits[bv.width - 1]:
        raw -= 1 << bv.width
    return raw


def decode_ieee754_single(bv: BitVector) -> float:
    """Decode a 32-bit pattern as an IEEE 754 single precision number.

    Only normal numbers and the all-zero pattern (positive zero) are
    accepted; denormals, infinities, and NaNs raise
    :class:`UnsupportedEncodingError`. The returned double is exact, since
    every single precision value is representable in double precision.
    """
    if bv.width != 32:
        raise DimensionError(f"expected a 32-bit vector, got width {bv.width}")
    raw = bv.to_unsigned()
    if raw == 0:
        return 0.0
    sign = (raw >> 31) & 1
    exponent = (raw >> 23) & 0xFF
    mantissa = raw & 0x7FFFFF
    if exponent == 0:
        raise UnsupportedEncodingError(
            f"denormal pattern {bv} is outside the supported encoding subset"
        )
    if exponent == 0xFF:
        kind = "NaN" if mantissa else "infinity"
        raise UnsupportedEncodingError(
            f"{kind} pattern {bv} is outside the supported encoding subset"
        )
    magnitude = math.ldexp(1.0 + mantissa / float(1 << 23), exponent - 127)
    return -magnitude if sign else magnitude


def hamming_weight(bv: BitVector) -> int:
    """Number of 1-bits."""
    return sum(bv.bits)


def hamming_distance(a: BitVector, b: BitVector) -> int:
    """Number of positions where two same-width vectors differ."""
    if a.width != b.width:
        raise DimensionError(f"width mismatch: {a.width} vs {b.width}")
    return sum(x ^ y for x, y in zip(a.bits, b.bits))


def bit_column(values: Sequence[int], bit: int, width: int):
    """The ``bit``-th bit of each value's two's complement pattern, as 0/1."""
    import numpy as np

    arr = np.asarray(values, dtype=np.int64)
    return ((arr & ((1 << width) - 1)) >> bit) & 1
