import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsca.binrep import (
    BitVector,
    decode_ieee754_single,
    decode_twos_complement,
    encode_twos_complement,
    hamming_distance,
    hamming_weight,
)
from qsca.errors import DimensionError, RangeError, UnsupportedEncodingError

# Width-4 encodings of -8..7.
WIDTH4_TABLE = {
    7: "0111", 6: "0110", 5: "0101", 4: "0100",
    3: "0011", 2: "0010", 1: "0001", 0: "0000",
    -1: "1111", -2: "1110", -3: "1101", -4: "1100",
    -5: "1011", -6: "1010", -7: "1001", -8: "1000",
}


class TestTwosComplement:
    def test_width4_table_exhaustive(self):
        for value, bits in WIDTH4_TABLE.items():
            assert str(encode_twos_complement(value, 4)) == bits
            assert decode_twos_complement(BitVector.from_string(bits)) == value

    def test_zero_is_all_zero(self):
        assert str(encode_twos_complement(0, 16)) == "0" * 16

    @pytest.mark.parametrize("width", [4, 8, 16])
    def test_round_trip_exhaustive(self, width):
        for value in range(-(1 << (width - 1)), 1 << (width - 1)):
            assert decode_twos_complement(encode_twos_complement(value, width)) == value

    def test_round_trip_width32_sampled(self, rng):
        values = rng.integers(-(1 << 31), 1 << 31, size=2000)
        for value in values:
            assert decode_twos_complement(encode_twos_complement(int(value), 32)) == value

    @given(st.integers(min_value=-(1 << 63), max_value=(1 << 63) - 1))
    def test_round_trip_width64(self, value):
        assert decode_twos_complement(encode_twos_complement(value, 64)) == value

    @pytest.mark.parametrize("value,width", [(8, 4), (-9, 4), (128, 8), (1 << 40, 32)])
    def test_out_of_range_names_value_and_width(self, value, width):
        with pytest.raises(RangeError) as err:
            encode_twos_complement(value, width)
        assert str(value) in str(err.value)
        assert str(width) in str(err.value)


class TestIeee754:
    WORKED_EXAMPLE = "01000001001101100000000000000000"

    def test_worked_example(self):
        assert decode_ieee754_single(BitVector.from_string(self.WORKED_EXAMPLE)) == 11.375

    def test_sign_symmetry(self):
        negated = "1" + self.WORKED_EXAMPLE[1:]
        assert decode_ieee754_single(BitVector.from_string(negated)) == -11.375

    def test_all_zero_is_zero(self):
        assert decode_ieee754_single(BitVector.from_unsigned(0, 32)) == 0.0

    @pytest.mark.parametrize(
        "pattern,kind",
        [
            (0x00000001, "denormal"),
            (0x007FFFFF, "denormal"),
            (0x7F800000, "infinity"),
            (0xFF800000, "infinity"),
            (0x7F800001, "NaN"),
            (0x7FC00000, "NaN"),
        ],
    )
    def test_special_patterns_rejected(self, pattern, kind):
        with pytest.raises(UnsupportedEncodingError):
            decode_ieee754_single(BitVector.from_unsigned(pattern, 32))

    def test_wrong_width_rejected(self):
        with pytest.raises(DimensionError):
            decode_ieee754_single(BitVector.from_unsigned(0, 16))

    def test_against_native_single_precision(self, rng):
        # Normal-range patterns only: exponent in 1..254.
        count = 0
        while count < 10_000:
            raw = int(rng.integers(0, 1 << 32))
            exponent = (raw >> 23) & 0xFF
            if exponent in (0, 0xFF):
                continue
            native = struct.unpack("<f", raw.to_bytes(4, "little"))[0]
            assert decode_ieee754_single(BitVector.from_unsigned(raw, 32)) == native
            count += 1


class TestHamming:
    def test_weight_anchors(self):
        assert hamming_weight(BitVector.from_string("110")) == 2
        assert hamming_weight(BitVector.from_string("000")) == 0
        assert hamming_weight(BitVector.from_string("110101")) == 4

    def test_distance_identical(self):
        x = BitVector.from_string("1011")
        assert hamming_distance(x, x) == 0

    def test_distance_full_flip(self):
        assert hamming_distance(BitVector.from_string("0000"), BitVector.from_string("1111")) == 4

    def test_distance_hand_enumerated(self):
        # 0111 xor 0101 = 0010 -> one differing position
        assert hamming_distance(BitVector.from_string("0111"), BitVector.from_string("0101")) == 1

    def test_distance_width_mismatch(self):
        with pytest.raises(DimensionError):
            hamming_distance(BitVector.from_string("01"), BitVector.from_string("011"))

    @given(
        st.integers(min_value=0, max_value=(1 << 16) - 1),
        st.integers(min_value=0, max_value=(1 << 16) - 1),
    )
    def test_distance_is_weight_of_xor(self, a, b):
        va = BitVector.from_unsigned(a, 16)
        vb = BitVector.from_unsigned(b, 16)
        assert hamming_distance(va, vb) == hamming_weight(BitVector.from_unsigned(a ^ b, 16))

    @given(st.integers(min_value=0, max_value=(1 << 24) - 1))
    def test_weight_plus_complement_weight_is_width(self, pattern):
        x = BitVector.from_unsigned(pattern, 24)
        complement = BitVector.from_unsigned(pattern ^ ((1 << 24) - 1), 24)
        assert hamming_weight(x) + hamming_weight(complement) == 24


class TestBitVector:
    def test_invariants(self):
        with pytest.raises(ValueError):
            BitVector([0, 2, 1])
        with pytest.raises(DimensionError):
            BitVector([])
        with pytest.raises(DimensionError):
            BitVector([0] * 65)

    def test_lsb_is_index_zero(self):
        bv = encode_twos_complement(1, 4)
        assert bv.bits[0] == 1 and bv.bits[1:] == (0, 0, 0)

    def test_immutable(self):
        bv = BitVector.from_string("101")
        with pytest.raises(AttributeError):
            bv.bits = (1, 1, 1)

    def test_string_round_trip(self):
        for text in ("0111", "1000", "1"):
            assert str(BitVector.from_string(text)) == text

    def test_unsigned_round_trip(self, rng):
        for _ in range(200):
            width = int(rng.integers(1, 65))
            pattern = int(rng.integers(0, 1 << width))
            assert BitVector.from_unsigned(pattern, width).to_unsigned() == pattern
