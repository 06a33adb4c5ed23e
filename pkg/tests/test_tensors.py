import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrig.tensors import (
    ByteOrder,
    Dtype,
    MalformedTensor,
    ModelState,
    SerializedTensor,
    Tensor,
    UnsupportedDtype,
    decode_tensor,
    element_count,
    encode_tensor,
)


def t(name, shape, values):
    return Tensor(name=name, shape=tuple(shape), values=np.asarray(values, dtype=np.float32))


class TestEncode:
    def test_empty_tensor_has_empty_data(self):
        s = encode_tensor(t("w", [0], []))
        assert s.data == b""
        assert s.shape == (0,)

    def test_known_little_endian_bit_patterns(self):
        # oracle: IEEE-754 single precision via struct, computed independently
        expected = struct.pack("<f", 1.0) + struct.pack("<f", 2.0)
        assert expected == bytes.fromhex("0000803f00000040")
        s = encode_tensor(t("b", [2], [1.0, 2.0]), ByteOrder.LITTLE)
        assert s.data == expected

    def test_known_big_endian_bit_pattern(self):
        s = encode_tensor(t("x", [1], [1.0]), ByteOrder.BIG)
        assert s.data == bytes.fromhex("3f800000")
        assert decode_tensor(s).values[0] == 1.0

    def test_deterministic(self):
        a = encode_tensor(t("w", [2, 3], range(6)))
        b = encode_tensor(t("w", [2, 3], range(6)))
        assert a == b

    def test_scalar_shape_holds_one_element(self):
        s = encode_tensor(t("s", [], [7.25]))
        assert len(s.data) == 4
        assert decode_tensor(s) == t("s", [], [7.25])


class TestDecode:
    def test_roundtrip_2x3(self):
        x = t("m", [2, 3], [1, 2, 3, 4, 5, 6])
        assert decode_tensor(encode_tensor(x)) == x

    def test_length_mismatch_rejected(self):
        s = SerializedTensor("w", Dtype.F32, ByteOrder.LITTLE, (3,), b"\x00" * 8)
        with pytest.raises(MalformedTensor):
            decode_tensor(s)

    def test_unknown_dtype_rejected(self):
        s = SerializedTensor("w", "F64", ByteOrder.LITTLE, (1,), b"\x00" * 8)
        with pytest.raises(UnsupportedDtype):
            decode_tensor(s)

    def test_nan_and_inf_survive(self):
        x = t("specials", [4], [float("nan"), float("inf"), -float("inf"), -0.0])
        for order in ByteOrder:
            back = decode_tensor(encode_tensor(x, order))
            assert back == x  # bit-exact, NaN included

    def test_nan_payload_preserved(self):
        payload = np.array([0x7FC00123], dtype=np.uint32).view(np.float32)
        x = t("nan", [1], payload)
        for order in ByteOrder:
            back = decode_tensor(encode_tensor(x, order))
            assert back.values.view(np.uint32)[0] == 0x7FC00123


shapes = st.lists(st.integers(min_value=0, max_value=6), min_size=0, max_size=4)


@st.composite
def tensors(draw):
    shape = tuple(draw(shapes))
    n = element_count(shape)
    bits = draw(
        st.lists(st.integers(min_value=0, max_value=2**32 - 1), min_size=n, max_size=n)
    )
    values = np.array(bits, dtype=np.uint32).view(np.float32)
    name = draw(st.text(min_size=1, max_size=12))
    return Tensor(name=name, shape=shape, values=values)


class TestProperties:
    @settings(max_examples=150, deadline=None)
    @given(tensors(), st.sampled_from(list(ByteOrder)))
    def test_roundtrip_any_bits_both_orders(self, x, order):
        assert decode_tensor(encode_tensor(x, order)) == x

    @settings(max_examples=60, deadline=None)
    @given(tensors())
    def test_cross_order_equivalence(self, x):
        le = decode_tensor(encode_tensor(x, ByteOrder.LITTLE))
        be = decode_tensor(encode_tensor(x, ByteOrder.BIG))
        assert le.values.tobytes() == be.values.tobytes()


class TestInvariants:
    def test_name_must_be_nonempty(self):
        with pytest.raises(ValueError):
            t("", [1], [0.0])

    def test_negative_dimension_rejected(self):
        with pytest.raises(ValueError):
            t("w", [-1], [])

    def test_value_count_must_fill_shape(self):
        with pytest.raises(ValueError):
            t("w", [2, 2], [1.0, 2.0, 3.0])

    def test_element_count_of_empty_shape(self):
        assert element_count(()) == 1
        assert math.prod(()) == 1


class TestModelState:
    def test_distinct_names_enforced(self):
        a = encode_tensor(t("w", [1], [1.0]))
        with pytest.raises(ValueError):
            ModelState(version=0, tensors=[a, a])

    def test_negative_version_rejected(self):
        with pytest.raises(ValueError):
            ModelState(version=-1, tensors=[])

    def test_order_preserved(self):
        parts = [encode_tensor(t(f"t{i}", [1], [float(i)])) for i in range(5)]
        m = ModelState(version=0, tensors=parts)
        assert [x.name for x in m.tensors] == [f"t{i}" for i in range(5)]
        assert m.total_elements() == 5
