import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sdform.errors import CorruptionError, FormatError, ValidationError
from sdform.tensor_io import (
    WeightTensor,
    decode_container,
    decode_sdm1,
    encode_container,
    encode_sdm1,
    load_container,
    save_container,
)


def manifest_of(raw):
    (n,) = struct.unpack("<I", raw[4:8])
    return json.loads(raw[8:8 + n]), 8 + n


def test_identity_tensor_roundtrip(tmp_path):
    path = tmp_path / "eye.sdtc"
    save_container([WeightTensor.from_array("eye", np.eye(2))], path)
    (t,) = load_container(path)
    assert t.kind == "dense2d" and t.shape == (2, 2)
    assert np.array_equal(t.data, np.eye(2, dtype=np.float32))


def test_empty_container(tmp_path):
    path = tmp_path / "empty.sdtc"
    save_container([], path)
    assert load_container(path) == []


def test_fixed_length_for_scalar_tensor():
    raw = encode_container([WeightTensor.from_array("z", np.zeros((1, 1)))])
    assert raw == encode_container([WeightTensor.from_array("z", np.zeros((1, 1)))])
    _, head = manifest_of(raw)
    assert len(raw) == head + 4


def test_two_tensor_offsets():
    a = WeightTensor.from_array("a", np.ones((2, 3)))
    b = WeightTensor.from_array("b", np.ones((4, 1, 3, 3)))
    man, _ = manifest_of(encode_container([a, b]))
    first, second = man["tensors"]
    assert first["offset"] == 0 and second["offset"] == first["length"] == 24
    assert second["kind"] == "conv4d"


def test_duplicate_names_rejected():
    t = WeightTensor.from_array("x", np.ones((1, 1)))
    with pytest.raises(ValidationError):
        encode_container([t, t])


tensor_arrays = st.one_of(
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
               elements=st.floats(-1e6, 1e6, width=32)),
    st.integers(1, 4).flatmap(lambda k: hnp.arrays(
        np.float32, st.tuples(st.integers(1, 3), st.integers(1, 3), st.just(k), st.just(k)),
        elements=st.floats(-10, 10, width=32))),
)


@given(st.lists(tensor_arrays, max_size=4))
def test_roundtrip_is_bit_exact(arrays):
    tensors = [WeightTensor.from_array(f"t{i}", a, {"i": i}) for i, a in enumerate(arrays)]
    back = decode_container(encode_container(tensors, {"note": "x"}), with_meta=True)
    assert back[0] == tensors and back[1] == {"note": "x"}


def test_bad_magic():
    raw = encode_container([])
    with pytest.raises(FormatError, match="bad magic"):
        decode_container(b"XXXX" + raw[4:])


def test_offset_overflow_is_corruption():
    raw = encode_container([WeightTensor.from_array("a", np.ones((2, 2)))])
    man, head = manifest_of(raw)
    man["tensors"][0]["offset"] = 8
    body = json.dumps(man).encode()
    with pytest.raises(CorruptionError):
        decode_container(raw[:4] + struct.pack("<I", len(body)) + body + raw[head:])


def test_truncated_blob_is_corruption():
    raw = encode_container([WeightTensor.from_array("a", np.ones((2, 2)))])
    with pytest.raises(CorruptionError):
        decode_container(raw[:-1])
    with pytest.raises(CorruptionError):
        decode_container(raw[:6])


def test_nan_payload_is_validation_error():
    raw = bytearray(encode_container([WeightTensor.from_array("a", np.ones((1, 1)))]))
    raw[-4:] = struct.pack("<f", float("nan"))
    with pytest.raises(ValidationError, match="non-finite"):
        decode_container(bytes(raw))


def test_malformed_manifest_is_format_error():
    body = json.dumps({"version": 1, "tensors": [{"name": "a"}]}).encode()
    with pytest.raises(FormatError):
        decode_container(b"SDTC" + struct.pack("<I", len(body)) + body)


def test_weight_tensor_shape_checks():
    with pytest.raises(ValidationError):
        WeightTensor("c", "conv4d", (1, 1, 3, 2), np.zeros(6))
    with pytest.raises(ValidationError):
        WeightTensor.from_array("v", np.zeros(3))
    with pytest.raises(ValidationError):
        WeightTensor("d", "dense3d", (1, 1), np.zeros(1))


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        save_container([], tmp_path / "missing" / "x.sdtc")


def test_sdm1_framing():
    man = {"version": 1, "layers": [{"name": "a", "blocks": [{"offset": 0, "length": 3}], "dense": None}]}
    raw = encode_sdm1(man, b"abc")
    got, blob, head = decode_sdm1(raw)
    assert got == man and blob == b"abc" and head == len(raw) - 3
    with pytest.raises(CorruptionError):
        decode_sdm1(encode_sdm1(man, b"ab"))
    with pytest.raises(FormatError):
        decode_sdm1(raw.replace(b"SDM1", b"SDTC", 1))
