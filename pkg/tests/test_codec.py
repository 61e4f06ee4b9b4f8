import heapq
import math

import numpy as np
import pytest
from conftest import random_pow2
from hypothesis import given
from hypothesis import strategies as st

from sdform import codec
from sdform.decompose import SDConfig, SDForm, decompose_model
from sdform.errors import CorruptionError, FeasibilityError
from sdform.quant import ExponentSet, Pow2Matrix, quantize_basis
from sdform.tensor_io import decode_sdm1, encode_sdm1

P = ExponentSet()


def worked_example():
    return Pow2Matrix.from_values([[0.5, 0.0], [0.0, -0.5]], P)


def huffman_cost(freqs):
    """Classical optimal prefix-code cost: sum of all merged weights."""
    h = sorted(freqs)
    if len(h) == 1:
        return h[0]
    heapq.heapify(h)
    cost = 0
    while len(h) > 1:
        s = heapq.heappop(h) + heapq.heappop(h)
        cost += s
        heapq.heappush(h, s)
    return cost


def test_worked_example_bits(backend):
    bitmap, codebook, payload, nbits = codec.encode_coeff(worked_example(), P)
    assert bitmap == b"\x90"
    assert codebook == [(6, 1), (22, 1)]
    assert payload == b"\x40" and nbits == 2
    assert codec.decode_coeff(bitmap, codebook, payload, nbits, (2, 2), P) == worked_example()


def test_all_zero_matrix():
    bitmap, codebook, payload, nbits = codec.encode_coeff(Pow2Matrix.zeros((3, 3)), P)
    assert bitmap == b"\x00\x00" and codebook == [] and payload == b"" and nbits == 0
    assert codec.decode_coeff(bitmap, codebook, payload, 0, (3, 3), P) == Pow2Matrix.zeros((3, 3))


def test_textbook_lengths():
    assert codec.huffman_lengths({0: 2, 1: 1, 2: 1}) == {0: 1, 1: 2, 2: 2}
    assert codec.huffman_lengths({5: 9}) == {5: 1}
    assert codec.huffman_lengths({}) == {}


@given(st.dictionaries(st.integers(0, 31), st.integers(1, 1000), min_size=1, max_size=32))
def test_lengths_are_optimal_and_complete(freqs):
    lengths = codec.huffman_lengths(freqs)
    assert set(lengths) == set(freqs)
    assert sum(freqs[s] * lengths[s] for s in freqs) == huffman_cost(list(freqs.values()))
    kraft = sum(2.0 ** -ln for ln in lengths.values())
    assert kraft == (0.5 if len(freqs) == 1 else 1.0)


@given(st.dictionaries(st.integers(0, 31), st.integers(1, 8), min_size=1, max_size=32))
def test_canonical_codes_are_prefix_free(lengths):
    lengths = codec.huffman_lengths(lengths)
    codes = codec.canonical_codes(lengths)
    words = [format(c, f"0{ln}b") for c, ln in codes.values()]
    for a in words:
        for b in words:
            assert a == b or not b.startswith(a)


@given(st.integers(1, 20), st.integers(1, 5), st.floats(0, 1), st.integers(0, 2 ** 31), st.integers(-9, 2),
       st.integers(0, 15))
def test_coeff_roundtrip(m, r, density, seed, p_min, span):
    Pk = ExponentSet(p_min, p_min + span)
    ce = random_pow2(np.random.default_rng(seed), (m, r), Pk, density)
    enc = codec.encode_coeff(ce, Pk)
    assert codec.decode_coeff(*enc, (m, r), Pk) == ce


def test_infeasible_exponent_rejected():
    with pytest.raises(FeasibilityError):
        codec.encode_coeff(Pow2Matrix([[1]], [[2]]), P)


def test_truncated_and_trailing_payload():
    ce = random_pow2(np.random.default_rng(1), (10, 3))
    bitmap, codebook, payload, nbits = codec.encode_coeff(ce, P)
    with pytest.raises(CorruptionError):
        codec.decode_coeff(bitmap, codebook, payload[:-1], nbits - 8, (10, 3), P)
    with pytest.raises(CorruptionError):
        codec.decode_coeff(bitmap, codebook, payload + b"\x00", nbits + 8, (10, 3), P)
    if nbits % 8:
        bad = payload[:-1] + bytes([payload[-1] | 1])
        with pytest.raises(CorruptionError):
            codec.decode_coeff(bitmap, codebook, bad, nbits, (10, 3), P)


def test_bitmap_padding_must_be_zero():
    with pytest.raises(CorruptionError):
        codec.decode_coeff(b"\x91", [(6, 1), (22, 1)], b"\x40", 2, (2, 2), P)


def test_codebook_checks():
    with pytest.raises(CorruptionError):
        codec.decode_coeff(b"\x80", [(6, 1), (6, 1)], b"\x00", 1, (1, 1), P)
    with pytest.raises(CorruptionError):
        codec.decode_coeff(b"\x80", [(1, 1), (2, 1), (3, 1)], b"\x00", 1, (1, 1), P)
    with pytest.raises(FeasibilityError):
        codec.decode_coeff(b"\x80", [(9, 1)], b"\x00", 1, (1, 1), P)


def layer_form(seed, m=12, r=3, n=3, on_grid=False):
    g = np.random.default_rng(seed)
    ce = random_pow2(g, (m, r))
    B = g.standard_normal((r, n))
    if on_grid:
        q = quantize_basis(B)
        B = q.q * q.scale
    return SDForm(ce, B, P)


def test_layer_roundtrip_on_grid_is_lossless():
    form = layer_form(0, on_grid=True)
    back = codec.decode_layer(codec.EncodedLayer.from_bytes(codec.encode_layer(form).to_bytes()))
    assert back.ce == form.ce and np.array_equal(back.basis, form.basis)


@given(st.integers(0, 2 ** 31))
def test_layer_roundtrip_basis_bound(seed):
    form = layer_form(seed)
    enc = codec.encode_layer(form)
    back = codec.decode_layer(codec.EncodedLayer.from_bytes(enc.to_bytes()))
    assert back.ce == form.ce
    assert np.max(np.abs(back.basis - form.basis)) <= enc.basis.scale / 2 * (1 + 1e-12)


def test_record_strict_length():
    raw = codec.encode_layer(layer_form(2)).to_bytes()
    with pytest.raises(CorruptionError):
        codec.EncodedLayer.from_bytes(raw[:-1])
    with pytest.raises(CorruptionError):
        codec.EncodedLayer.from_bytes(raw + b"\x00")


def test_worked_example_size_report():
    form = SDForm(worked_example(), np.eye(2), P)
    rep = codec.record_size(codec.encode_layer(form), original_bits=128)
    assert (rep.bitmap_bits, rep.payload_bits, rep.codebook_bits, rep.basis_bits, rep.header_bits) == \
        (8, 8, 40, 64, 144)
    assert rep.code_bits == 2 and rep.nonzeros == 2 and rep.avg_bits_per_nonzero == 1.0
    assert rep.encoded_bits == 264 and rep.compression_rate < 1


def test_all_zero_tall_size_report():
    form = SDForm(Pow2Matrix.zeros((100, 3)), np.eye(3), P)
    rep = codec.record_size(codec.encode_layer(form))
    assert rep.bitmap_bits == 304  # 300 flags padded to whole bytes
    assert rep.basis_bits == 104 and rep.payload_bits == 0


def test_concentrated_distribution_average_bits():
    g = np.random.default_rng(5)
    sign = g.choice(np.array([-1, 1], np.int8), size=(500, 3))
    exp = g.choice(np.array([-1, -2, -3], np.int8), p=[0.6, 0.3, 0.1], size=(500, 3))
    rep = codec.record_size(codec.encode_layer(SDForm(Pow2Matrix(sign, exp), np.eye(3), P)))
    assert 1.0 <= rep.avg_bits_per_nonzero <= math.log2(codec.ALPHABET) + 1


def test_model_roundtrip_and_totals(small_model_tensors):
    model = decompose_model(small_model_tensors, SDConfig(), {"head": {"skip": True}})
    raw = codec.encode_model(model)
    back = codec.decode_model(raw)
    assert [layer.name for layer in back.layers] == [layer.name for layer in model.layers]
    for a, b in zip(model.layers, back.layers):
        assert a.config == b.config and a.skipped == b.skipped
        for fa, fb in zip(a.forms, b.forms):
            assert fa.ce == fb.ce and fa.provenance == fb.provenance
    assert codec.encode_model(back) == raw
    layers, total = codec.size_report(raw)
    assert total.encoded_bits == 8 * len(raw)
    assert sum(r.original_bits for r in layers.values()) == total.original_bits
    assert layers["head"].dense_bits == 32 * 30


def test_model_tensor_view_roundtrip(small_model_tensors):
    raw = codec.encode_model(decompose_model(small_model_tensors))
    tensors, meta = codec.model_to_tensors(codec.decode_model(raw))
    assert codec.encode_model(codec.tensors_to_model(tensors, meta)) == raw


def tamper(raw, fn):
    man, blob, _ = decode_sdm1(raw)
    rec = man["layers"][0]["blocks"][0]
    chunk = bytearray(blob[rec["offset"]:rec["offset"] + rec["length"]])
    fn(chunk)
    blob = blob[:rec["offset"]] + bytes(chunk) + blob[rec["offset"] + rec["length"]:]
    return encode_sdm1(man, blob)


def test_tampered_records(small_model_tensors):
    raw = codec.encode_model(decompose_model(small_model_tensors[:1]))

    def bad_range(chunk):
        chunk[12], chunk[13] = 5, 2  # p_min > p_max

    with pytest.raises(CorruptionError):
        codec.decode_model(tamper(raw, bad_range))

    def bad_symbol(chunk):
        m, r = int.from_bytes(chunk[0:4], "little"), int.from_bytes(chunk[4:8], "little")
        pos = 14 + -(-m * r // 8) + 1
        chunk[pos] = (chunk[pos] & 0x10) | 0x0F  # exponent offset 15 with |P| = 8

    with pytest.raises(FeasibilityError):
        codec.decode_model(tamper(raw, bad_symbol))
    model = codec.decode_model(tamper(raw, bad_symbol), strict=False)
    assert isinstance(model.failures["fc1"], FeasibilityError)
