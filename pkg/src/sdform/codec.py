"""Bit-exact serialisation of SD forms.

Layer record layout (all integers little-endian)::

    u32 m | u32 r | u32 n | i8 p_min | i8 p_max
    bitmap      ceil(m*r/8) bytes, row-major, MSB first, 1 = nonzero
    codebook    u8 count, then count x (u8 symbol id, u8 code length)
    payload     u32 bit length, then ceil(bits/8) bytes of canonical Huffman codes
    basis       r*n int8 codes, row-major
    scale       f32

A nonzero ``sign * 2^p`` becomes symbol ``(sign_bit << 4) | (p - p_min)``.
"""
from __future__ import annotations

import heapq
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .decompose import SDConfig, SDForm, SDLayer, SDModel
from .errors import CorruptionError, FeasibilityError, FormatError, ParameterError, SDError
from .quant import ExponentSet, FixedPointMatrix, Pow2Matrix, dequantize_basis, quantize_basis
from .reshape import Provenance
from .tensor_io import FORMAT_VERSION, WeightTensor, decode_sdm1, encode_sdm1

ALPHABET = 32
_HEAD = struct.Struct("<IIIbb")


def symbol_ids(ce: Pow2Matrix, P: ExponentSet) -> np.ndarray:
    """Symbols of the nonzero entries, row-major."""
    nz = ce.sign != 0
    s = ce.sign[nz]
    e = ce.exp[nz].astype(np.int64)
    return ((s < 0).astype(np.int64) << 4) | (e - P.p_min)


def symbol_value(sym: int, P: ExponentSet):
    return (-1 if sym >> 4 else 1), P.p_min + (sym & 0xF)


def huffman_lengths(freqs) -> dict:
    """Code length per present symbol.

    Nodes are merged lowest frequency first; ties go to the node holding the
    smallest symbol id. A lone symbol gets length 1.
    """
    heap = [(int(f), int(s), int(s), None, None) for s, f in freqs.items() if f > 0]
    if not heap:
        return {}
    if len(heap) == 1:
        return {heap[0][1]: 1}
    heapq.heapify(heap)
    while len(heap) > 1:
        a = heapq.heappop(heap)
        b = heapq.heappop(heap)
        heapq.heappush(heap, (a[0] + b[0], min(a[1], b[1]), -1, a, b))
    lengths = {}
    stack = [(heap[0], 0)]
    while stack:
        node, depth = stack.pop()
        if node[2] >= 0:
            lengths[node[2]] = depth
        else:
            stack.append((node[3], depth + 1))
            stack.append((node[4], depth + 1))
    return lengths


def canonical_codes(lengths: dict) -> dict:
    """symbol -> (code, length), codes assigned in (length, symbol) order."""
    codes = {}
    code, prev = 0, 0
    for sym, ln in sorted(lengths.items(), key=lambda kv: (kv[1], kv[0])):
        code <<= ln - prev
        codes[sym] = (code, ln)
        code += 1
        prev = ln
    return codes


def _decode_tables(lengths: dict):
    max_len = max(lengths.values())
    len_count = np.zeros(max_len + 1, np.int64)
    first_code = np.zeros(max_len + 1, np.int64)
    first_index = np.zeros(max_len + 1, np.int64)
    ordered = np.array([s for s, _ in sorted(lengths.items(), key=lambda kv: (kv[1], kv[0]))], np.int64)
    for ln in lengths.values():
        len_count[ln] += 1
    code, idx = 0, 0
    for ln in range(1, max_len + 1):
        code = (code + len_count[ln - 1]) << 1 if ln > 1 else 0
        first_code[ln] = code
        first_index[ln] = idx
        idx += len_count[ln]
    return first_code, len_count, first_index, ordered


def _pack_codes(symbols: np.ndarray, codes: dict):
    if symbols.size == 0:
        return b"", 0
    code_tab = np.zeros(ALPHABET, np.int64)
    len_tab = np.zeros(ALPHABET, np.int64)
    for s, (c, ln) in codes.items():
        code_tab[s], len_tab[s] = c, ln
    lens = len_tab[symbols]
    total = int(lens.sum())
    starts = np.cumsum(lens) - lens
    owner = np.repeat(np.arange(symbols.size), lens)
    k = np.arange(total) - starts[owner]
    bits = (code_tab[symbols][owner] >> (lens[owner] - 1 - k)) & 1
    return np.packbits(bits.astype(np.uint8)).tobytes(), total


def _check_codebook(codebook, P: ExponentSet):
    syms = [s for s, _ in codebook]
    if len(set(syms)) != len(syms):
        raise CorruptionError("duplicate symbol in codebook")
    kraft = 0.0
    for s, ln in codebook:
        if not 0 <= s < ALPHABET or not 1 <= ln <= 64:
            raise CorruptionError(f"malformed codebook entry ({s}, {ln})")
        if (s & 0xF) >= len(P):
            raise FeasibilityError(f"symbol {s} encodes exponent {P.p_min + (s & 0xF)} outside "
                                   f"[{P.p_min}, {P.p_max}]")
        kraft += 2.0 ** -ln
    if kraft > 1.0:
        raise CorruptionError("codebook lengths are not prefix-free")


def encode_coeff(ce: Pow2Matrix, P: ExponentSet = ExponentSet()):
    """Return ``(bitmap, codebook, payload, payload_bits)``."""
    ce.check_feasible(P)
    bitmap = np.packbits((ce.sign != 0).reshape(-1).astype(np.uint8)).tobytes()
    syms = symbol_ids(ce, P)
    freqs = dict(zip(*np.unique(syms, return_counts=True))) if syms.size else {}
    lengths = huffman_lengths({int(k): int(v) for k, v in freqs.items()})
    codebook = sorted(lengths.items())
    payload, nbits = _pack_codes(syms, canonical_codes(lengths))
    return bitmap, codebook, payload, nbits


def decode_coeff(bitmap, codebook, payload, payload_bits, dims, P: ExponentSet = ExponentSet()) -> Pow2Matrix:
    m, r = dims
    cells = m * r
    if len(bitmap) != -(-cells // 8):
        raise CorruptionError("bitmap length does not match dims")
    flags = np.unpackbits(np.frombuffer(bitmap, np.uint8))
    if flags[cells:].any():
        raise CorruptionError("nonzero bitmap padding")
    flags = flags[:cells].astype(bool)
    count = int(flags.sum())
    _check_codebook(codebook, P)
    if len(payload) != -(-payload_bits // 8):
        raise CorruptionError("payload byte length does not match its bit length")
    sign = np.zeros(cells, np.int8)
    exp = np.zeros(cells, np.int8)
    if count:
        if not codebook:
            raise CorruptionError("nonzero entries but an empty codebook")
        tables = _decode_tables(dict(codebook))
        syms, used = _kernels.huffman_decode(np.frombuffer(payload, np.uint8), payload_bits, count, *tables)
        if used < 0:
            raise CorruptionError("payload exhausted or holds an invalid code")
        if used != payload_bits:
            raise CorruptionError(f"{payload_bits - used} trailing payload bits")
        sign[flags] = np.where(syms >> 4, -1, 1)
        exp[flags] = P.p_min + (syms & 0xF)
    elif payload_bits:
        raise CorruptionError("payload bits present for an all-zero matrix")
    tail = np.unpackbits(np.frombuffer(payload, np.uint8))[payload_bits:]
    if tail.any():
        raise CorruptionError("nonzero payload padding")
    return Pow2Matrix(sign.reshape(m, r), exp.reshape(m, r))


@dataclass
class EncodedLayer:
    m: int
    r: int
    n: int
    p_min: int
    p_max: int
    bitmap: bytes
    codebook: list
    payload: bytes
    payload_bits: int
    basis: FixedPointMatrix

    @property
    def P(self):
        return ExponentSet(self.p_min, self.p_max)

    def to_bytes(self) -> bytes:
        parts = [_HEAD.pack(self.m, self.r, self.n, self.p_min, self.p_max), self.bitmap,
                 bytes([len(self.codebook)]) + b"".join(bytes([s, ln]) for s, ln in self.codebook),
                 struct.pack("<I", self.payload_bits), self.payload,
                 self.basis.q.astype(np.int8).tobytes(), struct.pack("<f", self.basis.scale)]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EncodedLayer":
        try:
            m, r, n, p_min, p_max = _HEAD.unpack_from(raw, 0)
            pos = _HEAD.size
            nb = -(-m * r // 8)
            bitmap = raw[pos:pos + nb]
            pos += nb
            k = raw[pos]
            pos += 1
            codebook = [(raw[pos + 2 * i], raw[pos + 2 * i + 1]) for i in range(k)]
            pos += 2 * k
            (bits,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            pb = -(-bits // 8)
            payload = raw[pos:pos + pb]
            pos += pb
            q = np.frombuffer(raw, np.int8, count=r * n, offset=pos).reshape(r, n)
            pos += r * n
            (scale,) = struct.unpack_from("<f", raw, pos)
            pos += 4
        except (struct.error, IndexError, ValueError):
            raise CorruptionError("layer record truncated") from None
        if len(bitmap) != nb or len(payload) != pb or pos != len(raw):
            raise CorruptionError("layer record length mismatch")
        if not (scale > 0 and math.isfinite(scale)) or np.any(q == -128):
            raise CorruptionError("invalid basis encoding")
        try:
            ExponentSet(p_min, p_max)
        except ParameterError:
            raise CorruptionError(f"invalid exponent range [{p_min}, {p_max}]") from None
        return cls(m, r, n, p_min, p_max, bitmap, codebook, payload, bits,
                   FixedPointMatrix(q.copy(), float(scale)))


def encode_layer(form: SDForm) -> EncodedLayer:
    bitmap, codebook, payload, bits = encode_coeff(form.ce, form.P)
    basis_q = form.basis_q if form.basis_q is not None else quantize_basis(form.basis)
    m, r, n = form.dims
    return EncodedLayer(m, r, n, form.P.p_min, form.P.p_max, bitmap, codebook, payload, bits, basis_q)


def decode_layer(enc: EncodedLayer, provenance=None) -> SDForm:
    P = enc.P
    ce = decode_coeff(enc.bitmap, enc.codebook, enc.payload, enc.payload_bits, (enc.m, enc.r), P)
    return SDForm(ce, dequantize_basis(enc.basis), P, float("nan"), 0, provenance, enc.basis)


# --------------------------------------------------------------------------
# size accounting
# --------------------------------------------------------------------------

RECORD_HEADER_BITS = 8 * (_HEAD.size + 4)  # dims, exponent range, payload bit length


@dataclass
class SizeReport:
    original_bits: int = 0
    bitmap_bits: int = 0
    payload_bits: int = 0  # byte-padded payload
    codebook_bits: int = 0
    basis_bits: int = 0
    header_bits: int = 0
    dense_bits: int = 0  # layers stored uncompressed
    code_bits: int = 0  # exact Huffman bits, no padding
    nonzeros: int = 0

    @property
    def encoded_bits(self):
        return (self.bitmap_bits + self.payload_bits + self.codebook_bits
                + self.basis_bits + self.header_bits + self.dense_bits)

    @property
    def compression_rate(self):
        return self.original_bits / self.encoded_bits if self.encoded_bits else float("inf")

    @property
    def avg_bits_per_nonzero(self):
        return self.code_bits / self.nonzeros if self.nonzeros else 0.0

    def __add__(self, other):
        return SizeReport(*(getattr(self, f) + getattr(other, f) for f in self.__dataclass_fields__))

    def to_dict(self):
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(encoded_bits=self.encoded_bits, compression_rate=self.compression_rate,
                 avg_bits_per_nonzero=self.avg_bits_per_nonzero)
        return d


def record_size(enc: EncodedLayer, original_bits=0) -> SizeReport:
    return SizeReport(
        original_bits=original_bits,
        bitmap_bits=8 * len(enc.bitmap),
        payload_bits=8 * len(enc.payload),
        codebook_bits=8 * (1 + 2 * len(enc.codebook)),
        basis_bits=8 * enc.basis.q.size + 32,
        header_bits=RECORD_HEADER_BITS,
        code_bits=enc.payload_bits,
        nonzeros=int(np.unpackbits(np.frombuffer(enc.bitmap, np.uint8))[:enc.m * enc.r].sum()),
    )


# --------------------------------------------------------------------------
# SDM1 model files
# --------------------------------------------------------------------------

def _layer_entry(layer: SDLayer):
    return {"name": layer.name, "kind": layer.kind, "shape": list(layer.shape),
            "config": layer.config.to_dict(), "dropped_rows": list(layer.dropped_rows)}


def _config_from_dict(d):
    d = dict(d)
    base = SDConfig()
    skip = d.pop("skip", False)
    return base.with_overrides(d | {"skip": skip})


def encode_model(model: SDModel) -> bytes:
    entries, chunks, offset = [], [], 0
    for layer in model.layers:
        entry = _layer_entry(layer)
        if layer.skipped:
            chunk = layer.dense.data.astype("<f4").tobytes()
            entry["dense"] = {"offset": offset, "length": len(chunk)}
            entry["blocks"] = []
            chunks.append(chunk)
            offset += len(chunk)
        else:
            entry["dense"] = None
            blocks = []
            for form in layer.forms:
                raw = encode_layer(form).to_bytes()
                m, r, n = form.dims
                rec = form.provenance.to_dict() if form.provenance else {}
                rec.update(m=m, r=r, offset=offset, length=len(raw))
                blocks.append(rec)
                chunks.append(raw)
                offset += len(raw)
            entry["blocks"] = blocks
        entries.append(entry)
    return encode_sdm1({"version": FORMAT_VERSION, "layers": entries}, b"".join(chunks))


def decode_model(raw: bytes, strict=True):
    """Parse an SDM1 file into an :class:`SDModel`.

    With ``strict=False`` per-layer decoding errors are collected in
    ``model.failures`` instead of raised.
    """
    manifest, blob, _ = decode_sdm1(raw)
    model = SDModel()
    for entry in manifest["layers"]:
        try:
            shape = tuple(entry["shape"])
            layer = SDLayer(entry["name"], entry["kind"], shape, _config_from_dict(entry["config"]),
                            dropped_rows=list(entry.get("dropped_rows", [])))
            if entry.get("dense") is not None:
                d = entry["dense"]
                data = np.frombuffer(blob, "<f4", count=d["length"] // 4, offset=d["offset"])
                layer.dense = WeightTensor(layer.name, layer.kind, shape, data.astype(np.float32))
            else:
                for rec in entry["blocks"]:
                    enc = EncodedLayer.from_bytes(blob[rec["offset"]:rec["offset"] + rec["length"]])
                    if (enc.m, enc.r) != (rec["m"], rec["r"]):
                        raise CorruptionError(f"{layer.name}: record dims disagree with manifest")
                    prov = Provenance.from_dict(rec, layer.name, layer.kind, shape)
                    layer.forms.append(decode_layer(enc, prov))
        except SDError as exc:
            if strict:
                raise type(exc)(f"{entry.get('name', '?')}: {exc}") from None
            model.failures[entry.get("name", "?")] = exc
            continue
        except (KeyError, TypeError, ValueError) as exc:
            if strict:
                raise FormatError(f"{entry.get('name', '?')}: malformed manifest entry ({exc})") from None
            model.failures[entry.get("name", "?")] = FormatError(f"malformed manifest entry ({exc})")
            continue
        model.layers.append(layer)
    return model


def size_report(raw: bytes):
    """Per-layer :class:`SizeReport` plus totals; totals sum to ``len(raw) * 8``."""
    manifest, blob, header = decode_sdm1(raw)
    layers = {}
    total = SizeReport()
    for entry in manifest["layers"]:
        rep = SizeReport(original_bits=32 * math.prod(entry["shape"]))
        entry_json = json.dumps(entry, sort_keys=True, separators=(",", ":")).encode()
        rep.header_bits += 8 * len(entry_json)
        if entry.get("dense") is not None:
            rep.dense_bits += 8 * entry["dense"]["length"]
        for rec in entry.get("blocks", []):
            enc = EncodedLayer.from_bytes(blob[rec["offset"]:rec["offset"] + rec["length"]])
            rep = rep + record_size(enc)
        layers[entry["name"]] = rep
        total = total + rep
    # magic, manifest length, JSON framing outside the layer entries
    total.header_bits += 8 * len(raw) - total.encoded_bits
    return layers, total


# --------------------------------------------------------------------------
# SD forms as an SDTC container (for standalone decode/encode passes)
# --------------------------------------------------------------------------

def model_to_tensors(model: SDModel):
    """Flatten a decoded model into float32 tensors plus manifest metadata.

    Coefficients are stored as their exact power-of-two values; the basis as
    its integer codes with a one-element scale tensor, so re-encoding is
    bit-exact.
    """
    tensors, layers = [], []
    for layer in model.layers:
        entry = _layer_entry(layer)
        if layer.skipped:
            entry["dense"] = True
            tensors.append(WeightTensor(layer.name, layer.kind, layer.shape, layer.dense.data))
        else:
            entry["dense"] = False
            blocks = []
            for i, form in enumerate(layer.forms):
                m, r, n = form.dims
                q = form.basis_q if form.basis_q is not None else quantize_basis(form.basis)
                key = f"{layer.name}#{i}"
                tensors.append(WeightTensor(f"{key}/ce", "dense2d", (m, r), form.ce.values()))
                tensors.append(WeightTensor(f"{key}/bq", "dense2d", (r, n), q.q.astype(np.float32)))
                tensors.append(WeightTensor(f"{key}/scale", "dense2d", (1, 1), [[q.scale]]))
                rec = form.provenance.to_dict() if form.provenance else {}
                rec.update(pmin=form.P.p_min, pmax=form.P.p_max)
                blocks.append(rec)
            entry["blocks"] = blocks
        layers.append(entry)
    return tensors, {"sd_layers": layers}


def tensors_to_model(tensors, meta) -> SDModel:
    by_name = {t.name: t for t in tensors}
    model = SDModel()
    try:
        entries = meta["sd_layers"]
    except (KeyError, TypeError):
        raise FormatError("container does not hold SD forms (no sd_layers metadata)") from None
    for entry in entries:
        shape = tuple(entry["shape"])
        layer = SDLayer(entry["name"], entry["kind"], shape, _config_from_dict(entry["config"]),
                        dropped_rows=list(entry.get("dropped_rows", [])))
        if entry["dense"]:
            layer.dense = by_name[entry["name"]]
        else:
            for i, rec in enumerate(entry["blocks"]):
                key = f"{layer.name}#{i}"
                P = ExponentSet(rec["pmin"], rec["pmax"])
                ce = Pow2Matrix.from_values(by_name[f"{key}/ce"].data, P)
                q = FixedPointMatrix(by_name[f"{key}/bq"].data.astype(np.int8),
                                     float(by_name[f"{key}/scale"].data[0, 0]))
                prov = Provenance.from_dict(rec, layer.name, layer.kind, shape) if "row" in rec else None
                layer.forms.append(SDForm(ce, dequantize_basis(q), P, float("nan"), 0, prov, q))
        model.layers.append(layer)
    return model
