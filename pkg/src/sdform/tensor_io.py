"""On-disk containers.

``SDTC`` holds dense float32 weight tensors::

    b"SDTC" | u32 LE manifest length | UTF-8 JSON manifest | f32 LE blob

``SDM1`` holds decomposed models with the same framing (magic ``SDM1``); the
blob is a concatenation of encoded layer records whose layout lives in
:mod:`sdform.codec`.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, ValidationError

SDTC_MAGIC = b"SDTC"
SDM1_MAGIC = b"SDM1"
FORMAT_VERSION = 1

KINDS = ("dense2d", "conv4d")


@dataclass
class WeightTensor:
    name: str
    kind: str
    shape: tuple
    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float32).reshape(self.shape))
        self.validate()

    @classmethod
    def from_array(cls, name, array, meta=None):
        array = np.asarray(array)
        kind = {2: "dense2d", 4: "conv4d"}.get(array.ndim)
        if kind is None:
            raise ValidationError(f"{name}: expected a 2-D or 4-D array, got {array.ndim}-D")
        return cls(name, kind, array.shape, array, dict(meta or {}))

    def validate(self):
        if self.kind not in KINDS:
            raise ValidationError(f"{self.name}: unknown kind {self.kind!r}")
        want = 2 if self.kind == "dense2d" else 4
        if len(self.shape) != want or any(s <= 0 for s in self.shape):
            raise ValidationError(f"{self.name}: bad shape {self.shape} for {self.kind}")
        if self.kind == "conv4d" and self.shape[2] != self.shape[3]:
            raise ValidationError(f"{self.name}: conv kernels must be square, got {self.shape[2:]}")
        if self.data.size != math.prod(self.shape):
            raise ValidationError(f"{self.name}: data length does not match shape")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError(f"{self.name}: non-finite values in payload")

    def __eq__(self, other):
        return (isinstance(other, WeightTensor) and self.name == other.name
                and self.kind == other.kind and self.shape == other.shape
                and self.meta == other.meta
                and self.data.tobytes() == other.data.tobytes())


def _dump_manifest(manifest) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _frame(magic: bytes, manifest: dict, blob: bytes) -> bytes:
    head = _dump_manifest(manifest)
    return magic + struct.pack("<I", len(head)) + head + blob


def _unframe(raw: bytes, magic: bytes):
    if raw[:4] != magic:
        raise FormatError(f"bad magic: expected {magic!r}, found {raw[:4]!r}")
    if len(raw) < 8:
        raise CorruptionError("truncated header")
    (n,) = struct.unpack("<I", raw[4:8])
    if 8 + n > len(raw):
        raise CorruptionError("manifest length runs past end of file")
    try:
        manifest = json.loads(raw[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest does not parse: {exc}") from None
    if not isinstance(manifest, dict):
        raise FormatError("manifest must be a JSON object")
    return manifest, raw[8 + n:], 8 + n


def _check_extents(entries, blob_len, what):
    end = 0
    for e in sorted(entries, key=lambda e: e["offset"]):
        off, length = int(e["offset"]), int(e["length"])
        if off < 0 or length < 0 or off + length > blob_len:
            raise CorruptionError(f"{what} {e.get('name', '?')!r}: extent runs past the data blob")
        if off < end:
            raise CorruptionError(f"{what} {e.get('name', '?')!r}: overlapping extents")
        end = off + length
    if end != blob_len:
        raise CorruptionError(f"{what}: blob length {blob_len} does not match manifest ({end})")


def encode_container(tensors, meta=None) -> bytes:
    names = [t.name for t in tensors]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate tensor names")
    entries, chunks, offset = [], [], 0
    for t in tensors:
        t.validate()
        chunk = t.data.astype("<f4").tobytes()
        entry = {"name": t.name, "kind": t.kind, "shape": list(t.shape),
                 "offset": offset, "length": len(chunk)}
        if t.meta:
            entry["meta"] = t.meta
        entries.append(entry)
        chunks.append(chunk)
        offset += len(chunk)
    manifest = {"version": FORMAT_VERSION, "tensors": entries}
    if meta:
        manifest["meta"] = meta
    return _frame(SDTC_MAGIC, manifest, b"".join(chunks))


def decode_container(raw: bytes, with_meta=False):
    try:
        return _decode_container(raw, with_meta)
    except (KeyError, TypeError, AttributeError) as exc:
        raise FormatError(f"malformed tensor manifest ({exc!r})") from None


def _decode_container(raw, with_meta):
    manifest, blob, _ = _unframe(raw, SDTC_MAGIC)
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {manifest.get('version')!r}")
    entries = manifest.get("tensors")
    if not isinstance(entries, list):
        raise FormatError("manifest lacks a tensor list")
    names = [e.get("name") for e in entries]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names in manifest")
    _check_extents(entries, len(blob), "tensor")
    tensors = []
    for e in entries:
        shape = tuple(e["shape"])
        if int(e["length"]) != 4 * math.prod(shape):
            raise CorruptionError(f"tensor {e['name']!r}: byte length does not match shape")
        data = np.frombuffer(blob, dtype="<f4", count=math.prod(shape), offset=int(e["offset"]))
        tensors.append(WeightTensor(e["name"], e["kind"], shape, data.astype(np.float32),
                                    dict(e.get("meta", {}))))
    if with_meta:
        return tensors, manifest.get("meta", {})
    return tensors


def save_container(tensors, path, meta=None):
    raw = encode_container(list(tensors), meta)
    Path(path).write_bytes(raw)


def load_container(path, with_meta=False):
    return decode_container(Path(path).read_bytes(), with_meta=with_meta)


# --------------------------------------------------------------------------
# SDM1 framing; record contents are produced by the codec
# --------------------------------------------------------------------------

def encode_sdm1(manifest: dict, blob: bytes) -> bytes:
    return _frame(SDM1_MAGIC, manifest, blob)


def decode_sdm1(raw: bytes):
    """Return ``(manifest, blob, header_bytes)``."""
    try:
        return _decode_sdm1(raw)
    except (KeyError, TypeError, AttributeError) as exc:
        raise FormatError(f"malformed model manifest ({exc!r})") from None


def _decode_sdm1(raw):
    manifest, blob, header = _unframe(raw, SDM1_MAGIC)
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported model version {manifest.get('version')!r}")
    if not isinstance(manifest.get("layers"), list):
        raise FormatError("model manifest lacks a layer list")
    extents = []
    for layer in manifest["layers"]:
        for rec in layer.get("blocks", []) or []:
            extents.append({"name": layer["name"], "offset": rec["offset"], "length": rec["length"]})
        if layer.get("dense") is not None:
            extents.append({"name": layer["name"], **layer["dense"]})
    _check_extents(extents, len(blob), "layer")
    return manifest, blob, header
