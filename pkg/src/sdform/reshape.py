"""Mapping FC and CONV weight tensors onto the small 2-D matrices that get decomposed.

Every output row (an FC row or a flattened conv filter) is laid out
row-major into a ``ceil(L/n) x n`` matrix, zero-padded at the tail, then
sliced along the first axis into blocks of at most ``block_rows`` rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AssemblyError, ParameterError, UnsupportedShapeError
from .tensor_io import WeightTensor

DEFAULT_WIDTH = 3
DEFAULT_BLOCK_ROWS = 64


@dataclass(frozen=True)
class Provenance:
    source: str
    kind: str
    shape: tuple  # shape of the source tensor
    row: int  # output row / filter index
    block: int
    row_start: int  # first reshaped row covered by this block
    pad: int  # zero cells appended at the tail of this block
    n: int  # basis width

    @property
    def row_length(self):
        """Number of source cells per output row."""
        return math.prod(self.shape[1:])

    @property
    def rows_total(self):
        return -(-self.row_length // self.n)

    def to_dict(self):
        return {"row": self.row, "block": self.block, "row_start": self.row_start,
                "pad": self.pad, "n": self.n}

    @classmethod
    def from_dict(cls, d, source, kind, shape):
        return cls(source, kind, tuple(shape), int(d["row"]), int(d["block"]),
                   int(d["row_start"]), int(d["pad"]), int(d["n"]))


@dataclass
class ReshapedMatrix:
    values: np.ndarray
    provenance: Provenance

    @property
    def shape(self):
        return self.values.shape

    def flat_index(self) -> np.ndarray:
        """Index of every cell into its source row (-1 on padding)."""
        m, n = self.values.shape
        idx = (self.provenance.row_start * n + np.arange(m * n)).reshape(m, n)
        return np.where(idx < self.provenance.row_length, idx, -1)

    def pad_mask(self) -> np.ndarray:
        return self.flat_index() < 0


def _check_positive(name, value):
    if int(value) < 1:
        raise ParameterError(f"{name} must be a positive integer, got {value}")


def _reshape_rows(name, kind, shape, rows2d, n, block_rows, keep_rows):
    _check_positive("basis width", n)
    _check_positive("block_rows", block_rows)
    L = rows2d.shape[1]
    total = -(-L // n)
    out = []
    rows = range(rows2d.shape[0]) if keep_rows is None else keep_rows
    for i in rows:
        padded = np.zeros(total * n, dtype=np.float64)
        padded[:L] = rows2d[i]
        mat = padded.reshape(total, n)
        for b, start in enumerate(range(0, total, block_rows)):
            stop = min(start + block_rows, total)
            pad = max(0, stop * n - L)
            prov = Provenance(name, kind, tuple(shape), int(i), b, start, pad, n)
            out.append(ReshapedMatrix(mat[start:stop].copy(), prov))
    return out


def reshape_dense(W: WeightTensor, S=DEFAULT_WIDTH, block_rows=DEFAULT_BLOCK_ROWS, keep_rows=None):
    """Reshape every row of an ``[M, C]`` matrix into ``ceil(C/S) x S`` blocks."""
    if W.kind != "dense2d":
        raise UnsupportedShapeError(f"{W.name}: reshape_dense needs a dense2d tensor")
    _check_positive("S", S)
    return _reshape_rows(W.name, W.kind, W.shape, W.data.astype(np.float64), int(S), int(block_rows), keep_rows)


def reshape_conv(W: WeightTensor, block_rows=DEFAULT_BLOCK_ROWS, fc_width=DEFAULT_WIDTH, keep_rows=None):
    """Reshape each ``[C, S, S]`` filter into an ``(S*C) x S`` matrix.

    1x1 kernels fall back to the FC rule on the ``[M, C]`` view with width
    ``fc_width``.
    """
    if W.kind != "conv4d":
        raise UnsupportedShapeError(f"{W.name}: reshape_conv needs a conv4d tensor")
    M, C, R, S = W.shape
    if R != S:
        raise UnsupportedShapeError(f"{W.name}: non-square kernel {R}x{S}")
    rows2d = W.data.astype(np.float64).reshape(M, C * R * S)
    n = S if S > 1 else int(fc_width)
    return _reshape_rows(W.name, W.kind, W.shape, rows2d, n, int(block_rows), keep_rows)


def reshape_tensor(W: WeightTensor, width=DEFAULT_WIDTH, block_rows=DEFAULT_BLOCK_ROWS, keep_rows=None):
    if W.kind == "dense2d":
        return reshape_dense(W, width, block_rows, keep_rows)
    return reshape_conv(W, block_rows, width, keep_rows)


def inverse_reshape(mats, dropped_rows=(), shape=None, source=None, kind=None) -> WeightTensor:
    """Reassemble the source tensor; rows listed in ``dropped_rows`` come back as zeros."""
    mats = list(mats)
    if not mats:
        if shape is None:
            raise AssemblyError("no matrices to assemble")
        prov0 = None
    else:
        prov0 = mats[0].provenance
        shape, source, kind = prov0.shape, prov0.source, prov0.kind
    M = shape[0]
    L = math.prod(shape[1:])
    flat = np.zeros((M, L), dtype=np.float64)
    seen = {}
    for mat in mats:
        p = mat.provenance
        if (p.source, p.shape) != (source, tuple(shape)):
            raise AssemblyError(f"matrix from {p.source!r} {p.shape} mixed into {source!r}")
        m, n = mat.values.shape
        if n != p.n:
            raise AssemblyError("matrix width disagrees with provenance")
        spans = seen.setdefault(p.row, [])
        spans.append((p.row_start, p.row_start + m))
        idx = mat.flat_index()
        ok = idx >= 0
        flat[p.row, idx[ok]] = mat.values[ok]
    dropped = set(int(r) for r in dropped_rows)
    for r in range(M):
        spans = sorted(seen.get(r, []))
        if r in dropped:
            if spans:
                raise AssemblyError(f"row {r} is both dropped and present")
            continue
        if not spans:
            raise AssemblyError(f"{source}: row {r} has no blocks")
        need = -(-L // (mats[0].provenance.n))
        pos = 0
        for a, b in spans:
            if a != pos:
                raise AssemblyError(f"{source}: row {r} has a gap or overlap at reshaped row {pos}")
            pos = b
        if pos != need:
            raise AssemblyError(f"{source}: row {r} covers {pos} of {need} reshaped rows")
    data = flat.reshape(shape)
    return WeightTensor(source, kind, shape, data)


def reshape_array(name, array, width=DEFAULT_WIDTH, block_rows=DEFAULT_BLOCK_ROWS):
    """FC reshape of an in-memory float64 matrix, skipping the float32 container type."""
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 2:
        raise UnsupportedShapeError(f"{name}: expected a 2-D array")
    _check_positive("S", width)
    return _reshape_rows(name, "dense2d", array.shape, array, int(width), int(block_rows), None)
