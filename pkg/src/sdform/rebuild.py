"""Weight rebuild by shift-and-add, toy dense networks and equivalent-FLOPs counting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .decompose import SDForm, SDLayer
from .errors import NumericalError, ParameterError, ValidationError
from .quant import Pow2Matrix
from .reshape import ReshapedMatrix, inverse_reshape
from .tensor_io import WeightTensor


def rebuild(ce: Pow2Matrix, B) -> np.ndarray:
    """``C_e @ B`` where every product is an exponent shift of a basis entry.

    Terms are accumulated in increasing column order of ``C_e``, so the result
    equals the plainly multiplied product in that same order bit for bit.
    """
    B = np.asarray(B, dtype=np.float64)
    if ce.shape[1] != B.shape[0]:
        raise ValidationError(f"C_e is {ce.shape}, B is {B.shape}")
    out = _kernels.shift_add_rebuild(ce.sign[None], ce.exp[None], B[None])[0]
    if not np.all(np.isfinite(out)):
        raise NumericalError("exponent overflow while rebuilding weights")
    return out


def rebuild_layer(layer: SDLayer) -> WeightTensor:
    if layer.skipped:
        return layer.dense
    mats = [ReshapedMatrix(rebuild(f.ce, f.basis), f.provenance) for f in layer.forms]
    return inverse_reshape(mats, layer.dropped_rows, layer.shape, layer.name, layer.kind)


# --------------------------------------------------------------------------
# toy networks
# --------------------------------------------------------------------------

class Dense:
    def __init__(self, W, b=None):
        self.W = np.array(W, dtype=np.float64)
        self.b = np.zeros(self.W.shape[0]) if b is None else np.array(b, dtype=np.float64)

    @property
    def shape(self):
        return self.W.shape

    def weight(self):
        return self.W


class SDDense:
    """Dense layer whose weight matrix lives in SD form.

    The per-block factors are packed into padded batch arrays: ``sign``/``exp``
    of shape (G, m, r) and ``basis`` of shape (G, r, n). ``index`` maps every
    rebuilt cell to its position in the flattened weight (-1 for padding).
    """

    def __init__(self, forms, shape, b=None, dropped_rows=(), cache=False):
        forms = list(forms)
        if not forms:
            raise ValidationError("SDDense needs at least one SD form")
        self.out_dim, self.in_dim = shape
        self.P = forms[0].P
        self.b = np.zeros(self.out_dim) if b is None else np.array(b, dtype=np.float64)
        self.dropped_rows = list(dropped_rows)
        G = len(forms)
        m = max(f.dims[0] for f in forms)
        r, n = forms[0].dims[1:]
        self.sign = np.zeros((G, m, r), np.int8)
        self.exp = np.zeros((G, m, r), np.int8)
        self.basis = np.zeros((G, r, n))
        self.index = np.full((G, m, n), -1, np.int64)
        self.block_rows = np.zeros(G, np.int64)
        self.provenance = [f.provenance for f in forms]
        for g, f in enumerate(forms):
            fm = f.dims[0]
            if f.dims[1:] != (r, n):
                raise ValidationError("SD forms in one layer must share r and n")
            self.sign[g, :fm] = f.ce.sign
            self.exp[g, :fm] = f.ce.exp
            self.basis[g] = f.basis
            p = f.provenance
            local = ReshapedMatrix(np.zeros((fm, n)), p).flat_index()
            self.index[g, :fm] = np.where(local >= 0, p.row * self.in_dim + local, -1)
            self.block_rows[g] = fm
        self.cache = cache
        self._W = None

    @classmethod
    def from_layer(cls, layer: SDLayer, b=None, cache=False):
        if layer.kind != "dense2d":
            raise ValidationError(f"{layer.name}: only dense layers can run in a toy net")
        return cls(layer.forms, layer.shape, b, layer.dropped_rows, cache)

    @property
    def shape(self):
        return (self.out_dim, self.in_dim)

    @property
    def valid(self):
        return self.index >= 0

    def invalidate(self):
        self._W = None

    def weight(self):
        if self.cache and self._W is not None:
            return self._W
        Wp = _kernels.shift_add_rebuild(self.sign, self.exp, self.basis)
        W = np.zeros(self.out_dim * self.in_dim)
        ok = self.valid
        W[self.index[ok]] = Wp[ok]
        W = W.reshape(self.out_dim, self.in_dim)
        if self.cache:
            self._W = W
        return W

    def gather(self, dW):
        """Scatter a dense weight gradient back onto the packed block layout."""
        flat = np.asarray(dW, dtype=np.float64).reshape(-1)
        return np.where(self.valid, flat[np.maximum(self.index, 0)], 0.0)

    def forms(self):
        out = []
        for g, prov in enumerate(self.provenance):
            fm = self.block_rows[g]
            ce = Pow2Matrix(self.sign[g, :fm].copy(), self.exp[g, :fm].copy())
            out.append(SDForm(ce, self.basis[g].copy(), self.P, float("nan"), 0, prov))
        return out


class ToyNet:
    """Stack of dense layers with ReLU in between and a softmax cross-entropy head."""

    def __init__(self, layers):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.shape[0] != b.shape[1]:
                raise ValidationError(f"layer dims do not chain: {a.shape} -> {b.shape}")

    @property
    def in_dim(self):
        return self.layers[0].shape[1]

    def weights(self):
        return [layer.weight() for layer in self.layers]


def softmax_xent(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    loss = float(-np.mean(np.log(p[np.arange(len(y)), y] + 1e-300)))
    return p, loss


def forward(net: ToyNet, X, y=None, weights=None):
    """Return ``(logits, loss, accuracy)``; loss and accuracy are None without labels."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.in_dim:
        raise ValidationError(f"input of shape {X.shape} does not fit a net expecting {net.in_dim} features")
    Ws = net.weights() if weights is None else weights
    h = X
    last = len(net.layers) - 1
    for i, (layer, W) in enumerate(zip(net.layers, Ws)):
        h = h @ W.T + layer.b
        if i < last:
            h = np.maximum(h, 0.0)
    if y is None:
        return h, None, None
    y = np.asarray(y)
    _, loss = softmax_xent(h, y)
    acc = float(np.mean(h.argmax(axis=1) == y))
    return h, loss, acc


# --------------------------------------------------------------------------
# equivalent FLOPs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerDims:
    """CONV (R=S>=1, output map E x F) or FC (all spatial sizes 1) layer geometry."""

    M: int
    C: int
    R: int = 1
    S: int = 1
    E: int = 1
    F: int = 1

    @property
    def macs(self):
        return self.M * self.C * self.R * self.S * self.E * self.F

    @property
    def weights(self):
        return self.M * self.C * self.R * self.S

    @classmethod
    def of(cls, shape, feature=1):
        if len(shape) == 2:
            return cls(shape[0], shape[1])
        M, C, R, S = shape
        return cls(M, C, R, S, feature, feature)


@dataclass
class FlopsReport:
    mac_count: float
    multiplies: float
    adds: float
    shift_add_rebuild_count: float
    equivalent_flops: float
    rebuild_overhead_fraction: float

    def to_dict(self):
        return dict(self.__dict__)


def count_flops(dims: LayerDims, density=1.0, weight_bits=32, act_bits=32,
                ce_nonzeros=0, basis_width=0) -> FlopsReport:
    """Each MAC is one multiply plus one add.

    Multiplies cost ``max(weight_bits, act_bits) / 32`` FLOP, adds 1 FLOP;
    rebuilding costs one add per nonzero coefficient per basis column.
    """
    for bits in (weight_bits, act_bits):
        if not 1 <= bits <= 32:
            raise ParameterError(f"bit width {bits} outside 1..32")
    if not 0.0 <= density <= 1.0:
        raise ParameterError("density must lie in [0, 1]")
    macs = dims.macs * density
    mults = macs
    adds = macs
    rebuild_ops = float(ce_nonzeros * basis_width)
    eq = mults * max(weight_bits, act_bits) / 32.0 + adds + rebuild_ops
    frac = rebuild_ops / eq if eq else 0.0
    return FlopsReport(macs, mults, adds, rebuild_ops, eq, frac)
