"""Alternating quantise / least-squares / sparsify decomposition ``W ~ C_e @ B``."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .errors import NumericalError, ParameterError, SDError, ValidationError
from .quant import ExponentSet, FixedPointMatrix, Pow2Matrix, normalize_and_quantize_columns
from .reshape import DEFAULT_BLOCK_ROWS, DEFAULT_WIDTH, Provenance, ReshapedMatrix, reshape_tensor
from .tensor_io import WeightTensor

log = logging.getLogger(__name__)

MODES = ("element", "vector", "element+vector")


@dataclass(frozen=True)
class SDConfig:
    theta: float = 4e-3
    tol: float = 1e-10
    max_iter: int = 30
    P: ExponentSet = ExponentSet()
    sparsity_mode: str = "element"
    keep: float = 1.0  # fraction of C_e rows kept in vector mode
    channel_threshold: float | None = None
    ridge: float = 1e-12  # relative to the mean Gram diagonal
    width: int = DEFAULT_WIDTH  # basis width for FC layers and 1x1 convs
    block_rows: int = DEFAULT_BLOCK_ROWS
    skip: bool = False

    def __post_init__(self):
        if not self.theta >= 0:
            raise ParameterError("theta must be non-negative")
        if not self.tol > 0:
            raise ParameterError("tol must be positive")
        if int(self.max_iter) < 1:
            raise ParameterError("max_iter must be >= 1")
        if not 0.0 <= self.keep <= 1.0:
            raise ParameterError("keep must lie in [0, 1]")
        if self.sparsity_mode not in MODES:
            raise ParameterError(f"sparsity_mode must be one of {MODES}")
        if not self.ridge > 0:
            raise ParameterError("ridge must be positive")

    def with_overrides(self, d: dict) -> "SDConfig":
        """Apply a per-layer JSON entry: theta, keep, skip, pmin, pmax, mode, ..."""
        d = dict(d)
        kw = {}
        for key in ("theta", "tol", "keep", "ridge", "channel_threshold"):
            if key in d:
                val = d.pop(key)
                kw[key] = None if val is None else float(val)
        for key in ("max_iter", "width", "block_rows"):
            if key in d:
                kw[key] = int(d.pop(key))
        if "skip" in d:
            kw["skip"] = bool(d.pop("skip"))
        if "mode" in d:
            kw["sparsity_mode"] = d.pop("mode")
        if "sparsity_mode" in d:
            kw["sparsity_mode"] = d.pop("sparsity_mode")
        if "pmin" in d or "pmax" in d:
            kw["P"] = ExponentSet(int(d.pop("pmin", self.P.p_min)), int(d.pop("pmax", self.P.p_max)))
        if d:
            raise ParameterError(f"unknown per-layer config keys: {sorted(d)}")
        return replace(self, **kw)

    def to_dict(self):
        return {"theta": self.theta, "tol": self.tol, "max_iter": self.max_iter,
                "pmin": self.P.p_min, "pmax": self.P.p_max, "mode": self.sparsity_mode,
                "keep": self.keep, "channel_threshold": self.channel_threshold,
                "ridge": self.ridge, "width": self.width, "block_rows": self.block_rows,
                "skip": self.skip}


@dataclass
class SDForm:
    ce: Pow2Matrix
    basis: np.ndarray
    P: ExponentSet = ExponentSet()
    recon_error: float = float("nan")
    iterations: int = 0
    provenance: Provenance | None = None
    basis_q: FixedPointMatrix | None = None

    @property
    def dims(self):
        m, r = self.ce.shape
        return m, r, self.basis.shape[1]

    def rebuild(self) -> np.ndarray:
        return _kernels.shift_add_rebuild(self.ce.sign[None], self.ce.exp[None], self.basis[None])[0]


@dataclass
class TraceRecord:
    iteration: int
    delta: float
    res_quantized: float  # after Step 1 (quantised C_e, folded B)
    res_fit_basis: float  # after refitting B
    res_fit_coeff: float  # after refitting C_e
    recon_error: float  # after sparsification
    sparsity: float
    basis_drift: float


@dataclass
class EvolutionTrace:
    initial_sparsity: float = 0.0
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)


def _ridge(gram, lam):
    d = gram.shape[0]
    scale = np.trace(gram) / d if d else 0.0
    return lam * (scale if scale > 0 else 1.0)


def fit_basis(W, C, lam=1e-12):
    """Ridge least squares ``argmin_B ||W - C B||`` via ``(C'C + lam I) B = C'W``."""
    W = np.asarray(W, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    G = C.T @ C
    A = G + _ridge(G, lam) * np.eye(G.shape[0])
    return np.linalg.solve(A, C.T @ W)


def fit_coeff(W, B, lam=1e-12, mask=None):
    """Row-wise ridge least squares for C with ``B`` fixed.

    ``mask`` (same shape as C) marks entries that may be nonzero; the rest are
    pinned at zero and each affected row solves its reduced system.
    """
    W = np.asarray(W, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    G = B @ B.T
    r = G.shape[0]
    ridge = _ridge(G, lam)
    C = np.linalg.solve(G + ridge * np.eye(r), B @ W.T).T
    if mask is None:
        return C
    mask = np.asarray(mask, dtype=bool)
    for i in np.flatnonzero(~mask.all(axis=1)):
        allowed = np.flatnonzero(mask[i])
        C[i] = 0.0
        if allowed.size:
            Ba = B[allowed]
            Ga = Ba @ Ba.T
            C[i, allowed] = np.linalg.solve(Ga + _ridge(Ga, lam) * np.eye(allowed.size), Ba @ W[i])
    return C


def sparsify_element(C, theta):
    C = np.array(C, dtype=np.float64)
    C[np.abs(C) < theta] = 0.0
    return C


def _rows_to_drop(m, keep):
    return int(math.floor(m * (1.0 - keep) + 1e-9))


def sparsify_vector(C, keep):
    """Zero the ``floor(m * (1 - keep))`` rows with the smallest norms (lower index first on ties)."""
    C = np.array(C, dtype=np.float64)
    k = _rows_to_drop(C.shape[0], keep)
    if k:
        norms = np.linalg.norm(C, axis=1)
        order = np.lexsort((np.arange(C.shape[0]), norms))
        C[order[:k]] = 0.0
    return C


def sparsify_channel(scales, threshold, name="layer"):
    """Output-channel keep mask ``|scale| >= threshold``; refuses to empty a layer."""
    scales = np.asarray(scales, dtype=np.float64)
    mask = np.abs(scales) >= threshold
    if not mask.any():
        raise ValidationError(f"{name}: channel threshold {threshold} would prune every channel")
    return mask


def _sparsify(C, cfg: SDConfig):
    if cfg.sparsity_mode in ("element", "element+vector"):
        C = sparsify_element(C, cfg.theta)
    if cfg.sparsity_mode in ("vector", "element+vector"):
        C = sparsify_vector(C, cfg.keep)
    return C


def sd_decompose(W, cfg: SDConfig = SDConfig()):
    """Decompose one reshaped matrix; returns ``(SDForm, EvolutionTrace)``.

    ``W`` may be a :class:`ReshapedMatrix` (padding cells of C_e stay pinned
    at zero) or a bare 2-D array.
    """
    if isinstance(W, ReshapedMatrix):
        prov, Wm, pad = W.provenance, np.asarray(W.values, dtype=np.float64), W.pad_mask()
    else:
        prov, Wm, pad = None, np.asarray(W, dtype=np.float64), None
    if Wm.ndim != 2:
        raise ParameterError("sd_decompose expects a 2-D matrix")
    if not np.all(np.isfinite(Wm)):
        raise NumericalError("non-finite input matrix")
    m, n = Wm.shape
    allowed = None if pad is None or not pad.any() else ~pad
    P, lam = cfg.P, cfg.ridge

    def resid(C, B):
        return float(np.linalg.norm(Wm - C @ B))

    Ce = Wm.copy()
    if allowed is not None:
        Ce[~allowed] = 0.0
    B = np.eye(n)
    trace = EvolutionTrace(initial_sparsity=float(np.mean(Ce == 0)) if Ce.size else 0.0)
    k = 0
    delta = math.inf
    while delta >= cfg.tol and k < cfg.max_iter:
        # Step 1: normalise columns, project to powers of two, fold scales into B
        Cq, scales = normalize_and_quantize_columns(Ce, P)
        Cv = Cq.values()
        delta = float(np.linalg.norm(Cv - Ce / scales))
        B = B * scales[:, None]
        r0 = resid(Cv, B)
        # Step 2: two least-squares fits
        B = fit_basis(Wm, Cv, lam)
        r1 = resid(Cv, B)
        Ce = fit_coeff(Wm, B, lam, allowed)
        r2 = resid(Ce, B)
        # Step 3: sparsify
        Ce = _sparsify(Ce, cfg)
        if not (np.all(np.isfinite(Ce)) and np.all(np.isfinite(B))):
            raise NumericalError(f"non-finite values at iteration {k}")
        trace.records.append(TraceRecord(
            k, delta, r0, r1, r2, resid(Ce, B), float(np.mean(Ce == 0)),
            float(np.linalg.norm(B - np.eye(n)))))
        k += 1
    # conclude: re-quantise C_e and re-fit B
    Cq, _ = normalize_and_quantize_columns(Ce, P)
    B = fit_basis(Wm, Cq.values(), lam)
    if not np.all(np.isfinite(B)):
        raise NumericalError(f"non-finite basis after final refit (iteration {k})")
    form = SDForm(Cq, B, P, 0.0, k, prov)
    form.recon_error = float(np.linalg.norm(Wm - form.rebuild()))
    return form, trace


# --------------------------------------------------------------------------
# whole-model orchestration
# --------------------------------------------------------------------------

@dataclass
class SDLayer:
    name: str
    kind: str
    shape: tuple
    config: SDConfig
    forms: list = field(default_factory=list)
    dense: WeightTensor | None = None  # set when the layer is left dense
    dropped_rows: list = field(default_factory=list)

    @property
    def skipped(self):
        return self.dense is not None

    def recon_error(self, original: WeightTensor | None = None) -> float:
        if self.skipped:
            return 0.0
        if original is None:
            return float(math.sqrt(sum(f.recon_error ** 2 for f in self.forms)))
        from .rebuild import rebuild_layer
        return float(np.linalg.norm(rebuild_layer(self).data.astype(np.float64)
                                    - original.data.astype(np.float64)))

    def sparsity(self) -> float:
        total = sum(f.ce.sign.size for f in self.forms)
        return 1.0 - sum(f.ce.nnz() for f in self.forms) / total if total else 0.0

    def max_iterations(self) -> int:
        return max((f.iterations for f in self.forms), default=0)


@dataclass
class SDModel:
    layers: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)


def _keep_rows(t: WeightTensor, cfg: SDConfig):
    if cfg.channel_threshold is None:
        return None, []
    scales = t.meta.get("channel_scales")
    if scales is None:
        raise ValidationError(f"{t.name}: channel_threshold set but no channel_scales metadata")
    if len(scales) != t.shape[0]:
        raise ValidationError(f"{t.name}: {len(scales)} channel scales for {t.shape[0]} channels")
    mask = sparsify_channel(scales, cfg.channel_threshold, t.name)
    return np.flatnonzero(mask).tolist(), np.flatnonzero(~mask).tolist()


def decompose_model(tensors, cfg: SDConfig = SDConfig(), layer_configs=None, workers=1) -> SDModel:
    """Decompose every tensor; per-matrix work may run on a thread pool.

    Results are ordered by input regardless of completion order. Per-layer
    failures are collected as exceptions in ``model.failures`` and the
    remaining layers still run.
    """
    layer_configs = layer_configs or {}
    model = SDModel()
    jobs = []  # (layer, [ReshapedMatrix])
    for t in tensors:
        lcfg = cfg.with_overrides(layer_configs.get(t.name, {}))
        layer = SDLayer(t.name, t.kind, t.shape, lcfg)
        if lcfg.skip:
            layer.dense = t
            model.layers.append(layer)
            continue
        try:
            keep, dropped = _keep_rows(t, lcfg)
            mats = reshape_tensor(t, lcfg.width, lcfg.block_rows, keep)
        except SDError as exc:
            model.failures[t.name] = exc
            continue
        layer.dropped_rows = dropped
        jobs.append((layer, mats))

    def run(item):
        mat, lcfg = item
        try:
            return sd_decompose(mat, lcfg)[0]
        except SDError as exc:
            return exc

    flat = [(mat, layer.config) for layer, mats in jobs for mat in mats]
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, flat))
    else:
        results = [run(item) for item in flat]

    pos = 0
    done = {}
    for layer, mats in jobs:
        forms = results[pos:pos + len(mats)]
        pos += len(mats)
        errs = [f for f in forms if isinstance(f, Exception)]
        if errs:
            model.failures[layer.name] = type(errs[0])(f"{layer.name}: {errs[0]}")
            log.warning("layer %s failed: %s", layer.name, errs[0])
            continue
        layer.forms = forms
        done[layer.name] = layer
    # keep input order, skipped layers included
    order = [t.name for t in tensors]
    by_name = {layer.name: layer for layer in model.layers}
    by_name.update(done)
    model.layers = [by_name[name] for name in order if name in by_name]
    return model
