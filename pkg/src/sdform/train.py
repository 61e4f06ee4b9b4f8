"""Training with weights held in SD form.

C_e keeps its initial sparsity pattern and moves only between neighbouring
powers of two (bucket switches driven by integer counters of gradient signs);
B, biases and plain dense layers follow ordinary SGD, with optional running
averages of B.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .decompose import SDConfig, sd_decompose
from .errors import InvariantError, ParameterError
from .quant import ExponentSet, Pow2Matrix
from .rebuild import Dense, SDDense, ToyNet, forward, softmax_xent
from .reshape import reshape_array

# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticDataset:
    seed: int = 0
    dim: int = 16
    n_classes: int = 4
    train_per_class: int = 200
    test_per_class: int = 100
    separation: float = 1.0  # std of the class means
    noise: float = 1.0
    adapt_split: float = 0.5  # fraction of classes in the source set A


@dataclass
class Split:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


def _sample(rng, means, per_class, noise, classes):
    X = np.concatenate([means[c] + noise * rng.standard_normal((per_class, means.shape[1])) for c in classes])
    y = np.repeat(np.asarray(classes), per_class)
    return X, y


def gen_data(spec: SyntheticDataset) -> dict:
    """Gaussian class clusters with fine-tuning (alpha/beta) and adaptation (A/B) splits.

    Adaptation splits relabel their classes to ``0..k-1``.
    """
    if spec.n_classes < 2:
        raise ParameterError("need at least two classes")
    rng = np.random.default_rng(spec.seed)
    means = spec.separation * rng.standard_normal((spec.n_classes, spec.dim))
    classes = list(range(spec.n_classes))
    X, y = _sample(rng, means, spec.train_per_class, spec.noise, classes)
    Xt, yt = _sample(rng, means, spec.test_per_class, spec.noise, classes)

    # fine-tuning: split every class in half
    alpha = np.zeros(len(y), bool)
    for c in classes:
        idx = np.flatnonzero(y == c)
        idx = rng.permutation(idx)
        alpha[idx[: len(idx) // 2]] = True
    # adaptation: split by class
    k = min(max(1, int(round(spec.n_classes * spec.adapt_split))), spec.n_classes - 1)
    a_cls, b_cls = classes[:k], classes[k:]

    def by_class(Xs, ys, cls):
        sel = np.isin(ys, cls)
        remap = {c: i for i, c in enumerate(cls)}
        return Split(Xs[sel], np.array([remap[v] for v in ys[sel]], dtype=np.int64))

    return {
        "alpha": Split(X[alpha], y[alpha]),
        "beta": Split(X[~alpha], y[~alpha]),
        "test": Split(Xt, yt),
        "A": by_class(X, y, a_cls),
        "B": by_class(X, y, b_cls),
        "test_A": by_class(Xt, yt, a_cls),
        "test_B": by_class(Xt, yt, b_cls),
        "classes_A": a_cls,
        "classes_B": b_cls,
    }


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------


def backprop(net: ToyNet, X, y, weights=None):
    """Analytic gradients of the mean softmax cross-entropy.

    Returns ``(dWs, dbs, loss)`` with one entry per layer.
    """
    Ws = net.weights() if weights is None else weights
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    acts = [X]
    pre = []
    h = X
    last = len(net.layers) - 1
    for i, (layer, W) in enumerate(zip(net.layers, Ws)):
        z = h @ W.T + layer.b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
        acts.append(h)
    p, loss = softmax_xent(h, y)
    delta = p
    delta[np.arange(len(y)), y] -= 1.0
    delta /= len(y)
    dWs, dbs = [None] * len(Ws), [None] * len(Ws)
    for i in range(last, -1, -1):
        dWs[i] = delta.T @ acts[i]
        dbs[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ Ws[i]) * (pre[i - 1] > 0)
    return dWs, dbs, loss


def grads_factored(dW, ce_values, B):
    """Chain rule through ``W = C_e @ B``: returns ``(dB, dC_e)``; works batched."""
    dW = np.asarray(dW, dtype=np.float64)
    dB = np.swapaxes(ce_values, -1, -2) @ dW
    dC = dW @ np.swapaxes(B, -1, -2)
    return dB, dC


# --------------------------------------------------------------------------
# discrete updates for C_e
# --------------------------------------------------------------------------

CONVENTIONS = {"paper": 1, "descent": -1}


@dataclass(frozen=True)
class TrainConfig:
    theta_g: float = 5e-3
    theta_c: int = 7
    lr_b: float = 0.05
    lr_dense: float = 0.1  # biases and plain dense layers
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    swa_start_epoch: int | None = None
    swa_lr: float | None = None
    sign_convention: str = "paper"

    def __post_init__(self):
        if int(self.theta_c) < 1:
            raise ParameterError("theta_c must be >= 1")
        if not self.theta_g >= 0:
            raise ParameterError("theta_g must be >= 0")
        if self.sign_convention not in CONVENTIONS:
            raise ParameterError(f"sign_convention must be one of {sorted(CONVENTIONS)}")
        if self.theta_c > 127:
            raise ParameterError("theta_c must fit an int8 counter")


@dataclass
class SwitchState:
    counters: np.ndarray  # int8, |counter| <= theta_c
    parked: np.ndarray  # int8 sign kept by entries parked at zero
    frozen: np.ndarray  # bool, initial zeros of C_e

    @classmethod
    def init(cls, sign):
        sign = np.asarray(sign)
        return cls(np.zeros(sign.shape, np.int8), np.zeros(sign.shape, np.int8), sign == 0)

    def copy(self):
        return SwitchState(self.counters.copy(), self.parked.copy(), self.frozen.copy())


def bucket_step(ce: Pow2Matrix, grad, state: SwitchState, cfg: TrainConfig,
                P: ExponentSet = ExponentSet(), inplace=False):
    """One bucket-switch update; returns ``(ce, state)``.

    Gradients below ``theta_g`` give no signal. Each counter accumulates
    signals (positive gradient means "up" under the ``paper`` convention,
    "down" under ``descent``); reaching ``+-theta_c`` moves the exponent one
    step and resets the counter. Exponents saturate at ``p_max``; stepping
    below ``p_min`` parks the entry at zero with its sign kept, and a later up
    trigger revives it at ``2^p_min``. Frozen entries never change.
    """
    if not inplace:
        ce, state = ce.copy(), state.copy()
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != ce.shape:
        raise ParameterError(f"gradient shape {grad.shape} != C_e shape {ce.shape}")
    _kernels.bucket_step(ce.sign.reshape(-1), ce.exp.reshape(-1), state.counters.reshape(-1),
                         state.parked.reshape(-1), state.frozen.reshape(-1), grad.reshape(-1),
                         cfg.theta_g, cfg.theta_c, P.p_min, P.p_max, CONVENTIONS[cfg.sign_convention])
    return ce, state


def sgd_step_B(B, dB, lr):
    return B - lr * dB


def swa_update(B_avg, B, count):
    """Running mean after ``count`` earlier snapshots."""
    if count == 0 or B_avg is None:
        return np.array(B, dtype=np.float64)
    return B_avg + (B - B_avg) / (count + 1)


# --------------------------------------------------------------------------
# nets and training loops
# --------------------------------------------------------------------------


def init_dense_net(dims, seed=0):
    """He-initialised dense ToyNet with layer sizes ``dims`` (input first)."""
    rng = np.random.default_rng(seed)
    return ToyNet([Dense(rng.standard_normal((o, i)) * math.sqrt(2.0 / i), np.zeros(o))
                   for i, o in zip(dims, dims[1:])])


def reset_head(net: ToyNet, n_classes, seed=0):
    rng = np.random.default_rng(seed)
    i = net.layers[-1].shape[1]
    net.layers[-1] = Dense(rng.standard_normal((n_classes, i)) * math.sqrt(1.0 / i), np.zeros(n_classes))
    return net


def copy_net(net: ToyNet) -> ToyNet:
    layers = []
    for layer in net.layers:
        if isinstance(layer, SDDense):
            clone = SDDense.__new__(SDDense)
            clone.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v)
                                   for k, v in layer.__dict__.items()})
            clone.provenance = list(layer.provenance)
            clone._W = None
            layers.append(clone)
        else:
            layers.append(Dense(layer.W, layer.b))
    return ToyNet(layers)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def train_dense_epoch(net: ToyNet, data: Split, lr, batch_size, rng, layers=None):
    """Plain SGD over every (or the listed) dense layer for one epoch."""
    idx = range(len(net.layers)) if layers is None else layers
    for sel in _batches(len(data), batch_size, rng):
        dWs, dbs, _ = backprop(net, data.X[sel], data.y[sel])
        for i in idx:
            layer = net.layers[i]
            layer.W -= lr * dWs[i]
            layer.b -= lr * dbs[i]


def evaluate(net: ToyNet, data: Split):
    _, loss, acc = forward(net, data.X, data.y)
    return loss, acc


def decompose_matrix(name, W, sd_cfg: SDConfig):
    """Reshape a dense float64 matrix and decompose every block."""
    return [sd_decompose(mat, sd_cfg)[0] for mat in reshape_array(name, W, sd_cfg.width, sd_cfg.block_rows)]


def to_sd_net(net: ToyNet, sd_cfg: SDConfig, layers) -> ToyNet:
    """Replace the listed dense layers by their SD forms (biases carried over)."""
    out = copy_net(net)
    for i in layers:
        layer = out.layers[i]
        forms = decompose_matrix(f"layer{i}", layer.W, sd_cfg)
        out.layers[i] = SDDense(forms, layer.W.shape, layer.b)
    return out


def ce_sparsity(net: ToyNet):
    total = nz = 0
    for layer in net.layers:
        if isinstance(layer, SDDense):
            v = layer.valid[..., :1].repeat(layer.sign.shape[2], axis=2)
            total += int(v.sum())
            nz += int(np.count_nonzero(layer.sign))
    return 1.0 - nz / total if total else 0.0


class SDTrainer:
    """Fine-tunes a ToyNet in which some layers are :class:`SDDense`."""

    def __init__(self, net: ToyNet, cfg: TrainConfig):
        self.net = net
        self.cfg = cfg
        self.sd_idx = [i for i, layer in enumerate(net.layers) if isinstance(layer, SDDense)]
        self.states = {i: SwitchState.init(net.layers[i].sign) for i in self.sd_idx}
        self.swa = {i: None for i in self.sd_idx}
        self.swa_count = 0
        self.rng = np.random.default_rng(cfg.seed)

    # invariants ------------------------------------------------------------
    def mask_violations(self) -> int:
        return sum(int(np.count_nonzero(self.net.layers[i].sign[self.states[i].frozen]))
                   for i in self.sd_idx)

    def check_invariants(self):
        bad = self.mask_violations()
        if bad:
            raise InvariantError(f"{bad} frozen C_e entries became nonzero")
        for i in self.sd_idx:
            layer, st = self.net.layers[i], self.states[i]
            nz = layer.sign != 0
            e = layer.exp[nz]
            if e.size and (e.min() < layer.P.p_min or e.max() > layer.P.p_max):
                raise InvariantError(f"layer {i}: exponent left [{layer.P.p_min}, {layer.P.p_max}]")
            if np.any(np.abs(st.counters.astype(np.int64)) > self.cfg.theta_c):
                raise InvariantError(f"layer {i}: switch counter beyond theta_c")
            if np.any(st.parked[nz] != 0) or np.any(st.parked[st.frozen] != 0):
                raise InvariantError(f"layer {i}: parked sign on a live or frozen entry")

    # training --------------------------------------------------------------
    def step(self, X, y, lr_b):
        net, cfg = self.net, self.cfg
        dWs, dbs, loss = backprop(net, X, y)
        for i, layer in enumerate(net.layers):
            if isinstance(layer, SDDense):
                dWp = layer.gather(dWs[i])
                ce_vals = np.where(layer.sign != 0,
                                   layer.sign * np.ldexp(1.0, layer.exp.astype(np.int32)), 0.0)
                dB, dC = grads_factored(dWp, ce_vals, layer.basis)
                ce = Pow2Matrix.__new__(Pow2Matrix)
                ce.sign, ce.exp = layer.sign, layer.exp
                bucket_step(ce, dC, self.states[i], cfg, layer.P, inplace=True)
                layer.basis = sgd_step_B(layer.basis, dB, lr_b)
                layer.invalidate()
            else:
                layer.W -= cfg.lr_dense * dWs[i]
            layer.b -= cfg.lr_dense * dbs[i]
        self.check_invariants()
        return loss

    def _eval_net(self):
        if not self.swa_count:
            return self.net
        ev = copy_net(self.net)
        for i in self.sd_idx:
            ev.layers[i].basis = self.swa[i].copy()
        return ev

    def record(self, epoch, split, data):
        loss, acc = evaluate(self._eval_net() if split != "train" else self.net, data)
        return {"epoch": epoch, "split": split, "loss": loss, "accuracy": acc,
                "ce_sparsity": ce_sparsity(self.net), "mask_violations": self.mask_violations()}

    def fit(self, train: Split, test: Split | None = None, epochs=None, callback=None):
        cfg = self.cfg
        epochs = cfg.epochs if epochs is None else epochs
        trace = [self.record(0, "train", train)]
        if test is not None:
            trace.append(self.record(0, "test", test))
        for epoch in range(1, epochs + 1):
            swa_on = cfg.swa_start_epoch is not None and epoch >= cfg.swa_start_epoch
            lr_b = cfg.swa_lr if (swa_on and cfg.swa_lr is not None) else cfg.lr_b
            for sel in _batches(len(train), cfg.batch_size, self.rng):
                self.step(train.X[sel], train.y[sel], lr_b)
                if callback is not None:
                    callback(self)
            if swa_on:
                for i in self.sd_idx:
                    self.swa[i] = swa_update(self.swa[i], self.net.layers[i].basis, self.swa_count)
                self.swa_count += 1
            trace.append(self.record(epoch, "train", train))
            if test is not None:
                trace.append(self.record(epoch, "test", test))
        return trace

    def state_dict(self) -> dict:
        """Everything needed to resume training; C_e appears only as integers."""
        out = {}
        for i, layer in enumerate(self.net.layers):
            if isinstance(layer, SDDense):
                st = self.states[i]
                out[f"{i}/ce_sign"] = layer.sign.copy()
                out[f"{i}/ce_exp"] = layer.exp.copy()
                out[f"{i}/ce_counter"] = st.counters.copy()
                out[f"{i}/ce_parked"] = st.parked.copy()
                out[f"{i}/ce_frozen"] = st.frozen.copy()
                out[f"{i}/basis"] = layer.basis.copy()
                if self.swa[i] is not None:
                    out[f"{i}/basis_swa"] = self.swa[i].copy()
            else:
                out[f"{i}/W"] = layer.W.copy()
            out[f"{i}/bias"] = layer.b.copy()
        return out

    def save_state(self, path):
        np.savez(path, **self.state_dict())


def finetune(net: ToyNet, train: Split, cfg: TrainConfig, test: Split | None = None):
    """Train an SD-form net in place; returns ``(trace, trainer)``."""
    trainer = SDTrainer(net, cfg)
    return trainer.fit(train, test), trainer


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Experiment:
    data: SyntheticDataset = SyntheticDataset()
    hidden: tuple = (32,)
    pretrain_epochs: int = 20
    pretrain_lr: float = 0.05
    sd: SDConfig = SDConfig(theta=7e-3)
    dense_lr: float = 0.05  # unconstrained baseline fine-tune


def pretrain(exp: Experiment, data: dict, task: str):
    src = data["A"] if task == "adaptation" else data["alpha"]
    n_out = len(data["classes_A"]) if task == "adaptation" else exp.data.n_classes
    net = init_dense_net((exp.data.dim, *exp.hidden, n_out), seed=exp.data.seed + 1)
    rng = np.random.default_rng(exp.data.seed + 2)
    for _ in range(exp.pretrain_epochs):
        train_dense_epoch(net, src, exp.pretrain_lr, 32, rng)
    return net


def run_task(exp: Experiment, cfg: TrainConfig, task="adaptation"):
    """Pre-train densely, then fine-tune both an SD-form copy and a dense copy.

    ``task`` is ``adaptation`` (new classes, head reset) or ``finetune``
    (same classes, continued training). Returns a dict with both traces.
    """
    if task not in ("adaptation", "finetune"):
        raise ParameterError(f"unknown task {task!r}")
    data = gen_data(exp.data)
    base = pretrain(exp, data, task)
    if task == "adaptation":
        train, test = data["B"], data["test_B"]
        reset_head(base, len(data["classes_B"]), seed=exp.data.seed + 3)
    else:
        train, test = data["beta"], data["test"]
    hidden_idx = list(range(len(base.layers) - 1))

    sd_net = to_sd_net(base, exp.sd, hidden_idx)
    sd_trace, trainer = finetune(sd_net, train, cfg, test)

    dense = copy_net(base)
    rng = np.random.default_rng(cfg.seed)
    dense_trace = [dict(epoch=0, split="test", **dict(zip(("loss", "accuracy"), evaluate(dense, test))))]
    for epoch in range(1, cfg.epochs + 1):
        train_dense_epoch(dense, train, exp.dense_lr, cfg.batch_size, rng)
        loss, acc = evaluate(dense, test)
        dense_trace.append({"epoch": epoch, "split": "test", "loss": loss, "accuracy": acc})
    return {"sd": sd_trace, "dense": dense_trace, "trainer": trainer}


def alternating_retrain(net: ToyNet, train: Split, test: Split, sd_cfg: SDConfig, lr, rounds,
                        layers=None, batch_size=32, seed=0):
    """Alternate one dense epoch with a full re-projection onto SD form.

    Returns ``(best_forms, history)``: ``best_forms`` maps layer index to its
    SD forms at the best test accuracy seen after a projection.
    """
    layers = list(range(len(net.layers) - 1)) if layers is None else list(layers)
    rng = np.random.default_rng(seed)

    def project():
        forms = {i: decompose_matrix(f"layer{i}", net.layers[i].W, sd_cfg) for i in layers}
        for i, fs in forms.items():
            net.layers[i].W = SDDense(fs, net.layers[i].W.shape).weight()
        return forms

    forms = project()
    best_acc = evaluate(net, test)[1]
    best = forms
    history = [{"round": 0, "accuracy": best_acc,
                "recon_error": {i: float(np.sqrt(sum(f.recon_error ** 2 for f in fs))) for i, fs in forms.items()}}]
    for k in range(1, rounds + 1):
        train_dense_epoch(net, train, lr, batch_size, rng)
        forms = project()
        acc = evaluate(net, test)[1]
        history.append({"round": k, "accuracy": acc,
                        "recon_error": {i: float(np.sqrt(sum(f.recon_error ** 2 for f in fs)))
                                        for i, fs in forms.items()}})
        if acc > best_acc:
            best_acc, best = acc, forms
    return best, history


def trace_jsonl(trace) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in trace)
