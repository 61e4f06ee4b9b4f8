"""Acceptance checks, one test per criterion.

Each test is tagged with ``criterion(n, title)``; ``conftest.py`` prints one
PASS/FAIL line per criterion at the end of the run. Run this file directly
(``python tests/test_acceptance.py``) for just these checks.
"""
import itertools
import json
import math
import time

import numpy as np
import pytest

from sdform import codec
from sdform.cli import main as cli_main
from sdform.cost import UnitEnergy, memory_compute_ratio
from sdform.decompose import MODES, SDConfig, sd_decompose
from sdform.quant import ExponentSet, Pow2Matrix
from sdform.rebuild import LayerDims, SDDense, ToyNet, count_flops, forward, rebuild
from sdform.reshape import reshape_array
from sdform.train import (
    Experiment,
    SyntheticDataset,
    TrainConfig,
    backprop,
    decompose_matrix,
    gen_data,
    grads_factored,
    init_dense_net,
    run_task,
    to_sd_net,
)
from sdform.tensor_io import WeightTensor, save_container


def criterion(number, title):
    return pytest.mark.criterion(number=number, title=title)


def log(msg):
    print(f"    {msg}")


# ---------------------------------------------------------------- 1
@criterion(1, "energy-constant lock: sram_lo / mac >= 9.5")
def test_energy_constant_lock():
    ratio = memory_compute_ratio(UnitEnergy())
    log(f"ratio = {ratio:.4f}")
    assert ratio >= 9.5
    assert math.isclose(ratio, 9.51, abs_tol=5e-3)


# ---------------------------------------------------------------- 2 and 3
def random_suite(count=200, seed=2024):
    """Random matrices up to 128x3 under a rotating set of sparsity configurations."""
    rng = np.random.default_rng(seed)
    for i in range(count):
        m, n = int(rng.integers(1, 129)), int(rng.integers(1, 4))
        mode = MODES[i % len(MODES)]
        p_min = int(rng.integers(-10, -1))
        cfg = SDConfig(theta=float(rng.choice([0.0, 4e-3, 2e-2, 0.1])), sparsity_mode=mode,
                       keep=float(rng.choice([0.25, 0.5, 0.8, 1.0])),
                       P=ExponentSet(p_min, int(rng.integers(p_min, min(p_min + 15, 3) + 1))),
                       max_iter=int(rng.integers(1, 31)))
        scale = 10.0 ** rng.uniform(-3, 2)
        W = rng.standard_normal((m, n)) * scale
        if i % 5 == 0:
            W[rng.random((m, n)) < 0.5] = 0.0
        if i % 7 == 0:  # padded reshape of one long row
            (W,) = reshape_array(f"row{i}", rng.standard_normal((1, m * n - (n > 1))) * scale, n, 128)
        yield cfg, W


@pytest.fixture(scope="module")
def suite_runs():
    t0 = time.perf_counter()
    runs = [(cfg, W, *sd_decompose(W, cfg)) for cfg, W in random_suite()]
    log(f"200 decompositions in {time.perf_counter() - t0:.1f}s")
    return runs


@criterion(2, "feasibility suite: 200 random matrices satisfy the power-of-2 and keep constraints")
def test_feasibility_suite(suite_runs):
    for cfg, W, form, _ in suite_runs:
        ce = form.ce
        assert ce.is_feasible(cfg.P)
        vals = ce.values()[ce.mask]
        assert np.all(np.isin(vals, cfg.P.candidates()))
        if cfg.sparsity_mode != "element":
            m = ce.shape[0]
            allowed = m - math.floor(m * (1 - cfg.keep) + 1e-9)
            assert int(ce.mask.any(axis=1).sum()) <= allowed
        if hasattr(W, "pad_mask"):
            assert not ce.sign[W.pad_mask()].any()
    assert len(suite_runs) == 200


@criterion(3, "least-squares monotonicity: no fit step raises the residual beyond relative 1e-9")
def test_ls_monotonicity(suite_runs):
    steps = 0
    for _, W, _, trace in suite_runs:
        values = W.values if hasattr(W, "values") else W
        # ridge shrinkage plus solver roundoff, for residuals that are already ~0
        floor = (2 * SDConfig().ridge + 1e-13) * float(np.linalg.norm(values))
        for rec in trace.records:
            assert rec.res_fit_basis <= rec.res_quantized * (1 + 1e-9) + floor
            assert rec.res_fit_coeff <= rec.res_fit_basis * (1 + 1e-9) + floor
            steps += 2
    log(f"{steps} fit steps checked")


# ---------------------------------------------------------------- 4
def planted_instances():
    c1 = np.array([0.5, 0.5, 0.5, 0.5])
    c2 = np.array([0.5, -0.5, 0.5, -0.5])
    return {
        "identity4": (np.eye(4), SDConfig(theta=0.1)),
        "scaled_identity3": (2 * np.eye(3), SDConfig()),
        "orthonormal_columns": (np.stack([c1, c2, np.zeros(4)], axis=1), SDConfig()),
    }


@criterion(4, "planted recovery and idempotence: Frobenius error <= 1e-9")
def test_planted_recovery():
    for name, (W, cfg) in planted_instances().items():
        form, _ = sd_decompose(W, cfg)
        again, _ = sd_decompose(form.rebuild(), cfg)
        log(f"{name}: error {form.recon_error:.2e}, re-decomposed {again.recon_error:.2e}")
        assert form.recon_error <= 1e-9
        assert again.recon_error <= 1e-9
        assert np.linalg.norm(again.rebuild() - form.rebuild()) <= 1e-9


# ---------------------------------------------------------------- 5
def entropy_bits(symbols):
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def check_codec(ce, P):
    enc = codec.encode_coeff(ce, P)
    assert codec.decode_coeff(*enc, ce.shape, P) == ce
    syms = codec.symbol_ids(ce, P)
    if syms.size:
        assert enc[3] / syms.size <= entropy_bits(syms) + 1 + 1e-12


@criterion(5, "codec round trip on 1000 random and all 625 2x2 |P|=2 matrices; avg length <= H + 1")
def test_codec_roundtrip():
    rng = np.random.default_rng(5)
    for i in range(1000):
        p_min = int(rng.integers(-12, 1))
        P = ExponentSet(p_min, p_min + int(rng.integers(0, 16)))
        shape = (int(rng.integers(1, 65)), int(rng.integers(1, 5)))
        sign = rng.choice(np.array([-1, 0, 1], np.int8), size=shape, p=[0.35, 0.3, 0.35])
        # skewed exponent use, like real coefficients
        w = rng.dirichlet(np.full(len(P), 0.5))
        exp = np.where(sign != 0, rng.choice(np.arange(P.p_min, P.p_max + 1), size=shape, p=w), 0)
        check_codec(Pow2Matrix(sign, exp.astype(np.int8)), P)
    P2 = ExponentSet(-1, 0)
    cells = [(0, 0)] + [(s, e) for s in (-1, 1) for e in (-1, 0)]
    count = 0
    for combo in itertools.product(cells, repeat=4):
        sign = np.array([c[0] for c in combo], np.int8).reshape(2, 2)
        exp = np.array([c[1] for c in combo], np.int8).reshape(2, 2)
        check_codec(Pow2Matrix(sign, exp), P2)
        count += 1
    assert count == 625


# ---------------------------------------------------------------- 6
@criterion(6, "shift-add rebuild equals the naive multiply bit for bit on 1000 pairs")
def test_shift_add_exactness():
    rng = np.random.default_rng(6)
    P = ExponentSet()
    for _ in range(1000):
        m, r, n = int(rng.integers(1, 65)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        sign = rng.choice(np.array([-1, 0, 1], np.int8), size=(m, r))
        exp = np.where(sign != 0, rng.integers(P.p_min, P.p_max + 1, (m, r)), 0).astype(np.int8)
        ce = Pow2Matrix(sign, exp)
        B = rng.standard_normal((r, n)) * 10.0 ** rng.uniform(-4, 4)
        C = ce.values()
        naive = np.zeros((m, n))
        for k in range(r):  # textbook i-j-k order, k innermost
            naive = naive + C[:, k:k + 1] * B[k:k + 1, :]
        assert rebuild(ce, B).tobytes() == naive.tobytes()


# ---------------------------------------------------------------- 7
def rel_err(num, ana):
    return float(np.max(np.abs(num - ana)) / max(np.max(np.abs(num)), 1e-8))


def central_diff(f, x, h=1e-4):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        dn = f()
        x[idx] = old
        g[idx] = (up - dn) / (2 * h)
    return g


def kink_margin(net, X, weights):
    """Smallest |pre-activation| over the hidden ReLUs."""
    h, margin = X, np.inf
    for layer, W in zip(net.layers[:-1], weights[:-1]):
        z = h @ W.T + layer.b
        margin = min(margin, float(np.min(np.abs(z))))
        h = np.maximum(z, 0.0)
    return margin


@criterion(7, "backprop and factored gradients match central differences (1e-4 rel) on 50 nets")
def test_gradient_oracle():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        dims = [int(rng.integers(2, 7)) for _ in range(int(rng.integers(2, 5)))]
        net = init_dense_net(dims, seed=seed)
        for layer in net.layers:
            layer.b = rng.standard_normal(layer.b.shape) * 0.1
        Ws = [layer.W for layer in net.layers]
        sd = SDDense(decompose_matrix("l0", net.layers[0].W, SDConfig(theta=0.0)), net.layers[0].W.shape,
                     net.layers[0].b)
        sdnet = ToyNet([sd] + net.layers[1:])
        # central differences are only meaningful away from ReLU kinks
        while True:
            X = rng.standard_normal((5, dims[0]))
            if min(kink_margin(net, X, Ws), kink_margin(sdnet, X, [sd.weight()] + Ws[1:])) > 1e-2:
                break
        y = rng.integers(0, dims[-1], 5)
        dWs, dbs, _ = backprop(net, X, y)
        for i, layer in enumerate(net.layers):
            num_W = central_diff(lambda: forward(net, X, y, weights=Ws)[1], layer.W)
            num_b = central_diff(lambda: forward(net, X, y, weights=Ws)[1], layer.b)
            worst = max(worst, rel_err(num_W, dWs[i]), rel_err(num_b, dbs[i]))

        # factored path: first layer in SD form, perturb C_e values and B directly
        C = sd.sign * np.ldexp(1.0, sd.exp.astype(np.int32))
        B = sd.basis.copy()

        def weight_from(C, B):
            W = np.zeros(sd.out_dim * sd.in_dim)
            W[sd.index[sd.valid]] = (C @ B)[sd.valid]
            return W.reshape(sd.out_dim, sd.in_dim)

        def loss():
            return forward(sdnet, X, y, weights=[weight_from(C, B)] + Ws[1:])[1]

        dW = backprop(sdnet, X, y, weights=[weight_from(C, B)] + Ws[1:])[0][0]
        dB, dC = grads_factored(sd.gather(dW), C, B)
        worst = max(worst, rel_err(central_diff(loss, B), dB), rel_err(central_diff(loss, C), dC))
    log(f"worst relative error {worst:.2e}")
    assert worst <= 1e-4


# ---------------------------------------------------------------- 8
@criterion(8, "30-epoch fine-tune keeps the mask, feasibility and counter bounds; state is integer-only")
def test_training_invariants():
    data = gen_data(SyntheticDataset(seed=8, train_per_class=60, test_per_class=30))
    net = init_dense_net((16, 24, 4), seed=8)
    sd_net = to_sd_net(net, SDConfig(theta=7e-3), [0])
    cfg = TrainConfig(epochs=30, seed=8)
    initial_zero = sd_net.layers[0].sign == 0
    steps = [0]

    def check(trainer):
        layer, st = trainer.net.layers[0], trainer.states[0]
        assert not layer.sign[initial_zero].any()
        nz = layer.sign != 0
        assert np.all((layer.exp[nz] >= layer.P.p_min) & (layer.exp[nz] <= layer.P.p_max))
        assert not layer.exp[~nz].any()
        assert np.all(np.abs(st.counters.astype(int)) <= cfg.theta_c)
        steps[0] += 1

    from sdform.train import SDTrainer
    trainer = SDTrainer(sd_net, cfg)
    trace = trainer.fit(data["alpha"], data["test"], callback=check)
    assert all(r["mask_violations"] == 0 for r in trace)
    assert trace[-1]["epoch"] == 30
    moved = int((trainer.net.layers[0].exp != to_sd_net(net, SDConfig(theta=7e-3), [0]).layers[0].exp).sum())
    log(f"{steps[0]} steps checked, {moved} coefficient exponents moved")
    state = trainer.state_dict()
    for key, arr in state.items():
        if "/ce_" in key:
            assert arr.dtype.kind in "ib", key
        else:
            assert key.endswith(("/basis", "/basis_swa", "/bias", "/W")), key
    ce_vals = trainer.net.layers[0].sign * np.ldexp(1.0, trainer.net.layers[0].exp.astype(np.int32))
    for arr in state.values():
        if arr.dtype.kind == "f" and arr.shape == ce_vals.shape:
            assert not np.allclose(arr, ce_vals)


# ---------------------------------------------------------------- 9
@criterion(9, "SD training on the 2-class adaptation task: median >= 95% of dense, steep first epoch")
def test_sdt_efficacy():
    ratios = []
    for seed in range(5):
        res = run_task(Experiment(data=SyntheticDataset(seed=seed)), TrainConfig(epochs=20, seed=seed))
        sd = np.array([r["accuracy"] for r in res["sd"] if r["split"] == "test"])
        dense = np.array([r["accuracy"] for r in res["dense"]])
        jump = sd[1] - sd[0]
        later = (sd[-1] - sd[1]) / (len(sd) - 2)
        ratios.append(sd[-1] / dense[-1])
        log(f"seed {seed}: sd {sd[0]:.3f}->{sd[1]:.3f}->{sd[-1]:.3f}, dense {dense[-1]:.3f}, "
            f"epoch-1 jump {jump:.3f} vs later {later:.4f}/epoch")
        assert jump > later
    log(f"median ratio {np.median(ratios):.4f}")
    assert np.median(ratios) >= 0.95


# ---------------------------------------------------------------- 10
@criterion(10, "accounting: 2x2 worked example bit counts and 75,497,472 conv FLOPs")
def test_accounting():
    P = ExponentSet()
    ce = Pow2Matrix.from_values([[0.5, 0.0], [0.0, -0.5]], P)
    from sdform.decompose import SDForm
    rep = codec.record_size(codec.encode_layer(SDForm(ce, np.eye(2), P)), original_bits=128)
    got = (rep.original_bits, rep.bitmap_bits, rep.payload_bits, rep.code_bits, rep.codebook_bits,
           rep.basis_bits, rep.header_bits)
    # 4 flags -> 1 byte; 2 one-bit codes -> 1 byte; 1 + 2*2 codebook bytes; 4 int8 + f32 scale;
    # u32 m, r, n, i8 p_min, p_max, u32 payload length
    assert got == (128, 8, 8, 2, 40, 64, 144)
    assert count_flops(LayerDims(64, 64, 3, 3, 32, 32)).equivalent_flops == 75_497_472


# ---------------------------------------------------------------- 11
@criterion(11, "decompose + verify are byte-identical across runs and worker counts")
def test_end_to_end_determinism(tmp_path):
    rng = np.random.default_rng(11)
    save_container([
        WeightTensor.from_array("conv1", rng.standard_normal((8, 3, 3, 3)) * 0.2),
        WeightTensor.from_array("conv2", rng.standard_normal((6, 8, 1, 1)) * 0.2),
        WeightTensor.from_array("fc", rng.standard_normal((10, 50)) * 0.1),
    ], tmp_path / "fixture.sdtc")
    outputs = []
    for run, workers in enumerate([1, 1, 2, 4]):
        d = tmp_path / f"run{run}"
        d.mkdir()
        assert cli_main(["decompose", "--input", str(tmp_path / "fixture.sdtc"), "--output", str(d / "m.sdm1"),
                         "--report", str(d / "decompose.json"), "--workers", str(workers)]) == 0
        assert cli_main(["verify", "--input", str(tmp_path / "fixture.sdtc"), "--model", str(d / "m.sdm1"),
                         "--report", str(d / "verify.json")]) == 0
        outputs.append(tuple((d / f).read_bytes() for f in ("m.sdm1", "decompose.json", "verify.json")))
    assert all(o == outputs[0] for o in outputs)
    assert json.loads(outputs[0][2])["ok"]


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
