"""Time the numba and pure-numpy kernel paths on identical inputs.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Each kernel is warmed up once (so JIT compilation is excluded), outputs of
the two paths are checked for equality, then the best of ``--repeat`` runs
is reported.
"""
import argparse
import json
import sys
import time

import numpy as np

from sdform import _kernels as K
from sdform import codec
from sdform.quant import ExponentSet, Pow2Matrix

P = ExponentSet()


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def make_cases(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(2_000_000) * 0.3

    G, m, r, n = 2048, 64, 3, 3
    sign = rng.choice(np.array([-1, 0, 1], np.int8), size=(G, m, r))
    exp = np.where(sign != 0, rng.integers(-7, 1, (G, m, r)), 0).astype(np.int8)
    basis = rng.standard_normal((G, r, n))

    size = 1_000_000
    bsign = rng.choice(np.array([-1, 0, 1], np.int8), size=size)
    bexp = np.where(bsign != 0, rng.integers(-7, 1, size), 0).astype(np.int8)
    grads = rng.standard_normal((8, size)) * 0.01

    ce = Pow2Matrix(sign.reshape(-1, r), exp.reshape(-1, r))
    bitmap, book, payload, nbits = codec.encode_coeff(ce, P)
    tables = codec._decode_tables(dict(book))
    buf = np.frombuffer(payload, np.uint8)

    def bucket(step_fn):
        state = [bsign.copy(), bexp.copy(), np.zeros(size, np.int8), np.zeros(size, np.int8), bsign == 0]

        def run():
            for g in grads:
                step_fn(*state, g, 5e-3, 7, -7, 0, 1)
            return state
        return run

    return {
        "pow2_project (2M values)": (
            lambda: K.pow2_project_np(x, -7, 0), lambda: K.pow2_project_nb(x, -7, 0)),
        "shift_add_rebuild (2048 x 64x3 @ 3x3)": (
            lambda: K.shift_add_rebuild_np(sign, exp, basis), lambda: K.shift_add_rebuild_nb(sign, exp, basis)),
        "bucket_step (1M entries x 8 steps)": (bucket(K.bucket_step_np), bucket(K.bucket_step_nb)),
        f"huffman_decode ({ce.nnz()} symbols)": (
            lambda: K.huffman_decode_np(buf, nbits, ce.nnz(), *tables),
            lambda: K.huffman_decode_nb(buf, nbits, ce.nnz(), *tables)),
    }


def same(a, b):
    if isinstance(a, np.ndarray):
        return a.tobytes() == b.tobytes()
    if isinstance(a, (tuple, list)):
        return all(same(x, y) for x, y in zip(a, b))
    return a == b


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1

    rows = []
    print(f"{'kernel':42s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, (np_fn, nb_fn) in make_cases().items():
        if not same(np_fn(), nb_fn()):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        t_np = best_of(np_fn, args.repeat)
        t_nb = best_of(nb_fn, args.repeat)
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb})
        print(f"{name:42s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
