"""``sdform`` command line: decompose, encode, decode, verify, stats, train-sim.

Exit codes: 0 success, 1 validation or feasibility failure, 2 I/O or
corrupted input, 3 numerical failure. Reports are single JSON documents with
sorted keys; training traces are JSON lines.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import codec, cost, train
from .decompose import SDConfig, decompose_model
from .errors import FormatError, ParameterError, SDError, ValidationError
from .rebuild import LayerDims, count_flops, rebuild_layer
from .tensor_io import decode_container, encode_container


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation failures (exit 1), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _finite(x):
    """JSON-safe float: non-finite values become strings."""
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _finite(obj.item())
    return _finite(obj)


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _emit(report, path):
    text = dump_json(report)
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _write(path, data: bytes):
    Path(path).write_bytes(data)


def _check_paths(args, need_input=True, need_output=False, extra_inputs=()):
    """Fail fast on missing inputs or unwritable output directories."""
    inputs = ([args.input] if need_input else []) + [p for p in extra_inputs if p]
    for p in inputs:
        if p is None:
            raise ParameterError("--input is required")
        if not Path(p).is_file():
            raise FileNotFoundError(f"no such file: {p}")
    if need_output and not getattr(args, "output", None):
        raise ParameterError("--output is required")
    for p in (getattr(args, "output", None), getattr(args, "report", None)):
        if p and not Path(p).resolve().parent.is_dir():
            raise FileNotFoundError(f"output directory does not exist: {Path(p).parent}")


def _sd_config(args) -> SDConfig:
    over = {}
    for flag, key in (("theta", "theta"), ("tol", "tol"), ("max_iter", "max_iter"), ("pmin", "pmin"),
                      ("pmax", "pmax"), ("keep", "keep"), ("mode", "mode"), ("width", "width"),
                      ("block_rows", "block_rows"), ("channel_threshold", "channel_threshold")):
        val = getattr(args, flag, None)
        if val is not None:
            over[key] = val
    return SDConfig().with_overrides(over)


def _layer_configs(path):
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"layer config {path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict) or not all(isinstance(v, dict) for v in cfg.values()):
        raise FormatError("layer config must map layer names to objects")
    return cfg


def _failure_code(failures) -> int:
    return max((getattr(e, "exit_code", 1) for e in failures.values()), default=0)


def _failure_dict(failures):
    return {name: f"{type(e).__name__}: {e}" for name, e in failures.items()}


def _layer_line(layer):
    return {"name": layer.name, "kind": layer.kind, "shape": list(layer.shape),
            "skipped": layer.skipped, "recon_error": layer.recon_error(),
            "sparsity": layer.sparsity() if not layer.skipped else 0.0,
            "iterations": layer.max_iterations(), "blocks": len(layer.forms),
            "dropped_rows": list(layer.dropped_rows)}


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_decompose(args) -> int:
    _check_paths(args, need_output=True, extra_inputs=[args.layer_config])
    cfg = _sd_config(args)
    layer_cfgs = _layer_configs(args.layer_config)
    tensors = decode_container(_read(args.input))
    unknown = sorted(set(layer_cfgs) - {t.name for t in tensors})
    if unknown:
        raise ParameterError(f"layer config names unknown layers: {unknown}")
    model = decompose_model(tensors, cfg, layer_cfgs, workers=args.workers)
    _write(args.output, codec.encode_model(model))
    report = {"command": "decompose", "input": Path(args.input).name, "seed": args.seed,
              "config": cfg.to_dict(), "layers": [_layer_line(layer) for layer in model.layers],
              "failures": _failure_dict(model.failures)}
    _emit(report, args.report)
    return _failure_code(model.failures)


def cmd_encode(args) -> int:
    """SDTC holding SD factors (as written by ``decode``) -> SDM1."""
    _check_paths(args, need_output=True)
    tensors, meta = decode_container(_read(args.input), with_meta=True)
    model = codec.tensors_to_model(tensors, meta)
    raw = codec.encode_model(model)
    _write(args.output, raw)
    _, total = codec.size_report(raw)
    _emit({"command": "encode", "layers": [layer.name for layer in model.layers],
           "bytes": len(raw), "size": total.to_dict()}, args.report)
    return 0


def cmd_decode(args) -> int:
    """SDM1 -> SDTC, either the SD factors themselves or (``--dense``) rebuilt weights."""
    _check_paths(args, need_output=True)
    model = codec.decode_model(_read(args.input))
    if args.dense:
        tensors = [rebuild_layer(layer) for layer in model.layers]
        raw = encode_container(tensors)
    else:
        tensors, meta = codec.model_to_tensors(model)
        raw = encode_container(tensors, meta)
    _write(args.output, raw)
    _emit({"command": "decode", "dense": bool(args.dense), "tensors": len(tensors),
           "bytes": len(raw)}, args.report)
    return 0


def _basis_slack(layer) -> float:
    """Upper bound on how far 8-bit basis storage can move the rebuilt layer."""
    total = 0.0
    for f in layer.forms:
        m, r, n = f.dims
        step = f.basis_q.scale if f.basis_q is not None else 0.0
        total += (np.linalg.norm(f.ce.values()) * math.sqrt(r * n) * step / 2) ** 2
    return math.sqrt(total)


def cmd_verify(args) -> int:
    """Rebuild every layer of ``--model`` and compare against the ``--input`` originals."""
    _check_paths(args, extra_inputs=[args.model])
    originals = {t.name: t for t in decode_container(_read(args.input))}
    model = codec.decode_model(_read(args.model), strict=False)
    layers, failures = [], dict(model.failures)
    for layer in model.layers:
        orig = originals.get(layer.name)
        if orig is None:
            failures[layer.name] = ValidationError(f"{layer.name}: not present in the original container")
            continue
        if tuple(orig.shape) != tuple(layer.shape):
            failures[layer.name] = ValidationError(f"{layer.name}: shape {layer.shape} != original {orig.shape}")
            continue
        infeasible = sum(int(not f.ce.is_feasible(f.P)) for f in layer.forms)
        if infeasible:
            failures[layer.name] = ValidationError(f"{layer.name}: {infeasible} infeasible blocks")
            continue
        try:
            err = layer.recon_error(orig)
        except SDError as exc:
            failures[layer.name] = exc
            continue
        rel = err / max(float(np.linalg.norm(orig.data.astype(np.float64))), 1e-300)
        layers.append({"name": layer.name, "skipped": layer.skipped, "feasible": True,
                       "frobenius_error": err, "relative_error": rel, "basis_slack": _basis_slack(layer)})
    missing = sorted(set(originals) - {layer.name for layer in model.layers} - set(failures))
    report = {"command": "verify", "input": Path(args.input).name, "model": Path(args.model).name,
              "layers": layers, "missing": missing, "failures": _failure_dict(failures),
              "ok": not failures}
    _emit(report, args.report)
    return _failure_code(failures)


def cmd_stats(args) -> int:
    """Size accounting, equivalent FLOPs and energy for an SDM1 model."""
    _check_paths(args)
    raw = _read(args.input)
    per_layer, total = codec.size_report(raw)
    model = codec.decode_model(raw)
    u = cost.UnitEnergy(sram=args.sram) if args.sram is not None else cost.UnitEnergy()
    dense_specs, sd_specs, layers = [], [], []
    for layer in model.layers:
        size = per_layer[layer.name]
        dims = LayerDims.of(layer.shape, args.feature)
        W = rebuild_layer(layer).data
        density = float(np.count_nonzero(W)) / W.size
        width = layer.forms[0].dims[2] if layer.forms else 0
        dense_specs.append(cost.LayerCostSpec(layer.name, dims))
        sd_specs.append(cost.LayerCostSpec(layer.name, dims, size, density, width))
        layers.append({
            "name": layer.name, "size": size.to_dict(), "density": density,
            "flops_dense": count_flops(dims, act_bits=args.act_bits).to_dict(),
            "flops_sd": count_flops(dims, density, weight_bits=args.weight_bits, act_bits=args.act_bits,
                                    ce_nonzeros=size.nonzeros, basis_width=width).to_dict(),
        })
    dense_cost = cost.estimate_model(dense_specs, "dense", u, args.act_bits)
    sd_cost = cost.estimate_model(sd_specs, "sd", u, args.act_bits)
    report = {"command": "stats", "file_bits": 8 * len(raw), "total": total.to_dict(), "layers": layers,
              "cost": {"dense": dense_cost.to_dict(), "sd": sd_cost.to_dict(dense_cost)},
              "memory_compute_ratio": cost.memory_compute_ratio(u)}
    _emit(report, args.report)
    return 0


def cmd_train_sim(args) -> int:
    """Synthetic fine-tune/adaptation run; writes the metrics trace as JSON lines."""
    _check_paths(args, need_input=False)
    cfg = train.TrainConfig(
        theta_g=args.theta_g, theta_c=args.theta_c, lr_b=args.lr_b, lr_dense=args.lr_dense,
        epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
        swa_start_epoch=args.swa_start, sign_convention=args.sign_convention)
    sd = _sd_config(args) if any(getattr(args, k, None) is not None for k in ("theta", "pmin", "pmax")) \
        else train.Experiment().sd
    exp = train.Experiment(data=train.SyntheticDataset(seed=args.seed, n_classes=args.classes, dim=args.dim),
                           hidden=tuple(args.hidden), sd=sd)
    res = train.run_task(exp, cfg, args.task)
    trace = train.trace_jsonl(_jsonable(res["sd"]))
    if args.output:
        Path(args.output).write_text(trace)
    else:
        sys.stdout.write(trace)
    if args.state:
        res["trainer"].save_state(args.state)
    final = [r for r in res["sd"] if r["split"] == "test"][-1]
    report = {"command": "train-sim", "task": args.task, "seed": args.seed,
              "config": {k: _finite(v) for k, v in vars(cfg).items()},
              "sd_config": sd.to_dict(), "final_test": final,
              "dense_test": res["dense"][-1]["accuracy"],
              "dense_trace": res["dense"]}
    if args.report:
        _emit(report, args.report)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _theta_g(text):
    try:
        val = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if math.isnan(val) or val < 0:
        raise argparse.ArgumentTypeError("theta-g must be >= 0 (inf allowed)")
    return val


def build_parser():
    io = argparse.ArgumentParser(add_help=False)
    io.add_argument("--input", help="input file")
    io.add_argument("--output", help="output file")
    io.add_argument("--report", help="write the JSON report here instead of stdout")
    io.add_argument("--seed", type=int, default=0)

    sd = argparse.ArgumentParser(add_help=False)
    sd.add_argument("--layer-config", help="JSON object of per-layer overrides")
    sd.add_argument("--theta", type=float, help="element sparsity threshold")
    sd.add_argument("--tol", type=float, help="quantization-gap stopping tolerance")
    sd.add_argument("--max-iter", type=int)
    sd.add_argument("--pmin", type=int)
    sd.add_argument("--pmax", type=int)
    sd.add_argument("--keep", type=float, help="fraction of C_e rows kept in vector mode")
    sd.add_argument("--mode", choices=("element", "vector", "element+vector"))
    sd.add_argument("--width", type=int, help="basis width for FC layers")
    sd.add_argument("--block-rows", type=int)
    sd.add_argument("--channel-threshold", type=float)
    sd.add_argument("--workers", type=int, default=1)

    tr = argparse.ArgumentParser(add_help=False)
    tr.add_argument("--theta-g", type=_theta_g, default=train.TrainConfig.theta_g)
    tr.add_argument("--theta-c", type=int, default=train.TrainConfig.theta_c)
    tr.add_argument("--sign-convention", choices=sorted(train.CONVENTIONS), default="paper")
    tr.add_argument("--epochs", type=int, default=20)
    tr.add_argument("--lr-b", type=float, default=train.TrainConfig.lr_b)
    tr.add_argument("--lr-dense", type=float, default=train.TrainConfig.lr_dense)
    tr.add_argument("--batch-size", type=int, default=train.TrainConfig.batch_size)
    tr.add_argument("--swa-start", type=int, help="first epoch averaged into B")
    tr.add_argument("--task", choices=("adaptation", "finetune"), default="adaptation")
    tr.add_argument("--classes", type=int, default=4)
    tr.add_argument("--dim", type=int, default=16)
    tr.add_argument("--hidden", type=int, nargs="+", default=[32])
    tr.add_argument("--state", help="save the final training state (.npz)")

    p = _Parser(prog="sdform", description="Power-of-two weight re-modeling toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("decompose", parents=[io, sd], help="SDTC -> SDM1").set_defaults(func=cmd_decompose)
    sub.add_parser("encode", parents=[io], help="SD factors in SDTC -> SDM1").set_defaults(func=cmd_encode)
    d = sub.add_parser("decode", parents=[io], help="SDM1 -> SDTC")
    d.add_argument("--dense", action="store_true", help="write rebuilt dense weights")
    d.set_defaults(func=cmd_decode)
    v = sub.add_parser("verify", parents=[io], help="check an SDM1 model against its SDTC source")
    v.add_argument("--model", required=True)
    v.set_defaults(func=cmd_verify)
    s = sub.add_parser("stats", parents=[io], help="size, FLOPs and energy report")
    s.add_argument("--feature", type=int, default=1, help="output map side for conv layers")
    s.add_argument("--act-bits", type=int, default=8)
    s.add_argument("--weight-bits", type=int, default=8)
    s.add_argument("--sram", type=float, help="SRAM unit energy, between the small- and large-array costs")
    s.set_defaults(func=cmd_stats)
    sub.add_parser("train-sim", parents=[io, sd, tr], help="synthetic SD training run").set_defaults(
        func=cmd_train_sim)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
