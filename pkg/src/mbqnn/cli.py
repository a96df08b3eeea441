"""``mbqnn`` command line.  Exit codes: 0 ok, 1 runtime/data error, 2 usage error."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import _accel
from .codec import MAX_BITS, MIN_BITS, Limiter, PrecisionConfig
from .errors import MbqnnError
from .network import FloatModel, LayerSpec, MbnPlan, ModelSpec, QuantizedModel, decompose_model, infer, quantize_model
from .modelio import load_model, read_tensor, save_model, write_tensor

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _bits(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not MIN_BITS <= v <= MAX_BITS:
        raise argparse.ArgumentTypeError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {v}")
    return v


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bits_list(text: str) -> list[int]:
    return [_bits(t) for t in text.split(",") if t.strip()]


def _limiter(text: str) -> Limiter:
    try:
        return Limiter(text.lower())
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown limiter {text!r}") from None


def _layer_override(text: str) -> tuple[int, int, int, Limiter | None]:
    """``INDEX:M:K[:LIMITER]``"""
    parts = text.split(":")
    if len(parts) not in (3, 4):
        raise argparse.ArgumentTypeError(f"expected INDEX:M:K[:LIMITER], got {text!r}")
    try:
        idx = int(parts[0])
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer index in {text!r}") from None
    return idx, _bits(parts[1]), _bits(parts[2]), _limiter(parts[3]) if len(parts) == 4 else None


def _load(path: str):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    return load_model(p)


# --- commands -----------------------------------------------------------


def cmd_demo(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prec = PrecisionConfig(2, 2)
    spec = ModelSpec(
        (16,),
        (LayerSpec.fc(16, 32, prec), LayerSpec.fc(32, 32, prec), LayerSpec.fc(32, 4, prec)),
        name="demo-mlp",
    )
    model = FloatModel.random(spec, seed=args.seed, scale=1.0)
    save_model(model, out / "demo_float.mbqn")
    x = np.random.default_rng(args.seed + 1).uniform(-1, 1, size=(8, 16)).astype(np.float32)
    write_tensor(out / "demo_input.tensor", x)
    print(f"wrote {out / 'demo_float.mbqn'} and {out / 'demo_input.tensor'}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    model = _load(args.model_in)
    if not isinstance(model, FloatModel):
        raise MbqnnError(f"{args.model_in}: expected a float-weight model, found a {type(model).__name__}")
    precs = []
    for layer in model.spec.layers:
        p = layer.precision
        precs.append(
            PrecisionConfig(
                args.bits_act or p.m_activation,
                args.bits_weight or p.k_weight,
                args.limiter or p.activation_limiter,
            )
        )
    for idx, m, k, lim in args.layer or []:
        if not 0 <= idx < len(precs):
            raise UsageError(f"--layer index {idx} out of range (model has {len(precs)} layers)")
        precs[idx] = PrecisionConfig(m, k, lim or precs[idx].activation_limiter)
    q = quantize_model(FloatModel(model.spec.with_precision(precs), model.weights, model.biases))
    out = decompose_model(q) if args.format == "plan" else q
    size = save_model(out, args.model_out)
    for i, (layer, err) in enumerate(zip(q.spec.layers, q.max_errors)):
        p = layer.precision
        print(f"layer {i}: {layer.kind} M={p.m_activation} K={p.k_weight} {p.activation_limiter.value} max_error={err:.6g}")
    print(f"wrote {args.model_out} ({size} bytes, {args.format})")
    return EXIT_OK


def cmd_infer(args) -> int:
    _accel.set_threads(args.threads)
    model = _load(args.model)
    if isinstance(model, QuantizedModel):
        model = decompose_model(model)
    if not isinstance(model, MbnPlan):
        raise MbqnnError(f"{args.model}: float models must be quantized first (mbqnn quantize)")
    if not Path(args.input).exists():
        raise FileNotFoundError(f"no such file: {args.input}")
    x = read_tensor(args.input)
    y = infer(model, x.astype(np.float64))
    write_tensor(args.out, y)
    print(f"wrote {args.out} shape={tuple(y.shape)}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suites

    _accel.set_threads(args.threads)
    results = run_suites(quick=not args.full, inject_fault=args.inject_fault, seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail} ({r.seconds:.2f}s)")
    return EXIT_OK if all(r.passed for r in results) else EXIT_ERROR


def cmd_bench(args) -> int:
    from .bench import run_benchmarks, validate_report

    _accel.set_threads(args.threads)
    if args.reps < 3:
        raise UsageError("--reps must be at least 3")
    shape = tuple(args.gemm_shape)
    if len(shape) != 2:
        raise UsageError("--gemm-shape takes ROWS,COLS")
    report = run_benchmarks(args.sizes, args.gemm_sizes, args.bits, shape, args.reps, args.backends, args.seed)
    validate_report(report)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    for r in report["ratios"]:
        print(f"{r['kernel']:>9} vs {r['baseline']:<18} [{r['backend']}] M={r['M']} K={r['K']} N={r['N']}: {r['speedup']:.2f}x")
    bad = [e for e in report["entries"] if e.get("checksum_match") is False]
    if bad:
        print(f"checksum mismatch in {len(bad)} entries", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def _read_config(path: str) -> dict:
    from .train import validate_config

    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise MbqnnError(f"{p}: invalid JSON: {exc}") from None
    return validate_config(cfg)


def cmd_train(args) -> int:
    from . import train as T

    cfg = _read_config(args.config)
    base = Path(args.config).parent
    data = T.load_dataset(cfg.get("dataset"), base)
    spec = T.spec_from_config(cfg, data)
    seed = int(cfg.get("seed", 0))
    model = FloatModel.random(spec, seed=seed, scale=cfg.get("init_scale"))
    opt = T.make_optimizer(model, cfg.get("optimizer"), cfg.get("lr"))
    history = T.fit(model, data, int(cfg.get("epochs", 100)), opt, int(cfg.get("batch_size", 32)), seed, bool(cfg.get("quantize", True)))
    model_out = args.model_out or cfg.get("model_out", "model.mbqn")
    metrics = args.metrics or cfg.get("metrics_csv", "metrics.csv")
    save_model(model, model_out)
    T.write_metrics_csv(metrics, history)
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: loss={last.loss:.6f} accuracy={last.accuracy:.4f}")
    print(f"wrote {model_out} and {metrics}")
    return EXIT_OK


def lower_report(donor: FloatModel, to_bits: int, data, epochs: int, seed: int, batch_size: int, tolerance: float = 0.10):
    """Fine-tune a lowered copy and a random-init twin; report epochs to reach the donor's loss."""
    from . import train as T

    donor_loss, donor_acc = T.evaluate(donor, data)
    target = donor_loss * (1.0 + tolerance)
    lowered = T.init_from_higher_precision(donor, to_bits)
    hit_lowered, hist_lowered = T.epochs_to_reach(lowered, data, target, epochs, seed, batch_size)
    scratch = FloatModel.random(lowered.spec, seed=seed + 1)
    hit_scratch, hist_scratch = T.epochs_to_reach(scratch, data, target, epochs, seed, batch_size)
    faster = hit_lowered is not None and (hit_scratch is None or hit_lowered < hit_scratch)
    report = {
        "to_bits": to_bits,
        "fine_tune_epochs": epochs,
        "tolerance": tolerance,
        "donor": {"loss": donor_loss, "accuracy": donor_acc},
        "target_loss": target,
        "lowered": {"epochs_to_target": hit_lowered, "history": [vars(h) for h in hist_lowered]},
        "random_init": {"epochs_to_target": hit_scratch, "history": [vars(h) for h in hist_scratch]},
        "reached_within_budget": hit_lowered is not None,
        "faster_than_random_init": faster,
    }
    return lowered, report


def cmd_lower(args) -> int:
    from . import train as T

    donor = _load(args.model)
    if not isinstance(donor, FloatModel):
        raise MbqnnError(f"{args.model}: expected a trained float (latent-weight) model")
    cfg = _read_config(args.config) if args.config else {"layers": [{"out": 1}]}
    data = T.load_dataset(cfg.get("dataset"), Path(args.config).parent if args.config else None)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    lowered, report = lower_report(donor, args.to, data, args.epochs, seed, int(cfg.get("batch_size", 32)))
    if args.out:
        save_model(lowered, args.out)
    text = json.dumps(report, indent=2)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(
        f"donor loss {report['donor']['loss']:.6f}; {args.to}-bit lowered reached target at epoch "
        f"{report['lowered']['epochs_to_target']}, random init at {report['random_init']['epochs_to_target']}"
    )
    return EXIT_OK


# --- parser -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mbqnn", description="Multi-precision quantized networks on xnor/popcount kernels.")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("demo", help="write a demo float MLP and input tensor")
    d.add_argument("--out-dir", default=".")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_demo)

    q = sub.add_parser("quantize", help="quantize a float model")
    q.add_argument("model_in")
    q.add_argument("model_out")
    q.add_argument("--bits-act", type=_bits)
    q.add_argument("--bits-weight", type=_bits)
    q.add_argument("--limiter", type=_limiter)
    q.add_argument("--layer", type=_layer_override, action="append", metavar="INDEX:M:K[:LIMITER]")
    q.add_argument("--format", choices=("plan", "quantized"), default="plan")
    q.set_defaults(func=cmd_quantize)

    i = sub.add_parser("infer", help="run a quantized model on a tensor file")
    i.add_argument("model")
    i.add_argument("input")
    i.add_argument("--out", required=True)
    i.add_argument("--threads", type=int)
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("verify", help="run the oracle equivalence suites")
    g = v.add_mutually_exclusive_group()
    g.add_argument("--quick", action="store_true", default=True)
    g.add_argument("--full", action="store_true")
    v.add_argument("--inject-fault", action="store_true", help="test hook: flip one plane bit")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--threads", type=int)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="benchmark packed kernels against float baselines")
    b.add_argument("--sizes", type=_int_list, default=[1 << 20], help="bitdot lengths")
    b.add_argument("--gemm-sizes", type=_int_list, default=[1024], help="GEMM inner dimensions")
    b.add_argument("--gemm-shape", type=_int_list, default=[32, 32], help="GEMM ROWS,COLS")
    b.add_argument("--bits", type=_bits_list, default=[1, 2, 4, 8])
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--backends", type=lambda s: [t for t in s.split(",") if t], default=None)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.add_argument("--threads", type=int)
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("config")
    t.add_argument("--model-out")
    t.add_argument("--metrics")
    t.set_defaults(func=cmd_train)

    lo = sub.add_parser("lower", help="initialize a lower-precision model from a trained one and fine-tune")
    lo.add_argument("model")
    lo.add_argument("--to", type=_bits, required=True)
    lo.add_argument("--config", help="training config supplying the dataset and batch size")
    lo.add_argument("--epochs", type=int, default=20)
    lo.add_argument("--seed", type=int)
    lo.add_argument("--out")
    lo.add_argument("--report")
    lo.set_defaults(func=cmd_lower)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mbqnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MbqnnError, OSError) as exc:
        print(f"mbqnn: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
