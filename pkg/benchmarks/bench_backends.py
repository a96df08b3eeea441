"""Compare the numba and pure-numpy backends on the hot kernels.

Run with ``python3 benchmarks/bench_backends.py``.  Each kernel is timed on
both backends with identical inputs; outputs must match bit for bit.  Pass
``--json FILE`` to also write the full schema-validated report produced by
``mbqnn.bench.run_benchmarks``.
"""

import argparse
import json
import statistics
import time

import numpy as np

from mbqnn import _accel
from mbqnn.bench import run_benchmarks, validate_report
from mbqnn.bitplane import bitdot, pack
from mbqnn.codec import PrecisionConfig
from mbqnn.kernels import EncodedTensor, mb_conv2d_int, mb_gemm_int
from mbqnn.network import FloatModel, LayerSpec, ModelSpec, decompose_model, infer, quantize_model


def median_ns(fn, reps):
    fn()  # warm-up (JIT compile on first call)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return statistics.median(times)


def cases(rng):
    n = 1 << 20
    pa, pb = pack(rng.choice([-1, 1], n)), pack(rng.choice([-1, 1], n))
    yield "bitdot N=2^20", lambda: bitdot(pa, pb)

    for bits in (1, 2, 4):
        den = (1 << bits) - 1
        x = EncodedTensor.from_levels(2 * rng.integers(0, 1 << bits, (64, 2048)) - den, bits)
        w = EncodedTensor.from_levels(2 * rng.integers(0, 1 << bits, (64, 2048)) - den, bits)
        yield f"mb_gemm 64x64x2048 M=K={bits}", lambda x=x, w=w: mb_gemm_int(x, w)

    fmap = 2 * rng.integers(0, 4, (16, 32, 32)) - 3
    kern = EncodedTensor.from_levels(2 * rng.integers(0, 4, (32, 16 * 9)) - 3, 2)
    yield "mb_conv2d 16->32 3x3 32x32", lambda: mb_conv2d_int(fmap, kern, 3, 1, 1, 2)

    p = PrecisionConfig(2, 2)
    spec = ModelSpec((256,), (LayerSpec.fc(256, 512, p), LayerSpec.fc(512, 512, p), LayerSpec.fc(512, 10, p)))
    plan = decompose_model(quantize_model(FloatModel.random(spec, seed=0)))
    batch = rng.uniform(-1, 1, (64, 256))
    yield "infer MLP 256-512-512-10 batch 64", lambda: infer(plan, batch)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the full kernel-vs-baseline report here")
    args = ap.parse_args()

    if not _accel.HAVE_NUMBA:
        print("numba is not installed; only the numpy backend is available")
    backends = [b for b in _accel.BACKENDS if b == "numpy" or _accel.HAVE_NUMBA]
    print(f"threads={_accel.get_threads()}  reps={args.reps}")
    print(f"{'kernel':<36}" + "".join(f"{b + ' ms':>12}" for b in backends) + f"{'speedup':>10}")
    prev = _accel.backend()
    try:
        for name, fn in cases(np.random.default_rng(args.seed)):
            times, outs = [], []
            for b in backends:
                _accel.set_backend(b)
                outs.append(np.asarray(fn()))
                times.append(median_ns(fn, args.reps))
            if any(not np.array_equal(outs[0], o) for o in outs[1:]):
                raise SystemExit(f"{name}: backends disagree")
            speedup = times[-1] / times[0] if len(times) > 1 else float("nan")
            print(f"{name:<36}" + "".join(f"{t / 1e6:>12.3f}" for t in times) + f"{speedup:>9.1f}x")
    finally:
        _accel.set_backend(prev)

    if args.json:
        report = run_benchmarks(reps=max(3, args.reps), backends=backends, seed=args.seed)
        validate_report(report)
        with open(args.json, "w") as fh:
            json.dump(report, fh, indent=2)
        print(f"wrote {args.json}")


if __name__ == "__main__":
    main()
