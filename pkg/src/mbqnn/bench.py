"""Micro-benchmarks: packed kernels vs float baselines, on both backends.

Timings are wall-clock (``perf_counter_ns``) after one warm-up call, so
numba compilation is excluded.  Each entry carries a checksum of its exact
output: integer accumulators for the packed kernels and, for the float
baselines, the same integers recovered from the float result, so a
matching checksum shows both computed the same thing.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Callable, Sequence

import numpy as np

from . import _accel
from .bitplane import pack, bitdot
from .codec import levels_den
from .kernels import EncodedTensor, dot_reference_float, gemm_reference_float, mb_gemm_int

MIN_REPETITIONS = 3


@dataclass
class BenchEntry:
    kernel: str
    backend: str
    M: int
    K: int
    N: int
    rows: int
    cols: int
    repetitions: int
    wall_ns: int
    wall_ns_all: list[int]
    throughput: float
    checksum: str
    reference_checksum: str | None = None
    checksum_match: bool | None = None


def checksum(values) -> str:
    arr = np.ascontiguousarray(np.asarray(values, dtype="<i8"))
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


def _time(fn: Callable[[], object], reps: int) -> tuple[list[int], list[str], object]:
    out = fn()  # warm-up / JIT
    times, sums = [], []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        out = fn()
        times.append(time.perf_counter_ns() - t0)
        sums.append(out)
    return times, sums, out


def _entry(kernel, backend, m, k, n, rows, cols, reps, fn, to_int) -> BenchEntry:
    times, outs, _ = _time(fn, reps)
    sums = {checksum(to_int(o)) for o in outs}
    if len(sums) != 1:
        raise RuntimeError(f"{kernel}: output changed between repetitions")
    wall = int(statistics.median(times))
    work = rows * cols * n
    return BenchEntry(kernel, backend, m, k, n, rows, cols, reps, wall, times, work / (wall * 1e-9), sums.pop())


def bench_dot(n: int, reps: int, backend: str, seed: int = 0) -> list[BenchEntry]:
    rng = np.random.default_rng(seed)
    s = rng.choice(np.array([-1, 1]), size=n)
    t = rng.choice(np.array([-1, 1]), size=n)
    pa, pb = pack(s), pack(t)
    fa, fb = s.astype(np.float64), t.astype(np.float64)
    prev = _accel.set_backend(backend)
    try:
        packed = _entry("bitdot", backend, 1, 1, n, 1, 1, reps, lambda: bitdot(pa, pb), lambda v: [v])
        ref = _entry("dot_float", backend, 1, 1, n, 1, 1, reps, lambda: dot_reference_float(fa, fb), lambda v: [round(v)])
    finally:
        _accel.set_backend(prev)
    packed.reference_checksum = ref.checksum
    packed.checksum_match = packed.checksum == ref.checksum
    return [packed, ref]


def bench_gemm(n: int, bits: Sequence[int], rows: int, cols: int, reps: int, backend: str, seed: int = 0) -> list[BenchEntry]:
    rng = np.random.default_rng(seed)
    out = []
    prev = _accel.set_backend(backend)
    try:
        for b in bits:
            den = levels_den(b)
            nx = 2 * rng.integers(0, 1 << b, size=(rows, n)) - den
            nw = 2 * rng.integers(0, 1 << b, size=(cols, n)) - den
            ex, ew = EncodedTensor.from_levels(nx, b), EncodedTensor.from_levels(nw, b)
            packed = _entry("mb_gemm", backend, b, b, n, rows, cols, reps, lambda: mb_gemm_int(ex, ew), lambda v: v)
            xq, wq = nx / den, (nw / den).T.copy()
            ref = _entry(
                "gemm_float", backend, b, b, n, rows, cols, reps,
                lambda: gemm_reference_float(xq, wq), lambda v: np.round(v * den * den).astype(np.int64),
            )
            packed.reference_checksum = ref.checksum
            packed.checksum_match = packed.checksum == ref.checksum
            out += [packed, ref]
    finally:
        _accel.set_backend(prev)
    return out


def _ratios(entries: list[BenchEntry]) -> list[dict]:
    index = {(e.kernel, e.backend, e.M, e.N): e for e in entries}
    ratios = []
    for e in entries:
        base = {"bitdot": "dot_float", "mb_gemm": "gemm_float"}.get(e.kernel)
        if base is None:
            continue
        ref = index.get((base, e.backend, e.M, e.N))
        if ref is not None:
            ratios.append({
                "kernel": e.kernel, "baseline": base, "backend": e.backend,
                "M": e.M, "K": e.K, "N": e.N, "speedup": ref.wall_ns / max(e.wall_ns, 1),
            })
    # numba vs numpy on the same kernel
    for e in entries:
        if e.backend == "numba":
            other = index.get((e.kernel, "numpy", e.M, e.N))
            if other is not None:
                ratios.append({
                    "kernel": e.kernel, "baseline": f"{e.kernel}[numpy]", "backend": "numba",
                    "M": e.M, "K": e.K, "N": e.N, "speedup": other.wall_ns / max(e.wall_ns, 1),
                })
    return ratios


def run_benchmarks(
    dot_sizes: Sequence[int] = (1 << 20,),
    gemm_sizes: Sequence[int] = (1024,),
    bits: Sequence[int] = (1, 2, 4, 8),
    gemm_shape: tuple[int, int] = (32, 32),
    reps: int = 5,
    backends: Sequence[str] | None = None,
    seed: int = 0,
) -> dict:
    if reps < MIN_REPETITIONS:
        raise ValueError(f"repetitions must be >= {MIN_REPETITIONS}")
    if backends is None:
        backends = [b for b in _accel.BACKENDS if b != "numba" or _accel.HAVE_NUMBA]
    entries: list[BenchEntry] = []
    for be in backends:
        for n in dot_sizes:
            entries += bench_dot(n, reps, be, seed)
        for n in gemm_sizes:
            entries += bench_gemm(n, bits, gemm_shape[0], gemm_shape[1], reps, be, seed)
    return {
        "environment": {
            "threads": _accel.get_threads(),
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "platform": platform.platform(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "cpu_count": os.cpu_count(),
            "default_backend": _accel.backend(),
        },
        "entries": [asdict(e) for e in entries],
        "ratios": _ratios(entries),
    }


def report_schema() -> dict:
    return json.loads(resources.files("mbqnn.schemas").joinpath("bench_report.schema.json").read_text())


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, report_schema())
