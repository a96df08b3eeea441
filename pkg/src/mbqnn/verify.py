"""Self-check suites behind ``mbqnn verify``.

Each suite compares a production path with an independent oracle and
reports pass/fail.  ``inject_fault`` flips one bit of a packed activation
plane inside the equivalence suite to prove the check can fail.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .bitplane import PackedPlane
from .codec import (
    decode,
    encode,
    encode_array,
    encode_trig2_array,
    level_values,
    levels_den,
    quantize_codes,
    quantize_levels,
)
from .kernels import EncodedTensor, dot_zero_one, mb_dot, mb_dot_int, mb_gemm_int

TRIG_BREAKS = np.array([-2.0 / 3.0, 0.0, 2.0 / 3.0])


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def random_levels(rng: np.random.Generator, bits: int, size) -> np.ndarray:
    return 2 * rng.integers(0, 1 << bits, size=size) - levels_den(bits)


def _flip_bit(p: PackedPlane, index: int) -> PackedPlane:
    words = p.words.copy()
    words[index // 64] ^= np.uint64(1) << np.uint64(index % 64)
    return PackedPlane(words, p.length)


def exact_equivalence(trials: int, max_n: int = 4096, seed: int = 0, inject_fault: bool = False) -> tuple[bool, str]:
    """mb_dot's integer accumulator vs the integer dot product of the levels."""
    rng = np.random.default_rng(seed)
    failures = 0
    for t in range(trials):
        m, k = (int(v) for v in rng.integers(1, 9, size=2))
        n = int(rng.integers(1, max_n + 1))
        nx, nw = random_levels(rng, m, (1, n)), random_levels(rng, k, (1, n))
        xrow = EncodedTensor.from_levels(nx, m).row(0)
        wrow = EncodedTensor.from_levels(nw, k).row(0)
        if inject_fault and t == 0:
            xrow[0] = _flip_bit(xrow[0], int(rng.integers(0, n)))
        oracle = int(sum(int(a) * int(b) for a, b in zip(nx[0].tolist(), nw[0].tolist())))
        if mb_dot_int(xrow, wrow) != oracle:
            failures += 1
    # matrix form on a few shapes
    for _ in range(max(1, trials // 100)):
        m, k = (int(v) for v in rng.integers(1, 9, size=2))
        n = int(rng.integers(1, min(max_n, 700) + 1))
        nx, nw = random_levels(rng, m, (5, n)), random_levels(rng, k, (3, n))
        got = mb_gemm_int(EncodedTensor.from_levels(nx, m), EncodedTensor.from_levels(nw, k))
        if not np.array_equal(got, nx @ nw.T):
            failures += 1
    return failures == 0, f"{failures} mismatches in {trials} dot trials (+ gemm spot checks)"


def codec_roundtrip(samples: int, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    problems = []
    x = np.sort(rng.uniform(-1.0, 1.0, samples))
    for m in range(1, 9):
        den = levels_den(m)
        signs = encode_array(x, m)
        n = (signs.astype(np.int64) << np.arange(m)).sum(axis=-1)
        if not np.array_equal(n, quantize_levels(x, m)):
            problems.append(f"m={m}: encode/quantize disagree")
        decoded = n / den
        if np.max(np.abs(decoded - x)) > 1.0 / den:
            problems.append(f"m={m}: error bound exceeded")
        if np.any(np.diff(decoded) < 0):
            problems.append(f"m={m}: not monotone")
        if not np.all(np.isin(decoded, level_values(m))):
            problems.append(f"m={m}: off-grid values")
        for xi in x[:: max(1, samples // 50)]:
            if decode(encode(float(xi), m)) != quantize_levels(xi, m) / den:
                problems.append(f"m={m}: scalar round trip failed at {xi}")
                break
    return not problems, "; ".join(problems) or f"8 bit widths x {samples} samples"


def trig_agreement(samples: int, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, samples)
    x = x[np.min(np.abs(x[:, None] - TRIG_BREAKS[None, :]), axis=1) > 1e-9]
    low, high = encode_trig2_array(x)
    r = quantize_codes(x, 2)
    ok = (low == 2 * (r & 1) - 1) & (high == 2 * ((r >> 1) & 1) - 1)
    bad = int((~ok).sum())
    return bad == 0, f"{bad} disagreements in {x.size} samples"


def zero_one_vs_pm1(instances: int, max_n: int = 256, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        m, k = (int(v) for v in rng.integers(1, 9, size=2))
        n = int(rng.integers(1, max_n + 1))
        rx = rng.integers(0, 1 << m, size=n)
        rw = rng.integers(0, 1 << k, size=n)
        nx, nw = 2 * rx - levels_den(m), 2 * rw - levels_den(k)
        pm1 = mb_dot(EncodedTensor.from_levels(nx[None], m).row(0), EncodedTensor.from_levels(nw[None], k).row(0))
        worst = max(worst, abs(dot_zero_one(rx, rw, m, k) - pm1))
    return worst <= 1e-9, f"max |diff| = {worst:.3e} over {instances} instances"


def run_suites(quick: bool = True, inject_fault: bool = False, seed: int = 0) -> list[SuiteResult]:
    plan = [
        ("exact-equivalence", lambda: exact_equivalence(500 if quick else 10_000, 1024 if quick else 4096, seed, inject_fault)),
        ("codec-roundtrip", lambda: codec_roundtrip(2_000 if quick else 20_000, seed)),
        ("trig-agreement", lambda: trig_agreement(100_000 if quick else 1_000_000, seed)),
        ("zero-one-vs-pm1", lambda: zero_one_vs_pm1(200 if quick else 1_000, seed=seed)),
    ]
    results = []
    for name, fn in plan:
        t0 = time.perf_counter()
        passed, detail = fn()
        results.append(SuiteResult(name, passed, detail, time.perf_counter() - t0))
    return results
