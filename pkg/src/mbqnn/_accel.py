"""Backend selection for the hot kernels.

Every kernel ships twice: a numba ``@njit`` version and a vectorised numpy
version.  The active one is chosen at import time from ``MBQNN_BACKEND``
(``numba`` or ``numpy``; default ``numba`` when numba imports) and can be
switched at runtime with :func:`set_backend`, which the benchmarks use to
compare both paths.
"""

from __future__ import annotations

import os

# the bundled TBB is too old for numba; prefer OpenMP, fall back to workqueue
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")

try:
    import numba
    from llvmlite import ir
    from numba.core import cgutils, types
    from numba.extending import intrinsic

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    HAVE_NUMBA = False

BACKENDS = ("numba", "numpy")
THREADS_ENV = "MBQNN_NUM_THREADS"


def _initial_backend() -> str:
    name = os.environ.get("MBQNN_BACKEND", "").strip().lower()
    if os.environ.get("MBQNN_DISABLE_NUMBA", "") not in ("", "0"):
        name = "numpy"
    if not name:
        name = "numba" if HAVE_NUMBA else "numpy"
    if name not in BACKENDS:
        raise ValueError(f"MBQNN_BACKEND must be one of {BACKENDS}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        name = "numpy"
    return name


_backend = _initial_backend()


def backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Switch the active kernel backend; returns the previous one."""
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    prev, _backend = _backend, name
    return prev


def use_numba() -> bool:
    return _backend == "numba"


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda fn: fn


if HAVE_NUMBA:
    prange = numba.prange

    @intrinsic
    def popcount64(typingctx, x):
        """Hardware popcount of a uint64 via ``llvm.ctpop.i64``."""
        if not isinstance(x, types.Integer):
            return None
        sig = types.int64(x)

        def codegen(context, builder, signature, args):
            (val,) = args
            fnty = ir.FunctionType(ir.IntType(64), [ir.IntType(64)])
            fn = cgutils.get_or_insert_function(builder.module, fnty, "llvm.ctpop.i64")
            return builder.call(fn, [val])

        return sig, codegen
else:  # pragma: no cover
    prange = range

    def popcount64(x):
        return int(x).bit_count()


def max_threads() -> int:
    if HAVE_NUMBA:
        return int(numba.config.NUMBA_NUM_THREADS)
    return 1


def set_threads(count: int | None = None) -> int:
    """Set kernel thread count (flag, then ``MBQNN_NUM_THREADS``, then all cores).

    The request is clamped to what the numba runtime was started with; the
    effective count is returned.
    """
    if count is None:
        env = os.environ.get(THREADS_ENV)
        count = int(env) if env else max_threads()
    if count < 1:
        raise ValueError("thread count must be >= 1")
    effective = min(count, max_threads())
    if HAVE_NUMBA:
        numba.set_num_threads(effective)
    return effective


def get_threads() -> int:
    if HAVE_NUMBA:
        return int(numba.get_num_threads())
    return 1
