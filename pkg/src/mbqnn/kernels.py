"""Multi-branch binary GEMM and convolution, plus the float and {0,1} reference paths.

An M-bit x K-bit product is split into M*K binary branches.  Branch
(m, k) (0-based) contributes ``bitdot(c_m, d_k) << (m + k)`` to an int64
accumulator; the real result is that accumulator divided once by
``(2**M - 1) * (2**K - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _accel
from ._accel import njit, popcount64, prange
from .bitplane import PackedPlane, bitdot, n_words, pack_bits, padding_is_clean, tail_mask, unpack_bits
from .codec import check_bits, codes_to_levels, is_valid_levels, levels_den, levels_to_codes, quantize_levels
from .errors import CorruptionError, DimensionError, IntegrityError

# numpy path: cap the (rows x cols x words) xor scratch at ~32 MiB
_NUMPY_CHUNK_WORDS = 1 << 22


@dataclass(frozen=True, eq=False)
class EncodedTensor:
    """``rows`` vectors of ``length`` elements, each split into ``bits`` sign planes.

    ``planes`` has shape ``(rows, bits, ceil(length/64))``.  On the activation
    side a row is one input vector; on the weight side a row is one output
    unit (a column of the N x O weight matrix).
    """

    planes: np.ndarray
    length: int
    bits: int

    def __post_init__(self):
        check_bits(self.bits)
        planes = np.ascontiguousarray(self.planes, dtype=np.uint64)
        if planes.ndim != 3 or planes.shape[1] != self.bits or planes.shape[2] != n_words(self.length):
            raise DimensionError(
                f"planes shape {planes.shape} inconsistent with bits={self.bits}, length={self.length}"
            )
        if not padding_is_clean(planes, self.length):
            raise CorruptionError("nonzero padding bits in encoded tensor")
        planes.setflags(write=False)
        object.__setattr__(self, "planes", planes)

    @property
    def rows(self) -> int:
        return self.planes.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.length)

    @classmethod
    def from_levels(cls, levels: np.ndarray, bits: int) -> "EncodedTensor":
        """Encode a ``(rows, N)`` array of odd integer levels."""
        bits = check_bits(bits)
        levels = np.asarray(levels, dtype=np.int64)
        if levels.ndim != 2:
            raise DimensionError("from_levels expects a 2-D array")
        if levels.size and not is_valid_levels(levels, bits):
            raise IntegrityError(f"values are not odd {bits}-bit levels")
        codes = levels_to_codes(levels, bits)
        shifts = np.arange(bits, dtype=np.int64)
        bitmat = ((codes[:, None, :] >> shifts[None, :, None]) & 1).astype(bool)
        return cls(pack_bits(bitmat), levels.shape[1], bits)

    @classmethod
    def from_real(cls, x: np.ndarray, bits: int) -> "EncodedTensor":
        return cls.from_levels(quantize_levels(np.atleast_2d(x), bits), bits)

    def to_levels(self) -> np.ndarray:
        bitmat = unpack_bits(self.planes, self.length).astype(np.int64)
        codes = (bitmat << np.arange(self.bits, dtype=np.int64)[None, :, None]).sum(axis=1)
        return codes_to_levels(codes, self.bits)

    def to_real(self) -> np.ndarray:
        return self.to_levels() / levels_den(self.bits)

    def plane(self, row: int, bit: int) -> PackedPlane:
        return PackedPlane(self.planes[row, bit], self.length)

    def row(self, row: int) -> list[PackedPlane]:
        return [self.plane(row, b) for b in range(self.bits)]

    def __eq__(self, other):
        if not isinstance(other, EncodedTensor):
            return NotImplemented
        return (self.length, self.bits) == (other.length, other.bits) and np.array_equal(
            self.planes, other.planes
        )

    __hash__ = None


@dataclass(frozen=True)
class BranchResult:
    m: int
    k: int
    accumulator: int

    @property
    def weight(self) -> int:
        """Power-of-two branch weight (``2**(m+k)`` with 0-based bit indices)."""
        return 1 << (self.m + self.k)


def branch_weights(bits_act: int, bits_weight: int) -> np.ndarray:
    m = np.arange(bits_act)[:, None]
    k = np.arange(bits_weight)[None, :]
    return (1 << (m + k)).astype(np.int64)


def scale_factor(bits_act: int, bits_weight: int) -> float:
    return 1.0 / (levels_den(bits_act) * levels_den(bits_weight))


# --- vector form ----------------------------------------------------------


def _check_planes(x: Sequence[PackedPlane], w: Sequence[PackedPlane]) -> int:
    check_bits(len(x), "activation bits")
    check_bits(len(w), "weight bits")
    lengths = {p.length for p in x} | {p.length for p in w}
    if len(lengths) != 1:
        raise DimensionError(f"all planes must share one length, got {sorted(lengths)}")
    return lengths.pop()


def mb_dot_branches(x: Sequence[PackedPlane], w: Sequence[PackedPlane]) -> list[BranchResult]:
    _check_planes(x, w)
    return [BranchResult(m, k, bitdot(cm, dk)) for m, cm in enumerate(x) for k, dk in enumerate(w)]


def mb_dot_int(x: Sequence[PackedPlane], w: Sequence[PackedPlane]) -> int:
    """Integer accumulator ``S = sum_{m,k} 2**(m+k) * bitdot(c_m, d_k)``."""
    total = 0
    for br in mb_dot_branches(x, w):
        total += br.accumulator << (br.m + br.k)
    return total


def mb_dot(x: Sequence[PackedPlane], w: Sequence[PackedPlane]) -> float:
    return mb_dot_int(x, w) / (levels_den(len(x)) * levels_den(len(w)))


# --- matrix form ----------------------------------------------------------


@njit(parallel=True)
def _mb_gemm_numba(x, w, length, mask, out):
    rows, bits_a, nw = x.shape
    cols, bits_w, _ = w.shape
    for b in prange(rows):
        for o in range(cols):
            acc = 0
            for m in range(bits_a):
                for k in range(bits_w):
                    pc = 0
                    for j in range(nw - 1):
                        pc += popcount64(x[b, m, j] ^ w[o, k, j])
                    if nw > 0:
                        pc += popcount64((x[b, m, nw - 1] ^ w[o, k, nw - 1]) & mask)
                    acc += (length - 2 * pc) << (m + k)
            out[b, o] = acc


def _mb_gemm_numpy(x, w, length, mask, out):
    rows, bits_a, nw = x.shape
    cols, bits_w, _ = w.shape
    if nw == 0:
        out[:] = length * int(branch_weights(bits_a, bits_w).sum())
        return
    step = max(1, _NUMPY_CHUNK_WORDS // max(1, cols * nw))
    for lo in range(0, rows, step):
        xs = x[lo : lo + step]
        acc = np.zeros((xs.shape[0], cols), dtype=np.int64)
        for m in range(bits_a):
            for k in range(bits_w):
                xor = xs[:, m, None, :] ^ w[None, :, k, :]
                xor[..., -1] &= mask
                pc = np.bitwise_count(xor).sum(axis=-1, dtype=np.int64)
                acc += (length - 2 * pc) << (m + k)
        out[lo : lo + step] = acc


def mb_gemm_int(x: EncodedTensor, w: EncodedTensor) -> np.ndarray:
    """int64 accumulators ``(x.rows, w.rows)``; entry (b, o) is mb_dot_int of the two rows."""
    if x.length != w.length:
        raise DimensionError(f"inner dimensions differ: {x.length} vs {w.length}")
    out = np.empty((x.rows, w.rows), dtype=np.int64)
    if x.rows == 0 or w.rows == 0:
        return out
    mask = tail_mask(x.length)
    if _accel.use_numba():
        _mb_gemm_numba(x.planes, w.planes, np.int64(x.length), mask, out)
    else:
        _mb_gemm_numpy(x.planes, w.planes, x.length, mask, out)
    return out


def mb_gemm(x: EncodedTensor, w: EncodedTensor) -> np.ndarray:
    return mb_gemm_int(x, w) / (levels_den(x.bits) * levels_den(w.bits))


# --- convolution ----------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if np.isscalar(v):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def conv_output_hw(h: int, w: int, kernel, stride=1, padding=0) -> tuple[int, int]:
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if min(kh, kw, sh, sw) < 1 or min(ph, pw) < 0:
        raise DimensionError("kernel and stride must be positive, padding non-negative")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def im2col(x: np.ndarray, kernel, stride=1, padding=0, pad_value=0) -> np.ndarray:
    """Unroll ``(C, H, W)`` patches into a ``(C*kh*kw, out_h*out_w)`` matrix.

    Row order is channel-major then kernel row then kernel column, matching a
    weight tensor ``(O, C, kh, kw)`` reshaped to ``(O, C*kh*kw)``.
    """
    x = np.asarray(x)
    if x.ndim != 3 or min(x.shape) < 1:
        raise DimensionError(f"im2col expects a non-empty (C, H, W) array, got shape {x.shape}")
    c, h, w = x.shape
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oh, ow = conv_output_hw(h, w, (kh, kw), (sh, sw), (ph, pw))
    if ph or pw:
        x = np.pad(x, ((0, 0), (ph, ph), (pw, pw)), constant_values=pad_value)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]
    # (C, oh, ow, kh, kw) -> (C, kh, kw, oh, ow)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, oh * ow)


def _patch_rows(levels: np.ndarray, kernel, stride, padding, bits_act: int) -> tuple[np.ndarray, tuple[int, int]]:
    # exact zero is not a level; pad with +1/(2**M-1), the level encode(0) lands on
    pad_level = 1
    cols = [im2col(sample, kernel, stride, padding, pad_value=pad_level).T for sample in levels]
    h, w = levels.shape[2:]
    return np.concatenate(cols, axis=0), conv_output_hw(h, w, kernel, stride, padding)


def mb_conv2d_int(
    x_levels: np.ndarray, kernels: EncodedTensor, kernel, stride=1, padding=0, bits_act: int = 1
) -> np.ndarray:
    """Integer accumulators of a quantized convolution.

    ``x_levels`` holds odd ``bits_act``-bit levels shaped ``(C, H, W)`` or
    ``(B, C, H, W)``; ``kernels`` has one row per output channel of length
    ``C*kh*kw``.  Returns int64 ``([B,] O, out_h, out_w)``.
    """
    check_bits(bits_act)
    x_levels = np.asarray(x_levels, dtype=np.int64)
    single = x_levels.ndim == 3
    if single:
        x_levels = x_levels[None]
    if x_levels.ndim != 4:
        raise DimensionError(f"expected (C,H,W) or (B,C,H,W) input, got shape {x_levels.shape}")
    kh, kw = _pair(kernel)
    batch, chans = x_levels.shape[:2]
    if chans * kh * kw != kernels.length:
        raise DimensionError(
            f"input has {chans} channels but kernels expect {kernels.length // (kh * kw)} ({kernels.length} taps)"
        )
    rows, (oh, ow) = _patch_rows(x_levels, (kh, kw), stride, padding, bits_act)
    s = mb_gemm_int(EncodedTensor.from_levels(rows, bits_act), kernels)
    out = s.reshape(batch, oh, ow, kernels.rows).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def mb_conv2d(
    x_levels: np.ndarray, kernels: EncodedTensor, kernel, stride=1, padding=0, bits_act: int = 1
) -> np.ndarray:
    s = mb_conv2d_int(x_levels, kernels, kernel, stride, padding, bits_act)
    return s / (levels_den(bits_act) * levels_den(kernels.bits))


# --- reference paths ------------------------------------------------------


def dot_zero_one(x01: np.ndarray, w01: np.ndarray, bits_act: int, bits_weight: int) -> float:
    """Sum of per-element products rebuilt from {0,1} fixed-point codes.

    Uses the four-term expansion of ``(2x/(2^M-1) - 1) * (2w/(2^K-1) - 1)``.
    """
    x01 = np.asarray(x01, dtype=np.float64)
    w01 = np.asarray(w01, dtype=np.float64)
    if x01.shape != w01.shape:
        raise DimensionError(f"shape mismatch: {x01.shape} vs {w01.shape}")
    dm = levels_den(check_bits(bits_act))
    dk = levels_den(check_bits(bits_weight))
    terms = 4.0 / (dm * dk) * x01 * w01 - 2.0 / dm * x01 - 2.0 / dk * w01 + 1.0
    return float(terms.sum())


@njit
def _gemm_float_numba(a, b, out):
    rows, inner = a.shape
    cols = b.shape[1]
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for n in range(inner):
                acc += a[i, n] * b[n, j]
            out[i, j] = acc


def _gemm_float_numpy(a, b, out):
    # cumsum accumulates strictly left to right, so chunking over the inner
    # index keeps the same summation order as the scalar loop
    rows, inner = a.shape
    cols = b.shape[1]
    acc = np.zeros((rows, 1, cols))
    step = max(1, _NUMPY_CHUNK_WORDS // max(1, rows * cols))
    for lo in range(0, inner, step):
        prod = a[:, lo : lo + step, None] * b[None, lo : lo + step, :]
        acc = np.cumsum(np.concatenate([acc, prod], axis=1), axis=1)[:, -1:, :]
    out[:] = acc[:, 0, :]


def gemm_reference_float(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense float64 GEMM accumulating each entry sequentially over the inner index."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    if _accel.use_numba():
        _gemm_float_numba(a, b, out)
    else:
        _gemm_float_numpy(a, b, out)
    return out


@njit
def _dot_float_numba(a, b):
    acc = 0.0
    for n in range(a.shape[0]):
        acc += a[n] * b[n]
    return acc


def dot_reference_float(a: np.ndarray, b: np.ndarray) -> float:
    """Scalar sequential float dot product (the benchmark baseline)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"dot needs equal 1-D shapes, got {a.shape} and {b.shape}")
    if _accel.use_numba():
        return float(_dot_float_numba(a, b))
    out = np.empty((1, 1))
    _gemm_float_numpy(a[None, :], b[:, None], out)
    return float(out[0, 0])


def conv2d_reference_float(x: np.ndarray, weight: np.ndarray, stride=1, padding=0) -> np.ndarray:
    """Direct sliding-window convolution, ``(C,H,W) x (O,C,kh,kw) -> (O,oh,ow)``."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    o, c, kh, kw = weight.shape
    if x.shape[0] != c:
        raise DimensionError(f"input has {x.shape[0]} channels, weights expect {c}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oh, ow = conv_output_hw(x.shape[1], x.shape[2], (kh, kw), (sh, sw), (ph, pw))
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((o, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, i * sh : i * sh + kh, j * sw : j * sw + kw]
            out[:, i, j] = np.tensordot(weight, patch, axes=([1, 2, 3], [0, 1, 2]))
    return out
