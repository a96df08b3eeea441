"""Bit-packed {-1,+1} vectors and the xnor/popcount dot product.

Element ``i`` of a plane lives in bit ``i % 64`` of word ``i // 64``; a set
bit means +1, a clear bit -1.  Bits past ``length`` in the last word are
always zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _accel
from ._accel import njit, popcount64
from .errors import CorruptionError, DimensionError, FormatError, InvalidSignError

WORD_BITS = 64
_ALL_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)


def n_words(length: int) -> int:
    return (length + WORD_BITS - 1) // WORD_BITS


def tail_mask(length: int) -> np.uint64:
    """Mask of the valid bits in the final word of a ``length``-element plane."""
    rem = length % WORD_BITS
    if rem == 0:
        return _ALL_ONES
    return np.uint64((1 << rem) - 1)


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean array ``(..., N)`` into little-endian uint64 words ``(..., ceil(N/64))``."""
    bits = np.asarray(bits, dtype=bool)
    n = bits.shape[-1]
    nw = n_words(n)
    pad = nw * WORD_BITS - n
    if pad:
        widths = [(0, 0)] * (bits.ndim - 1) + [(0, pad)]
        bits = np.pad(bits, widths)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    words = np.ascontiguousarray(packed).view("<u8")
    return words.astype(np.uint64, copy=False).reshape(bits.shape[:-1] + (nw,))


def unpack_bits(words: np.ndarray, length: int) -> np.ndarray:
    """Inverse of :func:`pack_bits`; returns a boolean array ``(..., length)``."""
    words = np.ascontiguousarray(words, dtype="<u8")
    raw = words.view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little")
    return bits[..., :length].astype(bool)


def padding_is_clean(words: np.ndarray, length: int) -> bool:
    """True if every bit beyond ``length`` in the last word of each row is zero."""
    words = np.asarray(words, dtype=np.uint64)
    if words.shape[-1] == 0:
        return True
    last = words[..., -1]
    return not np.any(last & ~tail_mask(length))


@dataclass(frozen=True, eq=False)
class PackedPlane:
    """One {-1,+1} vector packed 64 elements per word.  Immutable."""

    words: np.ndarray
    length: int

    def __post_init__(self):
        words = np.array(self.words, dtype=np.uint64, copy=True).reshape(-1)
        if self.length < 0:
            raise DimensionError("plane length must be non-negative")
        if words.shape[0] != n_words(self.length):
            raise DimensionError(
                f"plane of length {self.length} needs {n_words(self.length)} words, got {words.shape[0]}"
            )
        if not padding_is_clean(words, self.length):
            raise CorruptionError("nonzero padding bits beyond plane length")
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other):
        if not isinstance(other, PackedPlane):
            return NotImplemented
        return self.length == other.length and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((self.length, self.words.tobytes()))

    def __repr__(self):
        return f"PackedPlane(length={self.length}, words={self.words.shape[0]})"

    @property
    def mask(self) -> np.uint64:
        return tail_mask(self.length)

    def complement(self) -> "PackedPlane":
        words = ~self.words
        if words.shape[0]:
            words[-1] &= self.mask
        return PackedPlane(words, self.length)

    def to_bytes(self) -> bytes:
        """u64 LE length followed by the little-endian words."""
        return struct.pack("<Q", self.length) + self.words.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PackedPlane":
        if len(data) < 8:
            raise FormatError("truncated plane header")
        (length,) = struct.unpack_from("<Q", data, 0)
        need = 8 + 8 * n_words(length)
        if len(data) != need:
            raise FormatError(f"plane of length {length} needs {need} bytes, got {len(data)}")
        words = np.frombuffer(data, dtype="<u8", offset=8).astype(np.uint64)
        return cls(words, length)


def pack(signs: Sequence[int]) -> PackedPlane:
    s = np.asarray(signs)
    if s.ndim != 1:
        s = s.reshape(-1)
    if s.size and not np.all((s == 1) | (s == -1)):
        raise InvalidSignError("pack expects every element to be -1 or +1")
    return PackedPlane(pack_bits(s > 0), int(s.shape[0]))


def unpack(p: PackedPlane) -> np.ndarray:
    if not padding_is_clean(p.words, p.length):
        raise CorruptionError("nonzero padding bits beyond plane length")
    bits = unpack_bits(p.words, p.length)
    return np.where(bits, 1, -1).astype(np.int8)


@njit
def _popcount_xor_numba(a, b, mask):
    nw = a.shape[0]
    if nw == 0:
        return 0
    total = 0
    for j in range(nw - 1):
        total += popcount64(a[j] ^ b[j])
    total += popcount64((a[nw - 1] ^ b[nw - 1]) & mask)
    return total


def _popcount_xor_numpy(a, b, mask):
    if a.shape[0] == 0:
        return 0
    x = a ^ b
    x[-1] &= mask
    return int(np.bitwise_count(x).sum(dtype=np.int64))


def popcount_xor(a: np.ndarray, b: np.ndarray, length: int) -> int:
    """popcount(mask & (a XOR b)) over raw word arrays."""
    mask = tail_mask(length)
    if _accel.use_numba():
        return int(_popcount_xor_numba(a, b, mask))
    return _popcount_xor_numpy(a, b, mask)


def _check_pair(a: PackedPlane, b: PackedPlane) -> int:
    if a.length != b.length:
        raise DimensionError(f"bitdot length mismatch: {a.length} vs {b.length}")
    return a.length


def bitdot(a: PackedPlane, b: PackedPlane) -> int:
    """Sum of a_n*b_n as ``N - 2*popcount(mask & (a XOR b))``."""
    n = _check_pair(a, b)
    return n - 2 * popcount_xor(a.words, b.words, n)


def bitdot_xnor(a: PackedPlane, b: PackedPlane) -> int:
    """Same value as :func:`bitdot`, computed as ``2*popcount(mask & XNOR) - N``."""
    n = _check_pair(a, b)
    if n == 0:
        return 0
    x = ~(a.words ^ b.words)
    x[-1] &= a.mask
    return 2 * int(np.bitwise_count(x).sum(dtype=np.int64)) - n
