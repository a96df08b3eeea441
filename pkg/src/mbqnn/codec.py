"""Range limiters, the linear quantizer and the {-1,+1} bit encoders.

A ``bits``-bit level is stored as an odd integer ``n`` with
``|n| <= 2**bits - 1``; its real value is ``n / (2**bits - 1)``.  The code
word ``r = (n + 2**bits - 1) // 2`` is an unsigned integer whose bit ``i``
gives sign plane ``i`` (set -> +1).  Planes are ordered low bit first.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError, PrecisionError, RangeError

MIN_BITS = 1
MAX_BITS = 8


class Limiter(str, enum.Enum):
    HTANH = "htanh"
    HRELU = "hrelu"
    TANH = "tanh"
    SIGMOID = "sigmoid"

    @classmethod
    def parse(cls, value: "Limiter | str") -> "Limiter":
        if isinstance(value, Limiter):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown limiter {value!r}; expected one of {names}") from None


def check_bits(bits: int, what: str = "bits") -> int:
    if isinstance(bits, bool) or int(bits) != bits or not MIN_BITS <= bits <= MAX_BITS:
        raise PrecisionError(f"{what} must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")
    return int(bits)


def levels_den(bits: int) -> int:
    """``2**bits - 1``: the factor between a level's odd integer and its real value."""
    return (1 << bits) - 1


@dataclass(frozen=True)
class PrecisionConfig:
    m_activation: int = 2
    k_weight: int = 2
    activation_limiter: Limiter = Limiter.HTANH

    def __post_init__(self):
        check_bits(self.m_activation, "m_activation")
        check_bits(self.k_weight, "k_weight")
        lim = Limiter.parse(self.activation_limiter)
        object.__setattr__(self, "activation_limiter", lim)
        # HReLU output is >= 0, so sign(0)=+1 would pin every 1-bit activation to +1
        if self.m_activation == 1 and lim is Limiter.HRELU:
            raise ConfigError("1-bit activations require the HTanh limiter, not HReLU")

    @property
    def scale(self) -> float:
        return 1.0 / (levels_den(self.m_activation) * levels_den(self.k_weight))

    def to_dict(self) -> dict:
        return {
            "bits_act": self.m_activation,
            "bits_weight": self.k_weight,
            "limiter": self.activation_limiter.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrecisionConfig":
        return cls(int(d["bits_act"]), int(d["bits_weight"]), d.get("limiter", "htanh"))


@dataclass(frozen=True)
class QuantizedValue:
    n: int
    bits: int

    def __post_init__(self):
        check_bits(self.bits)
        if self.n % 2 == 0 or abs(self.n) > levels_den(self.bits):
            raise RangeError(f"{self.n} is not an odd level of a {self.bits}-bit code")

    @property
    def value(self) -> float:
        return self.n / levels_den(self.bits)


# --- limiters -------------------------------------------------------------


def limit_array(x: np.ndarray, f: Limiter | str) -> np.ndarray:
    f = Limiter.parse(f)
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise DomainError("limiter input contains NaN")
    if f is Limiter.HTANH:
        return np.clip(x, -1.0, 1.0)
    if f is Limiter.HRELU:
        return np.clip(x, 0.0, 1.0)
    if f is Limiter.TANH:
        return np.tanh(x)
    # numerically stable logistic
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def limit(x: float, f: Limiter | str) -> float:
    return float(limit_array(np.float64(x), f))


def limit_grad_array(x: np.ndarray, f: Limiter | str) -> np.ndarray:
    """Derivative of the limiter; the hard limiters pass 1 on their closed linear range."""
    f = Limiter.parse(f)
    x = np.asarray(x, dtype=np.float64)
    if f is Limiter.HTANH:
        return ((x >= -1.0) & (x <= 1.0)).astype(np.float64)
    if f is Limiter.HRELU:
        return ((x >= 0.0) & (x <= 1.0)).astype(np.float64)
    if f is Limiter.TANH:
        t = np.tanh(x)
        return 1.0 - t * t
    s = limit_array(x, Limiter.SIGMOID)
    return s * (1.0 - s)


# --- linear quantizer -----------------------------------------------------


def quantize_codes(x: np.ndarray, bits: int) -> np.ndarray:
    """Unsigned code words ``r`` in ``[0, 2**bits - 1]`` for reals (clamped to [-1, 1])."""
    bits = check_bits(bits)
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise DomainError("cannot quantize NaN")
    # r = round((2^b - 1)(x + 1)/2) with ties going up, evaluated as the count
    # of rounding thresholds <= x.  Forming (x + 1)/2 in floating point would
    # round tiny negative x up to the zero threshold.
    return np.searchsorted(_thresholds(bits), x, side="right").astype(np.int64)


_THRESHOLDS: dict[int, np.ndarray] = {}


def _thresholds(bits: int) -> np.ndarray:
    """x-values where the code steps from j-1 to j, for j = 1 .. 2^b - 1."""
    t = _THRESHOLDS.get(bits)
    if t is None:
        den = levels_den(bits)
        t = np.array([(2 * j - 1 - den) / den for j in range(1, den + 1)])
        t.setflags(write=False)
        _THRESHOLDS[bits] = t
    return t


def quantize_levels(x: np.ndarray, bits: int) -> np.ndarray:
    """Odd-integer levels ``n = 2r - (2**bits - 1)`` for an array of reals."""
    return 2 * quantize_codes(x, bits) - levels_den(bits)


def quantize_linear(x: float, k: int) -> QuantizedValue:
    return QuantizedValue(int(quantize_levels(np.float64(x), k)), check_bits(k))


def quantize_values(x: np.ndarray, bits: int) -> np.ndarray:
    """Real-valued ``q_bits(x)``: the quantized levels divided back into [-1, 1]."""
    return quantize_levels(x, bits) / levels_den(bits)


def levels_to_codes(n: np.ndarray, bits: int) -> np.ndarray:
    n = np.asarray(n, dtype=np.int64)
    return (n + levels_den(bits)) // 2


def codes_to_levels(r: np.ndarray, bits: int) -> np.ndarray:
    return 2 * np.asarray(r, dtype=np.int64) - levels_den(bits)


def is_valid_levels(n: np.ndarray, bits: int) -> bool:
    n = np.asarray(n, dtype=np.int64)
    return bool(np.all(n % 2 == 1) and np.all(np.abs(n) <= levels_den(bits)))


def level_values(bits: int) -> np.ndarray:
    """All ``2**bits`` representable values in ascending order."""
    den = levels_den(bits)
    return np.arange(-den, den + 1, 2) / den


# --- {-1,+1} encoders -------------------------------------------------------


def encode_array(x: np.ndarray, bits: int) -> np.ndarray:
    """Sign planes for every element: shape ``x.shape + (bits,)``, low bit first, int8."""
    r = quantize_codes(x, bits)
    shifts = np.arange(bits, dtype=np.int64)
    return (2 * ((r[..., None] >> shifts) & 1) - 1).astype(np.int8)


def encode(x: float, m: int) -> tuple[int, ...]:
    return tuple(int(c) for c in encode_array(np.float64(x), m))


def decode_levels(signs: np.ndarray) -> np.ndarray:
    """Odd integers ``sum_i 2**i * c_i`` from sign planes on the last axis."""
    signs = np.asarray(signs, dtype=np.int64)
    weights = 1 << np.arange(signs.shape[-1], dtype=np.int64)
    return signs @ weights


def decode(planes: Sequence[int]) -> float:
    planes = np.asarray(planes, dtype=np.int64)
    bits = check_bits(planes.shape[-1])
    return float(decode_levels(planes)) / levels_den(bits)


def _sign(v: np.ndarray) -> np.ndarray:
    return np.where(v >= 0, 1, -1).astype(np.int8)


def encode_trig2_array(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    low = _sign(-np.sin(1.5 * math.pi * x))
    high = _sign(np.sin(0.75 * math.pi * x))
    return low, high


def encode_trig2(x: float) -> tuple[int, int]:
    """Closed-form 2-bit encoder: (sign(-sin(3πx/2)), sign(sin(3πx/4))), low bit first."""
    low, high = encode_trig2_array(np.float64(x))
    return int(low), int(high)


def encode_trig1(x: float) -> int:
    return int(_sign(np.sin(0.5 * math.pi * np.float64(x))))


def binarize(x: np.ndarray) -> np.ndarray:
    """sign(HTanh(x)) with sign(0) = +1."""
    return _sign(np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0))


# --- {0,1} reference code ---------------------------------------------------


def encode_zero_one(x: int, m: int) -> tuple[int, ...]:
    m = check_bits(m)
    if int(x) != x or not 0 <= x <= levels_den(m):
        raise RangeError(f"{x!r} is outside [0, {levels_den(m)}] for {m} bits")
    return tuple((int(x) >> i) & 1 for i in range(m))
