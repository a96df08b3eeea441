"""Layer graph, model quantization and decomposition, and the bitwise inference engine."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .codec import (
    Limiter,
    PrecisionConfig,
    is_valid_levels,
    levels_den,
    limit_array,
    quantize_levels,
)
from .errors import ConfigError, DimensionError, DomainError, IntegrityError
from .kernels import (
    EncodedTensor,
    branch_weights,
    conv2d_reference_float,
    conv_output_hw,
    gemm_reference_float,
    mb_conv2d_int,
    mb_gemm_int,
)

FC = "fc"
CONV2D = "conv2d"
_KIND_ALIASES = {"fc": FC, "fully_connected": FC, "linear": FC, "conv2d": CONV2D, "conv": CONV2D}


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


@dataclass(frozen=True)
class LayerSpec:
    """One layer.  ``in_size``/``out_size`` are features for fc, channels for conv2d."""

    kind: str
    in_size: int
    out_size: int
    precision: PrecisionConfig = field(default_factory=PrecisionConfig)
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    bias: bool = False

    def __post_init__(self):
        kind = _KIND_ALIASES.get(str(self.kind).lower())
        if kind is None:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        for name in ("kernel", "stride", "padding"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.in_size < 1 or self.out_size < 1:
            raise ConfigError("layer sizes must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigError("conv kernel/stride must be positive and padding non-negative")
        if kind == FC and (self.kernel, self.stride, self.padding) != ((1, 1), (1, 1), (0, 0)):
            raise ConfigError("fc layers take no kernel/stride/padding")

    @classmethod
    def fc(cls, in_features: int, out_features: int, precision: PrecisionConfig | None = None, bias=False):
        return cls(FC, in_features, out_features, precision or PrecisionConfig(), bias=bias)

    @classmethod
    def conv2d(cls, in_channels, out_channels, kernel, stride=1, padding=0, precision=None, bias=False):
        return cls(CONV2D, in_channels, out_channels, precision or PrecisionConfig(), kernel, stride, padding, bias)

    @property
    def limiter(self) -> Limiter:
        return self.precision.activation_limiter

    @property
    def fan_in(self) -> int:
        return self.in_size * self.kernel[0] * self.kernel[1]

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == FC:
            return (self.out_size, self.in_size)
        return (self.out_size, self.in_size) + self.kernel

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind == FC:
            if math.prod(in_shape) != self.in_size:
                raise DimensionError(f"fc layer expects {self.in_size} inputs, got shape {in_shape}")
            return (self.out_size,)
        if len(in_shape) != 3 or in_shape[0] != self.in_size:
            raise DimensionError(f"conv2d layer expects ({self.in_size}, H, W), got {in_shape}")
        return (self.out_size,) + conv_output_hw(in_shape[1], in_shape[2], self.kernel, self.stride, self.padding)

    def with_precision(self, precision: PrecisionConfig) -> "LayerSpec":
        return replace(self, precision=precision)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "in": self.in_size, "out": self.out_size, "bias": self.bias}
        d.update(self.precision.to_dict())
        if self.kind == CONV2D:
            d.update(kernel=list(self.kernel), stride=list(self.stride), padding=list(self.padding))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        try:
            return cls(
                d["kind"],
                int(d["in"]),
                int(d["out"]),
                PrecisionConfig.from_dict(d),
                tuple(d.get("kernel", (1, 1))),
                tuple(d.get("stride", (1, 1))),
                tuple(d.get("padding", (0, 0))),
                bool(d.get("bias", False)),
            )
        except KeyError as exc:
            raise ConfigError(f"layer entry missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...] = ()
    name: str = "model"
    version: str = "1"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.input_shape or min(self.input_shape) < 1:
            raise ConfigError(f"invalid input shape {self.input_shape}")
        self.shapes()

    def shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """(input, output) shape of every layer; raises on incompatible neighbours."""
        out, cur = [], self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                nxt = layer.output_shape(cur)
            except DimensionError as exc:
                raise DimensionError(f"layer {i}: {exc}") from None
            out.append((cur, nxt))
            cur = nxt
        return out

    @property
    def output_shape(self) -> tuple[int, ...]:
        shapes = self.shapes()
        return shapes[-1][1] if shapes else self.input_shape

    def with_precision(self, precisions: Sequence[PrecisionConfig]) -> "ModelSpec":
        if len(precisions) != len(self.layers):
            raise ConfigError("need one precision per layer")
        layers = tuple(l.with_precision(p) for l, p in zip(self.layers, precisions))
        return replace(self, layers=layers)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "version": self.version,
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        if "layers" not in d:
            raise ConfigError("model description missing field 'layers'")
        if "input_shape" not in d:
            raise ConfigError("model description missing field 'input_shape'")
        return cls(
            tuple(d["input_shape"]),
            tuple(LayerSpec.from_dict(l) for l in d["layers"]),
            str(d.get("name", "model")),
            str(d.get("version", "1")),
        )


def _check_bias(layer: LayerSpec, bias, i: int):
    if not layer.bias:
        if bias is not None:
            raise ConfigError(f"layer {i} has no bias in its spec but a bias array was given")
        return None
    if bias is None:
        return np.zeros(layer.out_size)
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (layer.out_size,):
        raise DimensionError(f"layer {i}: bias shape {bias.shape} != ({layer.out_size},)")
    if not np.all(np.isfinite(bias)):
        raise DomainError(f"layer {i}: non-finite bias")
    return bias


@dataclass
class FloatModel:
    """Full-precision weights; also the latent-weight container used in training."""

    spec: ModelSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray | None] = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != len(self.spec.layers):
            raise DimensionError(f"{len(self.weights)} weight tensors for {len(self.spec.layers)} layers")
        if not self.biases:
            self.biases = [None] * len(self.weights)
        ws, bs = [], []
        for i, (layer, w, b) in enumerate(zip(self.spec.layers, self.weights, self.biases)):
            w = np.array(w, dtype=np.float64)
            if w.shape != layer.weight_shape:
                raise DimensionError(f"layer {i}: weight shape {w.shape} != {layer.weight_shape}")
            ws.append(w)
            bs.append(_check_bias(layer, b, i))
        self.weights, self.biases = ws, bs

    @classmethod
    def random(cls, spec: ModelSpec, seed: int = 0, scale: float | None = None) -> "FloatModel":
        """Uniform weights in ``±scale`` (default ``±1/sqrt(fan_in)``, capped at 1)."""
        rng = np.random.default_rng(seed)
        ws = []
        for layer in spec.layers:
            a = min(1.0, scale if scale is not None else 1.0 / math.sqrt(layer.fan_in))
            ws.append(rng.uniform(-a, a, size=layer.weight_shape))
        return cls(spec, ws)

    def copy(self) -> "FloatModel":
        return FloatModel(self.spec, [w.copy() for w in self.weights], [None if b is None else b.copy() for b in self.biases])


@dataclass
class QuantizedModel:
    """Weights as odd integer levels (``int16``); ``max_errors`` is informational."""

    spec: ModelSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray | None] = field(default_factory=list)
    max_errors: list[float] = field(default_factory=list, compare=False)

    def __post_init__(self):
        if len(self.weights) != len(self.spec.layers):
            raise DimensionError(f"{len(self.weights)} weight tensors for {len(self.spec.layers)} layers")
        if not self.biases:
            self.biases = [None] * len(self.weights)
        ws, bs = [], []
        for i, (layer, w, b) in enumerate(zip(self.spec.layers, self.weights, self.biases)):
            w = np.asarray(w)
            if w.shape != layer.weight_shape:
                raise DimensionError(f"layer {i}: weight shape {w.shape} != {layer.weight_shape}")
            if w.size and not is_valid_levels(w, layer.precision.k_weight):
                raise IntegrityError(f"layer {i}: weights are not odd {layer.precision.k_weight}-bit levels")
            ws.append(w.astype(np.int16))
            bs.append(_check_bias(layer, b, i))
        self.weights, self.biases = ws, bs

    def decoded_weights(self) -> list[np.ndarray]:
        return [w / levels_den(l.precision.k_weight) for l, w in zip(self.spec.layers, self.weights)]

    def __eq__(self, other):
        if not isinstance(other, QuantizedModel):
            return NotImplemented
        return (
            self.spec == other.spec
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(_bias_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


def _bias_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass(frozen=True, eq=False)
class PlanLayer:
    spec: LayerSpec
    weights: EncodedTensor
    bias: np.ndarray | None = None

    @property
    def bits_act(self) -> int:
        return self.spec.precision.m_activation

    @property
    def bits_weight(self) -> int:
        return self.spec.precision.k_weight

    @property
    def branch_count(self) -> int:
        return self.bits_act * self.bits_weight

    @property
    def branch_weights(self) -> np.ndarray:
        return branch_weights(self.bits_act, self.bits_weight)

    @property
    def scale_den(self) -> int:
        return levels_den(self.bits_act) * levels_den(self.bits_weight)

    @property
    def scale(self) -> float:
        return 1.0 / self.scale_den


@dataclass(frozen=True, eq=False)
class MbnPlan:
    """Multi-branch binary execution form: packed weight planes per layer."""

    spec: ModelSpec
    layers: tuple[PlanLayer, ...]

    def __eq__(self, other):
        if not isinstance(other, MbnPlan):
            return NotImplemented
        return (
            self.spec == other.spec
            and len(self.layers) == len(other.layers)
            and all(
                a.weights == b.weights and _bias_equal(a.bias, b.bias) for a, b in zip(self.layers, other.layers)
            )
        )

    __hash__ = None


def quantize_model(model: FloatModel | Sequence[np.ndarray], spec: ModelSpec | None = None) -> QuantizedModel:
    """Clip every weight to [-1, 1] and snap it to its layer's K-bit level."""
    if isinstance(model, FloatModel):
        spec, weights, biases = model.spec, model.weights, model.biases
    else:
        if spec is None:
            raise ConfigError("quantize_model needs a spec when given bare weight arrays")
        weights, biases = list(model), []
        FloatModel(spec, weights)  # shape validation
    qs, errs = [], []
    for i, (layer, w) in enumerate(zip(spec.layers, weights)):
        w = np.asarray(w, dtype=np.float64)
        if np.isnan(w).any():
            raise DomainError(f"layer {i}: NaN weights")
        k = layer.precision.k_weight
        n = quantize_levels(w, k)
        clipped = np.clip(w, -1.0, 1.0)
        errs.append(float(np.max(np.abs(clipped - n / levels_den(k)))) if w.size else 0.0)
        qs.append(n)
    return QuantizedModel(spec, qs, list(biases) if biases else [], errs)


def decompose_model(q: QuantizedModel) -> MbnPlan:
    layers = []
    for i, (layer, w, b) in enumerate(zip(q.spec.layers, q.weights, q.biases)):
        k = layer.precision.k_weight
        if not is_valid_levels(w, k):
            raise IntegrityError(f"layer {i}: weights are not odd {k}-bit levels")
        enc = EncodedTensor.from_levels(np.asarray(w, dtype=np.int64).reshape(layer.out_size, layer.fan_in), k)
        layers.append(PlanLayer(layer, enc, None if b is None else np.array(b, dtype=np.float64)))
    return MbnPlan(q.spec, tuple(layers))


def recompose_model(plan: MbnPlan) -> QuantizedModel:
    ws = [pl.weights.to_levels().reshape(pl.spec.weight_shape) for pl in plan.layers]
    return QuantizedModel(plan.spec, ws, [pl.bias for pl in plan.layers])


def _as_batch(spec: ModelSpec, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        return x[None], True
    if x.shape[1:] == spec.input_shape:
        return x, False
    raise DimensionError(f"input shape {x.shape} does not match model input {spec.input_shape} (optionally batched)")


@dataclass
class LayerTrace:
    act_levels: np.ndarray
    accumulators: np.ndarray


def _check_finite(y: np.ndarray, i: int):
    if not np.all(np.isfinite(y)):
        raise DomainError(f"layer {i}: non-finite output")


def infer(plan: MbnPlan, x: np.ndarray, trace: list | None = None) -> np.ndarray:
    """Run the model through its packed xnor/popcount branches.

    Per layer: limiter, M-bit encode, M*K binary branches, one division by
    ``(2^M-1)(2^K-1)``, optional bias.  ``x`` may be one sample or a batch.
    If ``trace`` is a list, a :class:`LayerTrace` per layer is appended.
    """
    a, single = _as_batch(plan.spec, x)
    for i, pl in enumerate(plan.layers):
        if not np.all(np.isfinite(a)):
            raise DomainError(f"layer {i}: non-finite input")
        levels = quantize_levels(limit_array(a, pl.spec.limiter), pl.bits_act)
        if pl.spec.kind == FC:
            enc = EncodedTensor.from_levels(levels.reshape(levels.shape[0], -1), pl.bits_act)
            s = mb_gemm_int(enc, pl.weights)
        else:
            s = mb_conv2d_int(levels, pl.weights, pl.spec.kernel, pl.spec.stride, pl.spec.padding, pl.bits_act)
        if trace is not None:
            trace.append(LayerTrace(levels, s))
        y = s / pl.scale_den
        if pl.bias is not None:
            y = y + (pl.bias if pl.spec.kind == FC else pl.bias[:, None, None])
        _check_finite(y, i)
        a = y
    return a[0] if single else a


def reference_forward(q: QuantizedModel, x: np.ndarray, snap: bool = True) -> np.ndarray:
    """Float forward pass over decoded quantized weights and activations.

    With ``snap`` each pre-activation is rounded to the nearest multiple of
    ``1/((2^M-1)(2^K-1))`` (the grid the exact result lives on) before
    the next layer quantizes it, so summation noise cannot flip a level at
    a rounding tie.
    """
    a, single = _as_batch(q.spec, x)
    for i, (layer, w) in enumerate(zip(q.spec.layers, q.decoded_weights())):
        m = layer.precision.m_activation
        den_a = levels_den(m)
        lim = limit_array(a, layer.limiter)
        if layer.kind == FC:
            xq = quantize_levels(lim.reshape(lim.shape[0], -1), m) / den_a
            y = gemm_reference_float(xq, w.T)
        else:
            ph, pw = layer.padding
            # zero-padding before quantization lands on the +1/(2^M-1) level
            lim = np.pad(lim, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            xq = quantize_levels(lim, m) / den_a
            y = np.stack([conv2d_reference_float(s, w, layer.stride, 0) for s in xq])
        if snap:
            den = den_a * levels_den(layer.precision.k_weight)
            y = np.round(y * den) / den
        b = q.biases[i]
        if b is not None:
            y = y + (b if layer.kind == FC else b[:, None, None])
        _check_finite(y, i)
        a = y
    return a[0] if single else a
