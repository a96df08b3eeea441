"""Quantization-aware training of fc networks with straight-through gradients.

Latent float weights stay in [-1, 1].  Each forward pass uses their K-bit
levels and M-bit activations; the backward pass treats both quantizers as
identity inside [-1, 1] and zero outside.
"""

from __future__ import annotations

import csv
import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .codec import Limiter, PrecisionConfig, levels_den, limit_array, limit_grad_array, quantize_levels
from .errors import ConfigError, DimensionError, DomainError, FormatError
from .network import FC, FloatModel, LayerSpec, ModelSpec

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
ADAM_LR = 1e-3
SGD_LR = 0.1


# --- gradient surrogates ----------------------------------------------------


def encoder_grad_2bit_array(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    inside = (x >= -1.0) & (x <= 1.0)
    d_high = np.where(inside, 0.75 * math.pi * np.cos(0.75 * math.pi * x), 0.0)
    d_low = np.where(inside, -1.5 * math.pi * np.cos(1.5 * math.pi * x), 0.0)
    return d_high, d_low


def encoder_grad_2bit(x: float) -> tuple[float, float]:
    """Surrogate derivatives (high bit, low bit) of the trigonometric 2-bit encoder."""
    if math.isnan(x):
        raise DomainError("encoder_grad_2bit of NaN")
    d_high, d_low = encoder_grad_2bit_array(np.float64(x))
    return float(d_high), float(d_low)


def ste_grad_quantizer_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return ((x >= -1.0) & (x <= 1.0)).astype(np.float64)


def ste_grad_quantizer(x: float) -> float:
    return float(ste_grad_quantizer_array(np.float64(x)))


def binarize_grad(x: np.ndarray) -> np.ndarray:
    """STE gradient of sign(HTanh(x)): the HTanh window."""
    return ste_grad_quantizer_array(x)


# --- data ------------------------------------------------------------------


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise DimensionError("inputs and labels differ in length")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0


def make_blobs(n_per_class: int = 100, n_classes: int = 3, radius: float = 0.6, std: float = 0.12, seed: int = 0) -> Dataset:
    """Gaussian blobs on a circle of ``radius``, one per class, in 2-D."""
    rng = np.random.default_rng(seed)
    angles = math.pi / 2 + 2 * math.pi * np.arange(n_classes) / n_classes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    x = np.concatenate([c + std * rng.standard_normal((n_per_class, 2)) for c in centers])
    y = np.repeat(np.arange(n_classes), n_per_class)
    return Dataset(x, y)


_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path: str | Path) -> np.ndarray:
    """Read an IDX array (optionally gzip-compressed)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise FormatError(f"{path}: not an IDX file")
    ndim = raw[3]
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    dt = np.dtype(_IDX_DTYPES[raw[2]])
    start = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(raw) != start + count * dt.itemsize:
        raise FormatError(f"{path}: IDX payload size mismatch")
    return np.frombuffer(raw, dtype=dt, offset=start).reshape(dims)


def load_idx_dataset(images: str | Path, labels: str | Path, limit: int | None = None) -> Dataset:
    """Digit-style IDX pair; pixels are rescaled from [0, 255] to [-1, 1] and flattened."""
    x = read_idx(images).astype(np.float64)
    y = read_idx(labels).astype(np.int64)
    if limit is not None:
        x, y = x[:limit], y[:limit]
    x = x.reshape(len(x), -1) / 127.5 - 1.0
    return Dataset(x, y)


# --- forward / backward -------------------------------------------------------


@dataclass
class LayerCache:
    pre: np.ndarray  # layer input before the limiter, flattened (B, N)
    limited: np.ndarray
    act: np.ndarray  # activations fed to the product (quantized values when quantizing)
    weight: np.ndarray  # effective (quantized) weights, (O, N)


@dataclass
class ForwardCache:
    layers: list[LayerCache]
    latent: list[np.ndarray]
    quantize: bool


def _require_fc(model: FloatModel):
    for i, layer in enumerate(model.spec.layers):
        if layer.kind != FC:
            raise ConfigError(f"layer {i}: training supports fc layers only")


def effective_weights(model: FloatModel, quantize: bool = True) -> list[np.ndarray]:
    if not quantize:
        return [w for w in model.weights]
    return [
        quantize_levels(w, l.precision.k_weight) / levels_den(l.precision.k_weight)
        for l, w in zip(model.spec.layers, model.weights)
    ]


def forward_quantized(
    model: FloatModel, batch: np.ndarray, quantize: bool = True, weights: Sequence[np.ndarray] | None = None
) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass with quantized weights and activations.

    Products are formed on the odd-integer levels and divided once by
    ``(2^M-1)(2^K-1)``, the same arithmetic as the packed inference path.
    ``weights`` overrides the effective weights (used for gradient checks).
    """
    _require_fc(model)
    a = np.asarray(batch, dtype=np.float64)
    if a.shape[1:] != model.spec.input_shape:
        if a.shape == model.spec.input_shape:
            a = a[None]
        else:
            raise DimensionError(f"batch shape {a.shape} does not match input {model.spec.input_shape}")
    a = a.reshape(a.shape[0], -1)
    ws = list(weights) if weights is not None else effective_weights(model, quantize)
    caches = []
    for i, (layer, w, b) in enumerate(zip(model.spec.layers, ws, model.biases)):
        lim = limit_array(a, layer.limiter)
        if quantize:
            m, k = layer.precision.m_activation, layer.precision.k_weight
            dm, dk = levels_den(m), levels_den(k)
            nx = quantize_levels(lim, m).astype(np.float64)
            act = nx / dm
            if weights is None:
                nw = quantize_levels(model.weights[i], k).astype(np.float64)
                z = (nx @ nw.T) / (dm * dk)
            else:
                z = act @ np.asarray(w, dtype=np.float64).T
        else:
            act = lim
            z = act @ w.T
        if b is not None:
            z = z + b
        if not np.all(np.isfinite(z)):
            raise DomainError(f"layer {i}: non-finite activations")
        caches.append(LayerCache(a, lim, act, np.asarray(w, dtype=np.float64)))
        a = z
    latent = [w.copy() for w in model.weights]
    return a, ForwardCache(caches, latent, quantize)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray | None]
    inputs: np.ndarray


def backward_ste(model: FloatModel, cache: ForwardCache, loss_grad: np.ndarray) -> Gradients:
    """Gradients w.r.t. the latent weights through straight-through quantizers."""
    if len(cache.latent) != len(model.weights) or any(
        not np.array_equal(a, b) for a, b in zip(cache.latent, model.weights)
    ):
        raise ConfigError("stale forward cache: weights changed since the forward pass")
    g = np.asarray(loss_grad, dtype=np.float64)
    gw: list[np.ndarray] = [None] * len(cache.layers)
    gb: list[np.ndarray | None] = [None] * len(cache.layers)
    for i in range(len(cache.layers) - 1, -1, -1):
        lc, layer = cache.layers[i], model.spec.layers[i]
        gw_q = g.T @ lc.act
        gw[i] = gw_q * ste_grad_quantizer_array(model.weights[i]) if cache.quantize else gw_q
        if model.biases[i] is not None:
            gb[i] = g.sum(axis=0)
        g_act = g @ lc.weight
        if cache.quantize:
            g_act = g_act * ste_grad_quantizer_array(lc.limited)
        g = g_act * limit_grad_array(lc.pre, layer.limiter)
    return Gradients(gw, gb, g)


# --- optimizers ------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str
    lr: float
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")


@dataclass
class Optimizer:
    """One :class:`OptimizerState` per layer (weight, then bias moments)."""

    layers: list[OptimizerState]


def default_optimizer_kind(precision: PrecisionConfig) -> str:
    return "adam" if min(precision.m_activation, precision.k_weight) <= 2 else "sgd"


def make_optimizer(model: FloatModel, kind: str | None = None, lr: float | None = None) -> Optimizer:
    states = []
    for layer, w, b in zip(model.spec.layers, model.weights, model.biases):
        k = kind or default_optimizer_kind(layer.precision)
        rate = lr if lr is not None else (ADAM_LR if k == "adam" else SGD_LR)
        shapes = [w.shape] + ([b.shape] if b is not None else [])
        states.append(OptimizerState(k, rate, [np.zeros(s) for s in shapes], [np.zeros(s) for s in shapes]))
    return Optimizer(states)


def _update(st: OptimizerState, j: int, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if st.kind == "sgd":
        return param - st.lr * grad
    b1, b2 = ADAM_BETAS
    st.m[j] = b1 * st.m[j] + (1 - b1) * grad
    st.v[j] = b2 * st.v[j] + (1 - b2) * grad * grad
    mhat = st.m[j] / (1 - b1**st.step)
    vhat = st.v[j] / (1 - b2**st.step)
    return param - st.lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def step(opt: Optimizer, model: FloatModel, grads: Gradients) -> FloatModel:
    """Apply one optimizer update in place and clip latent weights to [-1, 1]."""
    if len(grads.weights) != len(model.weights):
        raise DimensionError("gradient list does not match the model")
    for i, (st, w, gw) in enumerate(zip(opt.layers, model.weights, grads.weights)):
        if gw.shape != w.shape:
            raise DimensionError(f"layer {i}: gradient shape {gw.shape} != {w.shape}")
        gb = grads.biases[i]
        if not np.all(np.isfinite(gw)) or (gb is not None and not np.all(np.isfinite(gb))):
            raise DomainError(f"layer {i}: non-finite gradient")
        st.step += 1
        model.weights[i] = np.clip(_update(st, 0, w, gw), -1.0, 1.0)
        if model.biases[i] is not None and gb is not None:
            model.biases[i] = _update(st, 1, model.biases[i], gb)
    return model


# --- progressive precision lowering ----------------------------------------------


def lowered_precision(p: PrecisionConfig, bits: int) -> PrecisionConfig:
    m, k = min(p.m_activation, bits), min(p.k_weight, bits)
    lim = p.activation_limiter
    if m == 1 and lim is Limiter.HRELU:
        lim = Limiter.HTANH
    return PrecisionConfig(m, k, lim)


def _architecture(spec: ModelSpec):
    return spec.input_shape, tuple(l.with_precision(PrecisionConfig(1, 1)) for l in spec.layers)


def init_from_higher_precision(donor: FloatModel, target: int | ModelSpec) -> FloatModel:
    """Copy latent weights verbatim into a lower-precision model.

    ``target`` is either a bit count (every layer's M and K are capped at it)
    or a full spec whose architecture must match the donor's.  The returned
    model shares no state with the donor; build a fresh optimizer for it.
    """
    if isinstance(target, ModelSpec):
        if _architecture(target) != _architecture(donor.spec):
            raise ConfigError("architecture mismatch between donor and target")
        for i, (d, t) in enumerate(zip(donor.spec.layers, target.layers)):
            if t.precision.m_activation > d.precision.m_activation or t.precision.k_weight > d.precision.k_weight:
                raise ConfigError(f"layer {i}: target precision is higher than the donor's")
        spec = target
    else:
        current = max((max(l.precision.m_activation, l.precision.k_weight) for l in donor.spec.layers), default=1)
        if target > current:
            raise ConfigError(f"target {target} bits is not lower than the donor's {current}")
        spec = donor.spec.with_precision([lowered_precision(l.precision, target) for l in donor.spec.layers])
    return FloatModel(spec, [w.copy() for w in donor.weights], [None if b is None else b.copy() for b in donor.biases])


# --- loops ---------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float


def evaluate(model: FloatModel, data: Dataset, quantize: bool = True) -> tuple[float, float]:
    logits, _ = forward_quantized(model, data.x, quantize)
    loss, _ = softmax_cross_entropy(logits, data.y)
    return loss, float(np.mean(logits.argmax(axis=1) == data.y))


def train_epoch(
    model: FloatModel,
    data: Dataset,
    opt: Optimizer,
    batch_size: int = 32,
    rng: np.random.Generator | None = None,
    quantize: bool = True,
    epoch: int = 0,
) -> EpochMetrics:
    """One shuffled pass over ``data``; returns the sample-weighted running loss/accuracy."""
    if len(data) == 0:
        raise ConfigError("empty dataset")
    order = (rng or np.random.default_rng(epoch)).permutation(len(data))
    total_loss = correct = 0.0
    for lo in range(0, len(order), batch_size):
        idx = order[lo : lo + batch_size]
        logits, cache = forward_quantized(model, data.x[idx], quantize)
        loss, g = softmax_cross_entropy(logits, data.y[idx])
        step(opt, model, backward_ste(model, cache, g))
        total_loss += loss * len(idx)
        correct += float(np.sum(logits.argmax(axis=1) == data.y[idx]))
    return EpochMetrics(epoch, total_loss / len(data), correct / len(data))


def fit(
    model: FloatModel,
    data: Dataset,
    epochs: int,
    opt: Optimizer | None = None,
    batch_size: int = 32,
    seed: int = 0,
    quantize: bool = True,
) -> list[EpochMetrics]:
    """Train for ``epochs`` passes; each entry holds full-dataset loss/accuracy after that epoch."""
    opt = opt or make_optimizer(model)
    rng = np.random.default_rng(seed)
    history = []
    for e in range(1, epochs + 1):
        train_epoch(model, data, opt, batch_size, rng, quantize, e)
        loss, acc = evaluate(model, data, quantize)
        history.append(EpochMetrics(e, loss, acc))
    return history


def epochs_to_reach(model: FloatModel, data: Dataset, target_loss: float, epochs: int, seed: int = 0, batch_size: int = 32) -> tuple[int | None, list[EpochMetrics]]:
    """Fine-tune and report the first epoch (0 = before training) whose loss is <= ``target_loss``."""
    loss0, acc0 = evaluate(model, data)
    history = [EpochMetrics(0, loss0, acc0)]
    history += fit(model, data, epochs, batch_size=batch_size, seed=seed)
    hit = next((h.epoch for h in history if h.loss <= target_loss), None)
    return hit, history


# --- config-driven runs ------------------------------------------------------------


def _schema(name: str) -> dict:
    return json.loads(resources.files("mbqnn.schemas").joinpath(name).read_text())


def validate_config(cfg: dict) -> dict:
    import jsonschema

    try:
        jsonschema.validate(cfg, _schema("train_config.schema.json"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "config"
        raise ConfigError(f"invalid training config at {where}: {exc.message}") from None
    return cfg


def load_dataset(desc: dict | None, base: Path | None = None) -> Dataset:
    desc = desc or {"kind": "blobs"}
    if desc.get("kind", "blobs") == "blobs":
        return make_blobs(
            int(desc.get("n_per_class", 100)),
            int(desc.get("n_classes", 3)),
            float(desc.get("radius", 0.6)),
            float(desc.get("std", 0.12)),
            int(desc.get("seed", 0)),
        )
    base = base or Path(".")
    return load_idx_dataset(base / desc["images"], base / desc["labels"], desc.get("limit"))


def spec_from_config(cfg: dict, data: Dataset) -> ModelSpec:
    layers, fan_in = [], data.x.shape[1]
    for i, entry in enumerate(cfg["layers"]):
        if "out" not in entry:
            raise ConfigError(f"layers[{i}] missing field 'out'")
        prec = PrecisionConfig(int(entry.get("bits_act", 2)), int(entry.get("bits_weight", 2)), entry.get("limiter", "htanh"))
        layers.append(LayerSpec.fc(fan_in, int(entry["out"]), prec, bias=bool(entry.get("bias", False))))
        fan_in = int(entry["out"])
    return ModelSpec((data.x.shape[1],), tuple(layers), cfg.get("name", "trained"))


def write_metrics_csv(path: str | Path, history: Sequence[EpochMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy"])
        for h in history:
            writer.writerow([h.epoch, f"{h.loss:.8f}", f"{h.accuracy:.6f}"])
