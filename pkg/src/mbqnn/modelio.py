"""Model files and tensor containers.

Model file layout (all integers little-endian)::

    b"MBQN" | u32 format version | u64 header length | UTF-8 JSON header
    | zero pad to 8 bytes | blobs, each 8-byte aligned | 8-byte BLAKE2b checksum

The JSON header carries the architecture, per-layer bit widths and
limiters, and an entry per blob (``offset`` is relative to the start of
the blob area).  Blob encodings: ``float64`` and ``int16`` arrays, and
``planes``: u64 plane length N, u64 plane count P, then P * ceil(N/64)
u64 words, one canonical packed plane after another, ordered
(output unit, bit).  The checksum covers every preceding byte.

Tensor container: u64 rank, u64 per dimension, float32 values row-major.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .bitplane import n_words, padding_is_clean
from .errors import ChecksumError, CorruptionError, FormatError
from .kernels import EncodedTensor
from .network import FloatModel, MbnPlan, ModelSpec, PlanLayer, QuantizedModel

MAGIC = b"MBQN"
FORMAT_VERSION = 1
CHECKSUM_BYTES = 8
_PREAMBLE = struct.Struct("<4sIQ")

KIND_FLOAT = "float"
KIND_QUANTIZED = "quantized"
KIND_PLAN = "plan"

Model = FloatModel | QuantizedModel | MbnPlan


def _align8(n: int) -> int:
    return (n + 7) & ~7


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=CHECKSUM_BYTES).digest()


def _planes_blob(enc: EncodedTensor) -> bytes:
    head = struct.pack("<QQ", enc.length, enc.rows * enc.bits)
    return head + enc.planes.astype("<u8").tobytes()


def plane_payload_bytes(enc: EncodedTensor) -> int:
    """Bytes of packed words alone (no per-blob header)."""
    return enc.rows * enc.bits * n_words(enc.length) * 8


def _layer_blobs(model: Model) -> tuple[str, list[list[tuple[str, str, bytes]]]]:
    out = []
    if isinstance(model, MbnPlan):
        for pl in model.layers:
            blobs = [("weight", "planes", _planes_blob(pl.weights))]
            if pl.bias is not None:
                blobs.append(("bias", "float64", pl.bias.astype("<f8").tobytes()))
            out.append(blobs)
        return KIND_PLAN, out
    if isinstance(model, QuantizedModel):
        kind, enc, dt = KIND_QUANTIZED, "int16", "<i2"
    elif isinstance(model, FloatModel):
        kind, enc, dt = KIND_FLOAT, "float64", "<f8"
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    for w, b in zip(model.weights, model.biases):
        blobs = [("weight", enc, np.ascontiguousarray(w).astype(dt).tobytes())]
        if b is not None:
            blobs.append(("bias", "float64", b.astype("<f8").tobytes()))
        out.append(blobs)
    return kind, out


def dumps(model: Model) -> bytes:
    kind, layer_blobs = _layer_blobs(model)
    header = {"format": "MBQN", "kind": kind, **model.spec.to_dict()}
    payload = bytearray()
    for entry, blobs in zip(header["layers"], layer_blobs):
        entry["blobs"] = []
        for name, encoding, data in blobs:
            entry["blobs"].append({"name": name, "encoding": encoding, "offset": len(payload), "nbytes": len(data)})
            payload += data + b"\0" * (_align8(len(data)) - len(data))
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(hjson)) + hjson
    head += b"\0" * (_align8(len(head)) - len(head))
    body = head + bytes(payload)
    return body + _checksum(body)


def _blob(payload: memoryview, entry: dict, layer: int) -> bytes:
    off, nbytes = int(entry["offset"]), int(entry["nbytes"])
    if off < 0 or off + nbytes > len(payload):
        raise FormatError(f"layer {layer}: blob {entry['name']!r} runs past end of file")
    return bytes(payload[off : off + nbytes])


def _read_planes(data: bytes, layer, i: int) -> EncodedTensor:
    if len(data) < 16:
        raise FormatError(f"layer {i}: truncated plane block")
    length, count = struct.unpack_from("<QQ", data, 0)
    bits = layer.precision.k_weight
    if length != layer.fan_in or count != layer.out_size * bits:
        raise FormatError(f"layer {i}: plane block ({length}, {count}) does not match the layer shape")
    nw = n_words(length)
    if len(data) != 16 + 8 * count * nw:
        raise FormatError(f"layer {i}: plane block has {len(data)} bytes, expected {16 + 8 * count * nw}")
    words = np.frombuffer(data, dtype="<u8", offset=16).astype(np.uint64).reshape(layer.out_size, bits, nw)
    if not padding_is_clean(words, length):
        raise CorruptionError(f"layer {i}: nonzero padding bits in weight planes")
    return EncodedTensor(words, length, bits)


def _read_array(data: bytes, encoding: str, shape, i: int) -> np.ndarray:
    dt = {"float64": "<f8", "int16": "<i2"}.get(encoding)
    if dt is None:
        raise FormatError(f"layer {i}: unknown blob encoding {encoding!r}")
    count = int(np.prod(shape))
    if len(data) != count * np.dtype(dt).itemsize:
        raise FormatError(f"layer {i}: blob size {len(data)} does not match shape {tuple(shape)}")
    return np.frombuffer(data, dtype=dt).reshape(shape).copy()


def loads(data: bytes) -> Model:
    if len(data) < _PREAMBLE.size + CHECKSUM_BYTES:
        raise FormatError("truncated model file")
    magic, version, hlen = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}; not an MBQN model file")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    body, stored = data[:-CHECKSUM_BYTES], data[-CHECKSUM_BYTES:]
    hstart = _PREAMBLE.size
    if hstart + hlen > len(body):
        raise FormatError("truncated model header")
    if _checksum(body) != stored:
        raise ChecksumError("model checksum mismatch; file is corrupted")
    try:
        header = json.loads(bytes(data[hstart : hstart + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable model header: {exc}") from None
    spec = ModelSpec.from_dict(header)
    payload = memoryview(body)[_align8(hstart + hlen) :]
    kind = header.get("kind")
    weights, biases, plan_layers = [], [], []
    for i, (layer, entry) in enumerate(zip(spec.layers, header["layers"])):
        blobs = {b["name"]: b for b in entry.get("blobs", [])}
        if "weight" not in blobs:
            raise FormatError(f"layer {i}: missing weight blob")
        wb = blobs["weight"]
        bias = None
        if "bias" in blobs:
            bias = _read_array(_blob(payload, blobs["bias"], i), "float64", (layer.out_size,), i)
        raw = _blob(payload, wb, i)
        if kind == KIND_PLAN:
            if wb["encoding"] != "planes":
                raise FormatError(f"layer {i}: plan weights must use the planes encoding")
            plan_layers.append(PlanLayer(layer, _read_planes(raw, layer, i), bias))
        else:
            weights.append(_read_array(raw, wb["encoding"], layer.weight_shape, i))
            biases.append(bias)
    if kind == KIND_PLAN:
        return MbnPlan(spec, tuple(plan_layers))
    if kind == KIND_QUANTIZED:
        return QuantizedModel(spec, weights, biases)
    if kind == KIND_FLOAT:
        return FloatModel(spec, weights, biases)
    raise FormatError(f"unknown model kind {kind!r}")


def save_model(model: Model, path: str | os.PathLike) -> int:
    data = dumps(model)
    Path(path).write_bytes(data)
    return len(data)


def load_model(path: str | os.PathLike) -> Model:
    return loads(Path(path).read_bytes())


# --- tensor container -----------------------------------------------------


def tensor_to_bytes(x: np.ndarray) -> bytes:
    x = np.asarray(x, dtype="<f4")
    head = struct.pack("<Q", x.ndim) + struct.pack(f"<{x.ndim}Q", *x.shape)
    return head + np.ascontiguousarray(x).tobytes()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise FormatError("truncated tensor header")
    (rank,) = struct.unpack_from("<Q", data, 0)
    if rank > 32 or len(data) < 8 + 8 * rank:
        raise FormatError("truncated or implausible tensor header")
    dims = struct.unpack_from(f"<{rank}Q", data, 8)
    count = int(np.prod(dims)) if rank else 1
    start = 8 + 8 * rank
    if len(data) != start + 4 * count:
        raise FormatError(f"tensor of shape {dims} needs {start + 4 * count} bytes, got {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=start).reshape(dims).astype(np.float32)


def write_tensor(path: str | os.PathLike, x: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(x))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
