"""Multi-precision quantized networks executed as multi-branch xnor/popcount kernels."""

from ._accel import backend, set_backend, set_threads
from .bitplane import PackedPlane, bitdot, pack, unpack
from .codec import (
    Limiter,
    PrecisionConfig,
    QuantizedValue,
    decode,
    encode,
    encode_trig2,
    encode_zero_one,
    limit,
    quantize_linear,
)
from .kernels import EncodedTensor, dot_zero_one, gemm_reference_float, im2col, mb_conv2d, mb_dot, mb_dot_int, mb_gemm
from .modelio import load_model, save_model
from .network import (
    FloatModel,
    LayerSpec,
    MbnPlan,
    ModelSpec,
    QuantizedModel,
    decompose_model,
    infer,
    quantize_model,
    recompose_model,
    reference_forward,
)

__version__ = "0.1.0"
