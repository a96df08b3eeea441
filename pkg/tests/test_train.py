import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbqnn.codec import Limiter, PrecisionConfig as P
from mbqnn.errors import ConfigError, DomainError
from mbqnn.network import FloatModel, LayerSpec, ModelSpec, decompose_model, infer, quantize_model
from mbqnn.train import (
    Dataset,
    Gradients,
    backward_ste,
    encoder_grad_2bit,
    encoder_grad_2bit_array,
    epochs_to_reach,
    evaluate,
    fit,
    forward_quantized,
    init_from_higher_precision,
    load_idx_dataset,
    make_blobs,
    make_optimizer,
    softmax_cross_entropy,
    spec_from_config,
    ste_grad_quantizer,
    step,
    train_epoch,
    validate_config,
)


def mlp(bits=2, limiter="htanh", sizes=(2, 16, 16, 3), bias=False):
    layers = tuple(LayerSpec.fc(a, b, P(bits, bits, limiter), bias=bias) for a, b in zip(sizes, sizes[1:]))
    return ModelSpec((sizes[0],), layers)


def high(x):
    return np.sign(np.sin(3 * np.pi * x / 4))


def low(x):
    return np.sign(-np.sin(3 * np.pi * x / 2))


def test_encoder_grad_at_zero():
    dh, dl = encoder_grad_2bit(0.0)
    assert dh == pytest.approx(3 * np.pi / 4)
    assert dl == pytest.approx(-3 * np.pi / 2)


@pytest.mark.parametrize("x", [-1.0001, 1.5, -7.0, 42.0])
def test_encoder_grad_zero_outside(x):
    assert encoder_grad_2bit(x) == (0.0, 0.0)


def test_encoder_grad_matches_finite_differences():
    x = np.random.default_rng(0).uniform(-0.999, 0.999, 1000)
    h = 1e-6
    dh, dl = encoder_grad_2bit_array(x)
    fd_h = (np.sin(3 * np.pi * (x + h) / 4) - np.sin(3 * np.pi * (x - h) / 4)) / (2 * h)
    fd_l = (-np.sin(3 * np.pi * (x + h) / 2) + np.sin(3 * np.pi * (x - h) / 2)) / (2 * h)
    assert np.max(np.abs(dh - fd_h)) < 1e-5
    assert np.max(np.abs(dl - fd_l)) < 1e-5


def test_encoder_grad_nan():
    with pytest.raises(DomainError):
        encoder_grad_2bit(float("nan"))


@pytest.mark.parametrize("x,g", [(0.5, 1.0), (1.0, 1.0), (-1.0, 1.0), (1.2, 0.0), (-3.0, 0.0)])
def test_ste_mask(x, g):
    assert ste_grad_quantizer(x) == g


def test_hand_computed_two_bit_forward():
    spec = ModelSpec((2,), (LayerSpec.fc(2, 1, P(2, 2)),))
    m = FloatModel(spec, [np.array([[0.9, -0.4]])])
    z, _ = forward_quantized(m, np.array([[0.5, -0.2]]))
    # x -> (1/3, -1/3), w -> (1, -1/3)
    assert z[0, 0] == pytest.approx(4 / 9, abs=1e-15)


@pytest.mark.parametrize("bits,limiter", [(1, "htanh"), (2, "htanh"), (3, "hrelu"), (8, "tanh")])
def test_training_forward_equals_inference(bits, limiter):
    model = FloatModel.random(mlp(bits, limiter, bias=True), seed=bits, scale=1.0)
    model.biases = [np.linspace(-0.2, 0.2, b.size) for b in model.biases]
    x = np.random.default_rng(1).uniform(-1, 1, size=(64, 2))
    z, _ = forward_quantized(model, x)
    assert np.array_equal(z, infer(decompose_model(quantize_model(model)), x))


def test_backward_zero_input_grad_in_clipped_region():
    spec = ModelSpec((3,), (LayerSpec.fc(3, 1, P(2, 2)),))
    model = FloatModel.random(spec, seed=0)
    x = np.array([[1.5, -2.0, 0.3]])
    z, cache = forward_quantized(model, x)
    g = backward_ste(model, cache, np.ones_like(z))
    assert g.inputs[0, 0] == 0.0 and g.inputs[0, 1] == 0.0 and g.inputs[0, 2] != 0.0


def test_backward_eight_bit_close_to_float():
    data = make_blobs(20)
    model = FloatModel.random(mlp(8), seed=3)
    z8, c8 = forward_quantized(model, data.x, True)
    zf, cf = forward_quantized(model, data.x, False)
    _, g8 = softmax_cross_entropy(z8, data.y)
    _, gf = softmax_cross_entropy(zf, data.y)
    a, b = backward_ste(model, c8, g8), backward_ste(model, cf, gf)
    for wa, wb in zip(a.weights, b.weights):
        assert np.max(np.abs(wa - wb)) < 1e-2


def _loss(model, x, y, quantize, weights=None):
    z, _ = forward_quantized(model, x, quantize, weights)
    return softmax_cross_entropy(z, y)[0]


def test_float_gradients_match_finite_differences():
    data = make_blobs(5, seed=2)
    model = FloatModel.random(mlp(2, "tanh", bias=True), seed=4)
    model.biases = [np.full(b.shape, 0.05) for b in model.biases]
    z, cache = forward_quantized(model, data.x, False)
    grads = backward_ste(model, cache, softmax_cross_entropy(z, data.y)[1])
    rng, h = np.random.default_rng(0), 1e-6
    for i, w in enumerate(model.weights):
        for _ in range(5):
            idx = tuple(rng.integers(s) for s in w.shape)
            plus = [v.copy() for v in model.weights]
            minus = [v.copy() for v in model.weights]
            plus[i][idx] += h
            minus[i][idx] -= h
            fd = (_loss(model, data.x, data.y, False, plus) - _loss(model, data.x, data.y, False, minus)) / (2 * h)
            assert grads.weights[i][idx] == pytest.approx(fd, abs=1e-6)


def test_quantized_last_layer_gradient_matches_finite_differences():
    data = make_blobs(5, seed=3)
    model = FloatModel.random(mlp(2), seed=5, scale=0.5)
    z, cache = forward_quantized(model, data.x)
    grads = backward_ste(model, cache, softmax_cross_entropy(z, data.y)[1])
    act, w, h = cache.layers[-1].act, cache.layers[-1].weight, 1e-6
    for idx in np.ndindex(w.shape):
        plus, minus = w.copy(), w.copy()
        plus[idx] += h
        minus[idx] -= h
        fd = (softmax_cross_entropy(act @ plus.T, data.y)[0] - softmax_cross_entropy(act @ minus.T, data.y)[0]) / (2 * h)
        # latent weights are inside [-1, 1] so the STE mask is 1
        assert grads.weights[-1][idx] == pytest.approx(fd, abs=1e-6)


def test_stale_cache_rejected():
    model = FloatModel.random(mlp(), seed=0)
    z, cache = forward_quantized(model, make_blobs(2).x)
    model.weights[0] = model.weights[0] * 0.5
    with pytest.raises(ConfigError):
        backward_ste(model, cache, np.zeros_like(z))


def _zero_grads(model):
    return Gradients([np.zeros_like(w) for w in model.weights], [None] * len(model.weights), np.zeros(1))


@pytest.mark.parametrize("kind", ["adam", "sgd"])
def test_zero_gradient_is_noop(kind):
    model = FloatModel.random(mlp(), seed=0)
    before = [w.copy() for w in model.weights]
    step(make_optimizer(model, kind), model, _zero_grads(model))
    assert all(np.array_equal(a, b) for a, b in zip(before, model.weights))


def test_sgd_rule_and_clip():
    spec = ModelSpec((2,), (LayerSpec.fc(2, 1, P(3, 3)),))
    model = FloatModel(spec, [np.array([[0.5, 0.95]])])
    opt = make_optimizer(model)
    assert opt.layers[0].kind == "sgd" and opt.layers[0].lr == 0.1
    g = Gradients([np.array([[1.0, -1.0]])], [None], np.zeros(1))
    step(opt, model, g)
    assert model.weights[0].tolist() == [[pytest.approx(0.4), 1.0]]


def test_default_optimizer_choice():
    assert make_optimizer(FloatModel.random(mlp(2))).layers[0].kind == "adam"
    assert make_optimizer(FloatModel.random(mlp(4))).layers[0].kind == "sgd"


def test_nonfinite_gradient_rejected():
    model = FloatModel.random(mlp(), seed=0)
    g = _zero_grads(model)
    g.weights[1][0, 0] = np.inf
    with pytest.raises(DomainError):
        step(make_optimizer(model), model, g)


def test_init_from_higher_precision_copies_verbatim():
    donor = FloatModel.random(mlp(4, "hrelu"), seed=2)
    lowered = init_from_higher_precision(donor, 3)
    assert all(l.precision == P(3, 3, "hrelu") for l in lowered.spec.layers)
    assert all(np.array_equal(a, b) for a, b in zip(donor.weights, lowered.weights))
    lowered.weights[0][0, 0] = 9
    assert donor.weights[0][0, 0] != 9
    one = init_from_higher_precision(donor, 1)
    assert all(l.limiter is Limiter.HTANH for l in one.spec.layers)


def test_init_architecture_mismatch():
    donor = FloatModel.random(mlp(4), seed=2)
    with pytest.raises(ConfigError):
        init_from_higher_precision(donor, mlp(2, sizes=(2, 8, 3)))
    with pytest.raises(ConfigError):
        init_from_higher_precision(FloatModel.random(mlp(2)), mlp(4))


def test_zero_learning_rate_leaves_loss_unchanged():
    data = make_blobs(30)
    model = FloatModel.random(mlp(), seed=1)
    before = evaluate(model, data)
    train_epoch(model, data, make_optimizer(model, lr=0.0))
    assert evaluate(model, data) == before


def test_float_training_converges():
    data = make_blobs()
    model = FloatModel.random(mlp(), seed=1)
    history = fit(model, data, 60, quantize=False)
    assert history[-1].accuracy >= 0.99
    assert history[-1].loss < history[0].loss


def test_epochs_to_reach_counts_epoch_zero():
    data = make_blobs(20)
    model = FloatModel.random(mlp(), seed=1)
    hit, history = epochs_to_reach(model, data, target_loss=1e9, epochs=2)
    assert hit == 0 and [h.epoch for h in history] == [0, 1, 2]


def test_empty_dataset():
    model = FloatModel.random(mlp())
    with pytest.raises(ConfigError):
        train_epoch(model, Dataset(np.zeros((0, 2)), np.zeros(0, dtype=np.int64)), make_optimizer(model))


def _write_idx(path, arr, code):
    header = struct.pack(">BBBB", 0, 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + arr.tobytes())


def test_idx_loader(tmp_path):
    imgs = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 14
    _write_idx(tmp_path / "img.gz", imgs, 0x08)
    _write_idx(tmp_path / "lab", np.array([4, 7], dtype=np.uint8), 0x08)
    data = load_idx_dataset(tmp_path / "img.gz", tmp_path / "lab")
    assert data.x.shape == (2, 9) and data.y.tolist() == [4, 7]
    assert data.x.min() == -1.0 and data.x.max() <= 1.0


def test_config_validation_names_field():
    with pytest.raises(ConfigError, match="layers"):
        validate_config({"epochs": 3})
    with pytest.raises(ConfigError, match="bits_act"):
        validate_config({"layers": [{"out": 3, "bits_act": 12}]})
    cfg = validate_config({"layers": [{"out": 8}, {"out": 3, "bits_act": 3}]})
    spec = spec_from_config(cfg, make_blobs(2))
    assert spec.output_shape == (3,) and spec.layers[1].precision.m_activation == 3


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1, allow_nan=False))
def test_trig_encoder_levels_are_decodable(x):
    from mbqnn.codec import decode, encode_trig2

    lo, hi = encode_trig2(x)
    assert decode([lo, hi]) in (-1.0, -1 / 3, 1 / 3, 1.0)
