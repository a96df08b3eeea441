import threading

import numpy as np
import pytest

from mbqnn.codec import PrecisionConfig as P
from mbqnn.codec import quantize_values
from mbqnn.errors import ConfigError, DimensionError, DomainError, IntegrityError
from mbqnn.network import (
    FloatModel,
    LayerSpec,
    ModelSpec,
    QuantizedModel,
    decompose_model,
    infer,
    quantize_model,
    recompose_model,
    reference_forward,
)


def mlp(bits=(2, 2), sizes=(6, 10, 8, 3), limiter="htanh"):
    layers = tuple(LayerSpec.fc(a, b, P(bits[0], bits[1], limiter)) for a, b in zip(sizes, sizes[1:]))
    return ModelSpec((sizes[0],), layers)


def cnn():
    return ModelSpec(
        (2, 8, 8),
        (
            LayerSpec.conv2d(2, 4, 3, 1, 1, P(2, 2)),
            LayerSpec.conv2d(4, 3, 3, 2, 1, P(3, 2, "hrelu")),
            LayerSpec.fc(48, 5, P(2, 3)),
        ),
    )


def test_spec_shapes_and_validation():
    assert cnn().shapes()[1] == ((4, 8, 8), (3, 4, 4))
    assert cnn().output_shape == (5,)
    with pytest.raises(DimensionError):
        ModelSpec((6,), (LayerSpec.fc(6, 4), LayerSpec.fc(5, 2)))
    with pytest.raises(ConfigError):
        LayerSpec("pool", 2, 2)
    with pytest.raises(ConfigError):
        LayerSpec.conv2d(2, 2, 0)
    assert ModelSpec.from_dict(cnn().to_dict()) == cnn()


def test_quantize_one_bit_is_binarize():
    spec = ModelSpec((4,), (LayerSpec.fc(4, 3, P(1, 1)),))
    w = np.array([[0.3, -0.2, 0.0, 1.7], [-5, 0.9, -0.01, 0.5], [0.1, 0.1, -0.1, -0.1]])
    q = quantize_model([w], spec)
    expected = np.where(np.clip(w, -1, 1) >= 0, 1, -1)
    assert np.array_equal(q.weights[0], expected)


def test_quantize_fixed_point_at_8_bits():
    spec = ModelSpec((5,), (LayerSpec.fc(5, 4, P(8, 8)),))
    n = 2 * np.random.default_rng(0).integers(0, 256, size=(4, 5)) - 255
    q = quantize_model([n / 255], spec)
    assert np.array_equal(q.weights[0], n)
    assert q.max_errors[0] < 1e-15


def test_quantize_error_bound():
    spec = mlp()
    q = quantize_model(FloatModel.random(spec, seed=1, scale=1.0))
    assert all(e <= 1 / 3 + 1e-15 for e in q.max_errors)


def test_quantize_rejects_nan_and_bad_shapes():
    spec = mlp()
    fm = FloatModel.random(spec)
    fm.weights[0][0, 0] = np.nan
    with pytest.raises(DomainError):
        quantize_model(fm)
    with pytest.raises(DimensionError):
        quantize_model([np.zeros((2, 2))] * 3, spec)


def test_decompose_two_bit_branches():
    plan = decompose_model(quantize_model(FloatModel.random(mlp(), seed=2)))
    for pl in plan.layers:
        assert pl.weights.bits == 2 and pl.branch_count == 4
        assert pl.scale == pytest.approx(1 / 9)
        assert pl.branch_weights.tolist() == [[1, 2], [2, 4]]


def test_decompose_one_bit_single_plane():
    spec = ModelSpec((70,), (LayerSpec.fc(70, 2, P(1, 1)),))
    q = quantize_model(FloatModel.random(spec, seed=3))
    plan = decompose_model(q)
    from mbqnn.bitplane import pack

    assert plan.layers[0].weights.bits == 1
    assert plan.layers[0].weights.plane(1, 0) == pack(q.weights[0][1])


@pytest.mark.parametrize("spec", [mlp((3, 5)), cnn()])
def test_decomposition_lossless(spec):
    q = quantize_model(FloatModel.random(spec, seed=4, scale=1.0))
    assert recompose_model(decompose_model(q)) == q


def test_corrupt_levels_rejected():
    spec = ModelSpec((3,), (LayerSpec.fc(3, 1, P(2, 2)),))
    with pytest.raises(IntegrityError):
        QuantizedModel(spec, [np.array([[1, 2, 3]])])


def test_infer_counting_case(backend):
    n = 32
    spec = ModelSpec((n,), (LayerSpec.fc(n, n, P(1, 1)),))
    plan = decompose_model(quantize_model([np.ones((n, n))], spec))
    assert np.all(infer(plan, np.ones(n)) == n)


def test_infer_zero_layer_identity():
    plan = decompose_model(quantize_model([], ModelSpec((3, 2))))
    x = np.random.default_rng(0).standard_normal((3, 2))
    assert np.array_equal(infer(plan, x), x)


def test_single_fc_layer_matches_float_forward(backend):
    spec = ModelSpec((40,), (LayerSpec.fc(40, 7, P(2, 2)),))
    q = quantize_model(FloatModel.random(spec, seed=5, scale=1.0))
    x = np.random.default_rng(6).uniform(-1.2, 1.2, size=(11, 40))

    ref = quantize_values(np.clip(x, -1, 1), 2) @ (q.weights[0] / 3).T
    got = infer(decompose_model(q), x)
    assert np.max(np.abs(got - ref)) < 1e-6


@pytest.mark.parametrize("spec", [mlp((2, 2)), mlp((3, 1), limiter="tanh"), mlp((4, 4), limiter="hrelu"), cnn()])
def test_end_to_end_matches_reference(backend, spec):
    fm = FloatModel.random(spec, seed=7, scale=1.0)
    q = quantize_model(fm)
    plan = decompose_model(q)
    x = np.random.default_rng(8).uniform(-1, 1, size=(5,) + spec.input_shape)
    trace = []
    got = infer(plan, x, trace)
    ref = reference_forward(q, x)
    assert np.allclose(got, ref, rtol=1e-5, atol=1e-12)
    # accumulators are exact integers: compare with an integer matmul of the traced levels
    for layer, w, tr in zip(spec.layers, q.weights, trace):
        if layer.kind == "fc":
            s = tr.act_levels.reshape(len(x), -1).astype(np.int64) @ w.astype(np.int64).T
            assert np.array_equal(tr.accumulators, s)


def test_bias_added_after_scale():
    spec = ModelSpec((4,), (LayerSpec.fc(4, 2, P(1, 1), bias=True),))
    fm = FloatModel(spec, [np.ones((2, 4))], [np.array([0.5, -2.0])])
    plan = decompose_model(quantize_model(fm))
    assert infer(plan, np.ones(4)).tolist() == [4.5, 2.0]


def test_infer_shape_errors_name_layer():
    plan = decompose_model(quantize_model(FloatModel.random(mlp())))
    with pytest.raises(DimensionError):
        infer(plan, np.zeros(5))


def test_infer_non_finite_input():
    plan = decompose_model(quantize_model(FloatModel.random(mlp())))
    with pytest.raises(DomainError, match="layer 0"):
        infer(plan, np.full(6, np.nan))


def test_concurrent_inference_is_reproducible():
    plan = decompose_model(quantize_model(FloatModel.random(cnn(), seed=9)))
    x = np.random.default_rng(10).uniform(-1, 1, size=(3, 2, 8, 8))
    expected = infer(plan, x)
    results = [None] * 4

    def run(i):
        results[i] = infer(plan, x)

    threads = [threading.Thread(target=run, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(np.array_equal(r, expected) for r in results)
