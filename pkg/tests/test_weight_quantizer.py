import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from app.errors import ContractError, DegenerateInputError
from app.models.codes import QuantizedWeights
from app.models.quant_params import WeightFilter
from app.services.tensor_core import Tensor, backward, finite_difference, tensor_sum
from app.services.weight_quantizer import (
    WeightQuantizer,
    baseline_learned_scale,
    baseline_tanh_max,
    baseline_weight_norm,
    entropy_bits,
    fq_quantize,
    initial_gamma,
    quantize_weights,
    regularization_factor,
    regularize,
    weight_backward,
    weight_norm,
)


def _fractions(q: QuantizedWeights) -> np.ndarray:
    return q.occupancy() / q.codes.size


@pytest.fixture
def outlier_weights(rng):
    W = rng.normal(0.0, 0.01, size=10_000)
    W[0] = 1.0
    return W


def test_regularize_examples():
    np.testing.assert_allclose(regularize(WeightFilter(np.array([1.0, -1.0]), 2)), [2 / 3, -2 / 3])
    np.testing.assert_allclose(regularize(WeightFilter(np.array([0.5, -0.5]), 2)), [2 / 3, -2 / 3])


def test_regularize_is_per_filter():
    W = np.array([[1.0, -1.0], [10.0, 30.0]])
    out = regularize(WeightFilter(W, 2))
    np.testing.assert_allclose(np.abs(out).mean(axis=1), [2 / 3, 2 / 3])


def test_regularize_all_zero():
    with pytest.raises(DegenerateInputError):
        regularize(WeightFilter(np.zeros(4), 2))
    with pytest.raises(DegenerateInputError):
        WeightFilter(np.zeros(0), 2)


@pytest.mark.parametrize("w, code, value", [(0.0, 2, 1 / 3), (-5.0, 0, -1.0), (0.4, 2, 1 / 3)])
def test_fq_quantize_examples(w, code, value):
    q = fq_quantize(np.array([w]), 2)
    assert int(q.codes[0]) == code
    assert q.dequantize()[0] == pytest.approx(value)


def test_fq_levels():
    np.testing.assert_allclose(fq_quantize(np.zeros(1), 2).levels(), [-1, -1 / 3, 1 / 3, 1])
    with pytest.raises(ContractError):
        fq_quantize(np.zeros(1), 0)


def test_weight_backward_examples():
    w_prime = np.array([0.5, 1.5, -1.2, -0.3])
    factor = regularization_factor(WeightFilter(np.array([0.25, 0.75, -0.6, -0.15]), 2))
    mask = np.abs(w_prime) <= 1.0
    g = weight_backward(np.ones(4), w_prime, 2, mask=mask, factor=factor)
    np.testing.assert_allclose(g, [factor[0], 0.0, 0.0, factor[0]])
    with pytest.raises(ContractError):
        weight_backward(np.ones(4), w_prime, 2, mask=None)


def test_entropy_bits_examples():
    assert entropy_bits(QuantizedWeights.from_codes(np.full(8, 2, dtype=np.uint8), 2)) == 0.0
    assert entropy_bits(QuantizedWeights.from_codes(np.arange(4, dtype=np.uint8), 2)) == pytest.approx(2.0)
    assert entropy_bits(QuantizedWeights.from_codes(np.array([0, 1], dtype=np.uint8), 2)) == pytest.approx(1.0)
    with pytest.raises(ContractError):
        entropy_bits(QuantizedWeights.from_codes(np.zeros(0, dtype=np.uint8), 2))


def test_tanh_max_maps_extremes_to_unit():
    for t in (0.01, 1.0, 50.0):
        np.testing.assert_allclose(baseline_tanh_max(np.array([t, -t]), 2).dequantize(), [1.0, -1.0])
    with pytest.raises(DegenerateInputError):
        baseline_tanh_max(np.zeros(3), 2)


def test_tanh_max_is_dominated_by_extremes(outlier_weights):
    frac = _fractions(baseline_tanh_max(outlier_weights, 2))
    assert frac[0] + frac[3] < 0.05


def test_entropy_regularization_spreads_levels(outlier_weights):
    q = quantize_weights(outlier_weights, 2, "entropy")
    frac = _fractions(q)
    assert np.all(np.abs(frac - 0.25) <= 0.15)
    assert entropy_bits(q) > entropy_bits(baseline_tanh_max(outlier_weights, 2))


def test_weight_norm_examples():
    np.testing.assert_allclose(weight_norm(np.array([3.0, 4.0])), [0.6, 0.8])
    np.testing.assert_allclose(weight_norm(np.array([[3.0, 4.0], [0.0, 2.0]])), [[0.6, 0.8], [0.0, 1.0]])
    with pytest.raises(DegenerateInputError):
        baseline_weight_norm(np.array([[1.0, 0.0], [0.0, 0.0]]), 2)


def test_learned_scale_starts_at_target_abs_mean():
    W = np.array([0.1, -0.3, 0.2, 0.0])
    gamma = initial_gamma(W, 2)
    assert np.abs(gamma * W).mean() == pytest.approx(2 / 3)
    assert np.array_equal(baseline_learned_scale(W, 2, gamma).codes, fq_quantize(gamma * W, 2).codes)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (3, 8), elements=st.floats(-4, 4).filter(lambda v: abs(v) > 1e-3)),
    st.sampled_from([0.25, 0.5, 2.0, 8.0]),
    st.integers(1, 4),
)
def test_entropy_quantizer_is_scale_invariant(W, c, n):
    a = quantize_weights(W, n, "entropy").codes
    b = quantize_weights(c * W, n, "entropy").codes
    assert np.array_equal(a, b)


def test_entropy_quantizer_gradient_uses_frozen_factor(rng):
    W0 = rng.normal(0.0, 0.1, size=(3, 5))
    wq = WeightQuantizer(2, "entropy")
    W = Tensor(W0, requires_grad=True)
    out = wq(W)
    np.testing.assert_allclose(out.data, wq.quantized(W0).dequantize())
    backward(tensor_sum(out))

    factor = regularization_factor(WeightFilter(W0, 2))[:, None]
    mask = np.abs(W0 * factor) <= 1.0
    np.testing.assert_allclose(W.grad, mask * factor)


def test_learned_scale_gradient_matches_clip_surrogate(rng):
    W0 = rng.normal(0.0, 0.5, size=(2, 6))
    R = rng.standard_normal((2, 6))
    wq = WeightQuantizer(2, "learned_scale", weight=Tensor(W0))
    gamma0 = float(wq.gamma.data)
    assert np.min(np.abs(np.abs(gamma0 * W0) - 1.0)) > 1e-4

    W = Tensor(W0, requires_grad=True)
    backward(tensor_sum(wq(W) * Tensor(R)))

    fd = finite_difference(lambda g: float(np.sum(R * np.clip(g[0] * W0, -1, 1))), np.array([gamma0]), eps=1e-7)
    assert float(wq.gamma.grad) == pytest.approx(fd[0], rel=1e-6, abs=1e-7)
    np.testing.assert_allclose(W.grad, R * (np.abs(gamma0 * W0) <= 1.0) * gamma0)


def test_unknown_method():
    with pytest.raises(ContractError):
        quantize_weights(np.ones(2), 2, "bogus")
    with pytest.raises(ContractError):
        WeightQuantizer(2, "bogus")
