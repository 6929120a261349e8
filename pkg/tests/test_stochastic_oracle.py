import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from app.errors import ContractError
from app.services.activation_quantizer import default_params, quantize_forward, surrogate
from app.services.stochastic_oracle import (
    binarize_params,
    deterministic_from_threshold,
    make_rng,
    mc_expectation,
    oracle_grid,
    random_params,
    stochastic_binarize,
    stochastic_binarize_mean,
    stochastic_quantize,
    stochastic_sample,
)

TRIALS = 100_000


def test_binarize_saturates():
    rng = make_rng(0)
    assert all(stochastic_binarize(2.0, rng) == 1 for _ in range(200))
    assert np.all(stochastic_binarize(-3.0, rng, size=500) == -1)


@pytest.mark.parametrize("x, expected", [(0.0, 0.0), (0.5, 0.5), (-0.25, -0.25)])
def test_binarize_mean_is_clipped_identity(x, expected):
    est = stochastic_binarize_mean(x, TRIALS, seed=11)
    assert abs(est.mean - expected) < 0.01


def test_binarizer_is_one_bit_quantizer():
    p = binarize_params()
    for x in (-0.6, 0.1, 0.7):
        est = mc_expectation(x, p, TRIALS, seed=5)
        # code c <-> sign 2c - 1
        assert abs((2 * est.mean - 1) - x) < 0.02


def test_quantize_at_first_cut_point_is_zero():
    p = default_params(2)
    assert np.all(stochastic_quantize(p.s, p, make_rng(1), size=1000) == 0)


def test_quantize_segment_midpoint_is_fair():
    p = default_params(2)
    mid = p.s + p.a[0] / 2
    codes = stochastic_quantize(mid, p, make_rng(2), size=TRIALS)
    assert set(np.unique(codes)) <= {0, 1}
    assert abs(codes.mean() - 0.5) < 0.01


def test_nonuniform_mean_matches_surrogate(nonuniform_params):
    est = mc_expectation(0.5, nonuniform_params, TRIALS, seed=3)
    assert abs(est.mean - 1.3) < 0.01


def test_single_trial_is_the_single_draw(nonuniform_params):
    est = mc_expectation(0.5, nonuniform_params, 1, seed=9)
    draw = stochastic_quantize(0.5, nonuniform_params, make_rng(9), size=1)[0]
    assert est.mean == float(draw) and est.stderr == 0.0


def test_far_right_saturates(nonuniform_params):
    assert mc_expectation(50.0, nonuniform_params, 500, seed=0).mean == 3.0
    assert mc_expectation(-50.0, nonuniform_params, 500, seed=0).mean == 0.0


def test_trials_must_be_positive(nonuniform_params):
    with pytest.raises(ContractError):
        mc_expectation(0.0, nonuniform_params, 0, seed=0)
    with pytest.raises(ContractError):
        stochastic_binarize_mean(0.0, 0, seed=0)


@settings(max_examples=15, deadline=None, derandomize=True)
@given(st.integers(1, 3), st.integers(0, 2 ** 32), st.floats(-0.5, 1.0))
def test_mc_mean_within_clt_bound(n, seed, u):
    p = random_params(n, make_rng(seed))
    d = p.cut_points()
    x = d[0] + u * (d[-1] - d[0])
    est = mc_expectation(x, p, 20_000, seed)
    expected = float(surrogate(x, p))
    # 모든 draw가 같으면 stderr = 0
    assert abs(est.mean - expected) <= max(4 * est.stderr, 5.0 / est.trials)


def test_deterministic_threshold_examples():
    p = default_params(2)
    assert deterministic_from_threshold(0.5, p) == 1 == int(quantize_forward(np.array([0.5]), p).codes[0])
    assert deterministic_from_threshold(p.s + p.a[0] / 2, p) == 1
    assert deterministic_from_threshold(p.s - 0.01, p) == 0


def test_deterministic_threshold_matches_forward(nonuniform_params, rng):
    x = rng.uniform(-1.0, 3.0, size=2000)
    np.testing.assert_array_equal(
        deterministic_from_threshold(x, nonuniform_params),
        quantize_forward(x, nonuniform_params).codes.astype(np.int64),
    )


def test_sample_records_probability_and_state(nonuniform_params):
    sample = stochastic_sample(0.5, nonuniform_params, make_rng(4))
    assert sample.value in (1, 2)
    assert sample.probability_low == pytest.approx(0.7)
    assert sample.rng_state["bit_generator"] == "Philox"


def test_oracle_grid_deviation(nonuniform_params):
    grid = oracle_grid(nonuniform_params, trials=20_000, seed=0, points=21)
    assert list(grid.columns) == ["x", "mc_mean", "stderr", "surrogate", "deviation"]
    assert grid["deviation"].max() < 0.03
