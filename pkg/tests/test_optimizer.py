import numpy as np
import pytest

from app.errors import ContractError, DimensionError, DivergenceError
from app.services.optimizer import Adam, AdamState, adam_step, lr_at
from app.services.tensor_core import Tensor


def test_one_step_from_fresh_state():
    state = AdamState()
    out = adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, state, 0.1)
    assert out["w"][0] == pytest.approx(-0.1, rel=1e-6)
    assert state.step == 1
    np.testing.assert_allclose(state.m["w"], [0.1])
    np.testing.assert_allclose(state.v["w"], [0.001])


def test_zero_gradient_leaves_fresh_params():
    params = {"w": np.array([1.5, -2.0])}
    out = adam_step(params, {"w": np.zeros(2)}, AdamState(), 0.1)
    np.testing.assert_array_equal(out["w"], params["w"])


def test_moments_decay_without_gradient():
    state = AdamState(step=1, m={"w": np.array([1.0])}, v={"w": np.array([1.0])})
    adam_step({"w": np.array([0.0])}, {}, state, 0.1)
    np.testing.assert_allclose(state.m["w"], [0.9])
    np.testing.assert_allclose(state.v["w"], [0.999])


def test_non_finite_gradient_aborts_before_update():
    state = AdamState()
    with pytest.raises(DivergenceError):
        adam_step({"w": np.zeros(2)}, {"w": np.array([1.0, np.nan])}, state, 0.1)
    assert state.step == 0 and not state.m


def test_gradient_shape_and_name_checks():
    with pytest.raises(DimensionError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 0.1)
    with pytest.raises(ContractError):
        adam_step({"w": np.zeros(2)}, {"u": np.zeros(2)}, AdamState(), 0.1)


def test_lr_schedule():
    assert lr_at(0, 100, 0.01) == 0.01
    assert lr_at(100, 100, 0.01) == 0.0
    assert lr_at(50, 100, 0.01) == pytest.approx(0.005)
    with pytest.raises(ContractError):
        lr_at(101, 100, 0.01)
    with pytest.raises(ContractError):
        lr_at(0, 0, 0.01)


def test_quantizer_group_uses_lr_factor():
    a = Tensor(np.array([0.5]), requires_grad=True)
    w = Tensor(np.array([0.5]), requires_grad=True)
    opt = Adam(
        [("layers.1.act.a", a), ("layers.1.weight", w)],
        0.1,
        quant_lr_factor=0.1,
        is_quantizer=lambda name: ".act." in name,
    )
    a.grad = np.array([1.0])
    w.grad = np.array([1.0])
    opt.step()
    assert a.data[0] == pytest.approx(0.49, rel=1e-6)
    assert w.data[0] == pytest.approx(0.4, rel=1e-6)
    opt.zero_grad()
    assert a.grad is None and w.grad is None


def test_clamp_runs_after_step():
    a = Tensor(np.array([0.001]), requires_grad=True)
    calls = []

    def clamp():
        calls.append(1)
        a.data = np.maximum(a.data, 1e-3)

    opt = Adam([("act.a", a)], 0.5, clamp=clamp)
    a.grad = np.array([1.0])
    opt.step()
    assert calls == [1]
    assert a.data[0] == 1e-3


def test_load_state_resumes_bias_correction():
    w = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([("w", w)], 0.1)
    opt.load_state(3, {"w": np.array([0.2], dtype=np.float32)}, {"w": np.array([0.01], dtype=np.float32)})
    assert opt.state.step == 3 and opt.state.m["w"].dtype == np.float64
    w.grad = np.array([0.0])
    opt.step()
    assert opt.state.step == 4
