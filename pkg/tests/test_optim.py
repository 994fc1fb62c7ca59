import numpy as np
import numpy.testing as npt
import pytest

from longdr.autodiff import Tape, Tensor, backward
from longdr.errors import ConfigError, ShapeError, TrainingError
from longdr.optim import Optimizer


def test_zero_gradient_leaves_params_unchanged():
    for method in ("adam", "sgd"):
        w = Tensor(np.array([1.0, -2.0]), requires_grad=True, name="w")
        opt = Optimizer({"w": w}, lr=0.5, method=method)
        opt.step({w: np.zeros(2)})
        npt.assert_array_equal(w.data, [1.0, -2.0])


def test_sgd_single_step():
    w = Tensor(np.array([0.0, 0.0]), requires_grad=True, name="w")
    opt = Optimizer({"w": w}, lr=0.1, method="sgd")
    opt.step({w: np.array([1.0, 1.0])})
    npt.assert_allclose(w.data, [-0.1, -0.1], rtol=0, atol=1e-16)


def test_adam_converges_on_quadratic_bowl():
    w = Tensor(np.array([5.0, -5.0]), requires_grad=True, name="w")
    opt = Optimizer({"w": w}, lr=0.1, method="adam")
    for _ in range(200):
        with Tape() as tape:
            loss = (w * w).sum()
        opt.step(backward(tape, loss))
    assert np.linalg.norm(w.data) < 1e-2


def test_nonfinite_gradient_names_parameter():
    w = Tensor(np.zeros(2), requires_grad=True, name="w")
    opt = Optimizer({"mlp.w1": w}, lr=0.1)
    with pytest.raises(TrainingError, match="mlp.w1"):
        opt.step({w: np.array([np.inf, 0.0])})


def test_gradient_shape_mismatch():
    w = Tensor(np.zeros(2), requires_grad=True, name="w")
    opt = Optimizer({"w": w}, lr=0.1)
    with pytest.raises(ShapeError):
        opt.step({w: np.zeros(3)})


def test_missing_gradient_skips_update():
    w = Tensor(np.array([3.0]), requires_grad=True, name="w")
    opt = Optimizer({"w": w}, lr=0.1)
    opt.step({})
    npt.assert_array_equal(w.data, [3.0])
    assert opt.state.step == 1


def test_bad_config_rejected():
    w = Tensor(np.zeros(1), requires_grad=True)
    with pytest.raises(ConfigError):
        Optimizer({"w": w}, lr=-1.0)
    with pytest.raises(ConfigError):
        Optimizer({"w": w}, lr=0.1, method="lbfgs")


def test_step_counter_and_accumulator_shapes():
    w = Tensor(np.zeros((2, 3)), requires_grad=True, name="w")
    opt = Optimizer({"w": w}, lr=0.1)
    assert opt.state.m["w"].shape == (2, 3)
    assert opt.state.v["w"].shape == (2, 3)
    opt.step({w: np.ones((2, 3))})
    assert opt.state.step == 1
