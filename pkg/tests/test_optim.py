"""Parameter store and optimizer update rules."""

import numpy as np
import pytest

from fusionlane.optim import MissingGradientError, ParamStore, optimizer_step
from fusionlane.tensor import Tensor, backward


def test_duplicate_parameter_name_rejected():
    store = ParamStore()
    store.create("w", np.zeros(3))
    with pytest.raises(ValueError, match="duplicate"):
        store.create("w", np.zeros(3))


def test_plain_sgd_step():
    store = ParamStore()
    w = store.create("w", np.array([1.0]))
    w.grad = np.array([1.0], np.float32)
    optimizer_step(store, "momentum", lr=0.1, hyper={"mu": 0.0})
    assert w.data[0] == pytest.approx(0.9)
    assert w.grad is None


def test_momentum_accumulates_velocity():
    store = ParamStore()
    w = store.create("w", np.array([0.0]))
    for _ in range(2):
        w.grad = np.array([1.0], np.float32)
        optimizer_step(store, "momentum", lr=0.1)
    # velocity after two steps: 1.0 then 1.9
    assert w.data[0] == pytest.approx(-(0.1 + 0.19))


@pytest.mark.parametrize("g", [1e-3, 1.0, 1e3])
def test_adam_first_step_magnitude_is_lr(g):
    store = ParamStore()
    w = store.create("w", np.array([5.0]))
    w.grad = np.array([g], np.float32)
    optimizer_step(store, "adam", lr=0.01)
    assert abs(abs(5.0 - w.data[0]) - 0.01) < 0.01 * 0.02


def test_adam_converges_on_quadratic():
    store = ParamStore()
    w = store.create("w", np.array([0.0]))
    for _ in range(50):
        loss = ((w - Tensor(np.array([2.0], np.float32)))
                * (w - Tensor(np.array([2.0], np.float32)))).sum()
        backward(loss)
        optimizer_step(store, "adam", lr=0.1)
    assert abs(w.data[0] - 2.0) < 0.1


def test_missing_gradient_names_parameter():
    store = ParamStore()
    a = store.create("layer.weight", np.zeros(2))
    store.create("layer.bias", np.zeros(2))
    a.grad = np.zeros(2, np.float32)
    with pytest.raises(MissingGradientError, match="layer.bias"):
        optimizer_step(store, "adam", lr=0.1)


def test_state_shapes_match_parameters():
    store = ParamStore()
    w = store.create("w", np.zeros((3, 4)))
    w.grad = np.ones((3, 4), np.float32)
    optimizer_step(store, "adam", lr=0.1)
    assert store.state["w"]["m"].shape == (3, 4)
    assert store.state["w"]["v"].shape == (3, 4)
    assert store.state["w"]["t"] == 1


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="optimizer"):
        optimizer_step(ParamStore(), "sgdw", lr=0.1)
