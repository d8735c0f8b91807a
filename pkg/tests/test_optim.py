from __future__ import annotations

import numpy as np
import pytest

from selfretrieve.exceptions import TrainingError
from selfretrieve.model.optim import SGD
from selfretrieve.model.tensor import Tensor


def test_sgd_zero_learning_rate() -> None:
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    optimizer = SGD({"w": w}, lr=0.0)

    (w * w).sum().backward()
    optimizer.step()

    assert w.data.tolist() == [1.0, -2.0]


def test_sgd_plain_step() -> None:
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    optimizer = SGD({"w": w}, lr=0.1, momentum=0.0)

    ((w * w).sum() * 0.5).backward()
    optimizer.step()

    assert np.allclose(w.data, [0.9, -1.8])


def test_sgd_momentum_and_weight_decay() -> None:
    w = Tensor(np.array([1.0]), requires_grad=True)
    optimizer = SGD({"w": w}, lr=0.1, momentum=0.5, weight_decay=1.0)

    for _ in range(2):
        optimizer.zero_grad()
        (w * 0.0).sum().backward()
        optimizer.step()

    # Velocity 1.0 then 0.5 * 1.0 + 0.9
    assert w.data[0] == pytest.approx(1.0 - 0.1 - 0.1 * 1.4)


def test_sgd_skips_missing_gradients() -> None:
    w = Tensor(np.array([3.0]), requires_grad=True)
    optimizer = SGD({"w": w}, lr=1.0)

    optimizer.step()

    assert w.data.tolist() == [3.0]


def test_sgd_non_finite_gradient() -> None:
    w = Tensor(np.array([1.0]), requires_grad=True, name="w")
    w.grad = np.array([np.inf])

    with pytest.raises(TrainingError, match="w"):
        SGD({"w": w}, lr=0.1).step()


@pytest.mark.parametrize("kwargs", [{"lr": -1.0}, {"lr": 0.1, "momentum": 1.0}, {"lr": 0.1, "weight_decay": -1.0}])
def test_sgd_invalid(kwargs: dict) -> None:
    with pytest.raises(ValueError):
        SGD({}, **kwargs)
