from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np

from selfretrieve.exceptions import TrainingError

if TYPE_CHECKING:
    from selfretrieve.model.tensor import Tensor


def check_gradients(parameters: dict[str, Tensor]) -> None:
    """Raise :class:`TrainingError` naming the first parameter with a non-finite gradient."""
    for name, param in parameters.items():
        if param.grad is not None and not np.isfinite(param.grad).all():
            raise TrainingError(f"Non-finite gradient for parameter {name}")


class SGD:
    """Stochastic gradient descent with heavy-ball momentum and L2 weight decay.

    Parameters are updated in place. Parameters without a gradient are left untouched.
    """

    def __init__(self, parameters: dict[str, Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError(f"Invalid learning rate: {lr}")
        if not 0 <= momentum < 1:
            raise ValueError(f"Invalid momentum: {momentum}")
        if weight_decay < 0:
            raise ValueError(f"Invalid weight decay: {weight_decay}")

        self.parameters = parameters
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(param.data) for name, param in parameters.items()}

    def zero_grad(self) -> None:
        for param in self.parameters.values():
            param.zero_grad()

    def step(self) -> None:
        check_gradients(self.parameters)
        if self.lr == 0:
            return

        for name, param in self.parameters.items():
            if param.grad is None:
                continue
            grad = param.grad + self.weight_decay * param.data if self.weight_decay else param.grad
            velocity = self.velocity[name]
            velocity *= self.momentum
            velocity += grad
            param.data -= (self.lr * velocity).astype(param.data.dtype)
