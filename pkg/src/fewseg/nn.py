"""Parameter initialization and the SGD-with-momentum optimizer."""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .tensor import Tensor

__all__ = ["he_conv", "he_linear", "zeros_param", "ones_param", "SGD"]


def he_conv(rng: np.random.Generator, k: int, cin: int, cout: int,
            dtype) -> Tensor:
    """He-normal conv kernel (k, k, cin, cout) for ReLU-fed layers."""
    std = np.sqrt(2.0 / (k * k * cin))
    data = rng.normal(0.0, std, (k, k, cin, cout)).astype(dtype)
    return Tensor(data, requires_grad=True)


def he_linear(rng: np.random.Generator, nin: int, nout: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / nin)
    return Tensor(rng.normal(0.0, std, (nin, nout)).astype(dtype),
                  requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class SGD:
    """SGD with momentum and decoupled-from-nothing weight decay.

    velocity = momentum * velocity + grad + weight_decay * param
    param   -= lr * velocity
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float,
                 momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = {n: p for n, p in params.items() if p.requires_grad}
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {n: np.zeros_like(p.data)
                         for n, p in self.params.items()}

    def step(self) -> None:
        # params outside the differentiated graph are left untouched; with
        # decay they would otherwise shrink despite receiving no signal
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"velocity/{n}": v for n, v in self.velocity.items()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for n in self.velocity:
            key = f"velocity/{n}"
            if key not in arrays:
                raise KeyError(f"optimizer state missing entry '{key}'")
            if arrays[key].shape != self.velocity[n].shape:
                raise ValueError(f"optimizer state shape mismatch for '{n}'")
            self.velocity[n] = arrays[key].astype(
                self.velocity[n].dtype, copy=True)
