from __future__ import annotations

import numpy as np

from .params import ParameterStore
from .tensor import Tensor, affine, relu


class Linear:
    def __init__(self, store: ParameterStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.w = store.glorot(f"{name}.w", (fan_in, fan_out), rng)
        self.b = store.zeros(f"{name}.b", (fan_out,))

    @classmethod
    def bind(cls, store: ParameterStore, name: str) -> "Linear":
        self = cls.__new__(cls)
        self.w = store[f"{name}.w"]
        self.b = store[f"{name}.b"]
        return self

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.w, self.b)


class MLP:
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, store: ParameterStore, name: str, widths, rng: np.random.Generator):
        self.layers = [
            Linear(store, f"{name}.{i}", widths[i], widths[i + 1], rng) for i in range(len(widths) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x
