"""Point analysis (shared MLP + max-pool) and point synthesis (MLP to k offsets)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn.layers import MLP
from .nn.params import ParameterStore
from .nn.tensor import Tensor, reshape, setwise_max


@dataclass(frozen=True)
class PointAnalysisConfig:
    widths: tuple = (3, 32, 64, 32)

    def __post_init__(self):
        if self.widths[0] != 3:
            raise ValueError("point analysis consumes 3-D offsets")

    @property
    def feature_width(self) -> int:
        return self.widths[-1]


@dataclass(frozen=True)
class PointSynthesisConfig:
    widths: tuple = (32, 128, 128, 30)

    @property
    def k(self) -> int:
        if self.widths[-1] % 3:
            raise ValueError("final synthesis width must be a multiple of 3")
        return self.widths[-1] // 3

    @classmethod
    def for_k(cls, k: int, in_width: int = 32, hidden=(128, 128)) -> "PointSynthesisConfig":
        return cls((in_width, *hidden, 3 * k))


class PointAnalysisNet:
    def __init__(self, store: ParameterStore, cfg: PointAnalysisConfig, rng, prefix: str = "point_analysis"):
        self.cfg = cfg
        self.dtype = store.dtype
        self.mlp = MLP(store, prefix, cfg.widths, rng)

    def __call__(self, offsets) -> Tensor:
        """(N, k, 3) offsets -> (N, m) features."""
        x = offsets if isinstance(offsets, Tensor) else Tensor(np.asarray(offsets, dtype=self.dtype))
        if x.value.ndim != 3 or x.shape[2] != 3:
            raise ValueError(f"expected (N, k, 3) offsets, got {x.shape}")
        n, k, _ = x.shape
        h = self.mlp(reshape(x, (n * k, 3)))
        return setwise_max(reshape(h, (n, k, self.cfg.feature_width)))


class PointSynthesisNet:
    def __init__(self, store: ParameterStore, cfg: PointSynthesisConfig, rng, prefix: str = "point_synthesis"):
        self.cfg = cfg
        self.mlp = MLP(store, prefix, cfg.widths, rng)

    def __call__(self, features: Tensor) -> Tensor:
        """(N, m') features -> (N, k, 3) offsets."""
        if features.value.ndim != 2 or features.shape[1] != self.cfg.widths[0]:
            raise ValueError(f"expected (N, {self.cfg.widths[0]}) features, got {features.shape}")
        n = features.shape[0]
        return reshape(self.mlp(features), (n, self.cfg.k, 3))
