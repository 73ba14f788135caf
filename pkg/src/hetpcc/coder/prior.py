"""Per-channel logistic factorized prior: rate estimates and range-coder tables."""

from __future__ import annotations

import numpy as np

from ..nn.tensor import Tensor, logistic_bin_bits, sum_all
from .rangecoder import PROB_TOTAL


class FactorizedPrior:
    """Logistic density per channel with trainable location and log-scale.

    The parameters are Tensors, usually owned by a
    :class:`~hetpcc.nn.params.ParameterStore` under ``prefix.mu`` and
    ``prefix.log_scale``.
    """

    def __init__(self, mu: Tensor, log_scale: Tensor):
        if mu.shape != log_scale.shape or mu.value.ndim != 1:
            raise ValueError("mu and log_scale must be matching 1-D tensors")
        self.mu = mu
        self.log_scale = log_scale

    @classmethod
    def create(cls, store, channels: int, prefix: str = "prior", init_scale: float = 1.0):
        mu = store.zeros(f"{prefix}.mu", (channels,))
        ls = store.add(f"{prefix}.log_scale", np.full(channels, np.log(init_scale)))
        return cls(mu, ls)

    @classmethod
    def from_arrays(cls, mu, log_scale):
        return cls(Tensor(np.asarray(mu, dtype=np.float64)), Tensor(np.asarray(log_scale, dtype=np.float64)))

    @property
    def channels(self) -> int:
        return self.mu.shape[0]

    def bits_tensor(self, values: Tensor) -> Tensor:
        """Differentiable total bits of ``values`` (N, d)."""
        return sum_all(logistic_bin_bits(values, self.mu, self.log_scale))


def prior_bits(values, prior: FactorizedPrior) -> float:
    """Total bits of an (N, d) matrix under the prior, accumulated in float64."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != prior.channels:
        raise ValueError(f"values must have shape (N, {prior.channels})")
    return float(logistic_bin_bits(Tensor(v), prior.mu, prior.log_scale).value.sum())


def _logistic_cdf(x, mu, scale):
    z = (x - mu) / scale
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))


def prior_cdf_table(prior: FactorizedPrior, channel: int, value_range) -> np.ndarray:
    """Integer CDF with total 2**16 over the integers ``lo..hi`` inclusive.

    The two end bins also carry the tail mass beyond the range, so they act as
    escape bins. Masses are floored to integers (at least 1 each) and the
    remainder handed out by largest fractional part, ties to the lower bin.
    """
    lo, hi = int(value_range[0]), int(value_range[1])
    if hi < lo:
        raise ValueError("empty value range")
    nbins = hi - lo + 1
    if nbins > PROB_TOTAL // 2:
        raise ValueError(f"value range of {nbins} bins is too wide for 16-bit probabilities")
    mu = float(prior.mu.value[channel])
    scale = float(np.exp(prior.log_scale.value[channel]))
    edges = np.arange(lo, hi + 2, dtype=np.float64) - 0.5
    cdf = _logistic_cdf(edges, mu, scale)
    cdf[0], cdf[-1] = 0.0, 1.0
    pmf = np.diff(cdf)
    pmf = np.maximum(pmf, 0.0)
    pmf /= pmf.sum()

    budget = PROB_TOTAL - nbins  # one count reserved per bin
    scaled = pmf * budget
    counts = np.floor(scaled).astype(np.int64)
    short = budget - int(counts.sum())
    if short > 0:
        order = np.lexsort((np.arange(nbins), -(scaled - counts)))
        counts[order[:short]] += 1
    counts += 1
    out = np.zeros(nbins + 1, dtype=np.int64)
    np.cumsum(counts, out=out[1:])
    assert out[-1] == PROB_TOTAL
    return out


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_features(values, mode: str = "eval", rng: np.random.Generator | None = None):
    """Eval mode rounds half away from zero; train mode adds U(-1/2, 1/2) noise."""
    v = np.asarray(values)
    if mode == "eval":
        return round_half_away(v).astype(np.int64)
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode quantization needs a noise source")
        noise = rng.uniform(-0.5, 0.5, size=v.shape)
        # keep strictly inside the open interval
        noise = np.clip(noise, -0.5 + 1e-7, 0.5 - 1e-7)
        return (v + noise).astype(v.dtype if v.dtype.kind == "f" else np.float64)
    raise ValueError(f"unknown quantization mode {mode!r}")
