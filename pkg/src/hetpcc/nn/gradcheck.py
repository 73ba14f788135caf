"""Central-difference gradient verification."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor


def grad_check(fn, params, eps: float = 1e-3, max_entries: int | None = None, seed: int = 0,
               floor: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn()`` must build a scalar Tensor from ``params`` (a list of Tensors
    with ``requires_grad``). Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_entries`` samples that many coordinates per parameter.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    analytic = [np.zeros_like(p.value) if p.grad is None else np.array(p.grad, dtype=np.float64) for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        n = flat.size
        picks = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + eps
            fp = float(fn().value)
            flat[i] = old - eps
            fm = float(fn().value)
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            a = float(ga.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        p.grad = None
    return worst


def numeric_gradient(fn, p: Tensor, eps: float = 1e-3) -> np.ndarray:
    flat = p.value.reshape(-1)
    g = np.zeros(flat.size)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(fn().value)
        flat[i] = old - eps
        fm = float(fn().value)
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g.reshape(p.shape)
