"""Tape-based reverse-mode differentiation over dense numpy arrays.

Only the operations the codec networks need are provided. Every op records a
closure on the active :class:`Tape` when any input requires a gradient;
``Tape.backward`` replays the records in reverse creation order.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __len__(self):
        return self.value.shape[0]

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records differentiable ops issued while it is active (``with Tape() as t``)."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.records = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def backward(self, loss: Tensor, seed=None):
        """Accumulates d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
        produced = {id(out) for out, _, _ in self.records}
        seed = np.ones_like(loss.value) if seed is None else np.asarray(seed, dtype=loss.dtype)
        grads = {id(loss): seed}
        leaves = {}
        for out, parents, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, gp in zip(parents, fn(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = gp if key not in grads else grads[key] + gp
                if key not in produced:
                    leaves[key] = p
        for key, p in leaves.items():
            g = grads[key]
            p.grad = g if p.grad is None else p.grad + g
        self.records.clear()


def _record(out_value, parents, fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(out_value, requires_grad=needs)
    if needs and Tape._stack:
        Tape._stack[-1].records.append((out, parents, fn))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------- ops

def matmul(x: Tensor, w: Tensor) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch {x.shape} @ {w.shape}")
    xv, wv = x.value, w.value
    return _record(xv @ wv, (x, w), lambda g: (g @ wv.T, xv.T @ g))


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum; ``y`` may also be a row vector broadcast over the rows of ``x``."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape == y.shape:
        return _record(x.value + y.value, (x, y), lambda g: (g, g))
    if y.value.ndim == 1 and x.value.ndim == 2 and x.shape[1] == y.shape[0]:
        return _record(x.value + y.value, (x, y), lambda g: (g, g.sum(axis=0)))
    raise ValueError(f"add shape mismatch {x.shape} + {y.shape}")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x W + b, fused."""
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"affine shape mismatch {x.shape}, {w.shape}, {b.shape}")
    xv, wv = x.value, w.value
    return _record(xv @ wv + b.value, (x, w, b), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


def sub(x: Tensor, y: Tensor) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"sub shape mismatch {x.shape} - {y.shape}")
    return _record(x.value - y.value, (x, y), lambda g: (g, -g))


def mul(x: Tensor, y) -> Tensor:
    """Elementwise product with a same-shape tensor or a python scalar."""
    x = as_tensor(x)
    if not isinstance(y, Tensor):
        c = y
        return _record(x.value * c, (x,), lambda g: (g * c,))
    if x.shape != y.shape:
        raise ValueError(f"mul shape mismatch {x.shape} * {y.shape}")
    xv, yv = x.value, y.value
    return _record(xv * yv, (x, y), lambda g: (g * yv, g * xv))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _record(np.where(mask, x.value, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def setwise_max(x: Tensor) -> Tensor:
    """Max over axis 1 of an (N, k, c) tensor; gradient goes to the first maximal row."""
    v = x.value
    if v.ndim != 3:
        raise ValueError("setwise_max expects an (N, k, c) tensor")
    arg = np.argmax(v, axis=1)  # first occurrence on ties
    n, k, c = v.shape
    rows = np.arange(n)[:, None]
    cols = np.arange(c)[None, :]
    out = v[rows, arg, cols]

    def back(g):
        gx = np.zeros_like(v)
        gx[rows, arg, cols] = g
        return (gx,)

    return _record(out, (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([x.value for x in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    v = x.value

    def back(g):
        gx = np.zeros_like(v)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(v[idx], (x,), back)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.asarray(x.value.sum(dtype=np.float64)), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.value.size
    shape = x.shape
    return _record(
        np.asarray(x.value.mean(dtype=np.float64)), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),)
    )


def row_norm(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Euclidean norm of each row, smoothed by ``eps`` inside the root."""
    v = x.value
    n = np.sqrt(np.sum(v * v, axis=1) + eps)
    return _record(n, (x,), lambda g: ((g / n)[:, None] * v,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Max of two scalars; ties route the gradient to ``a``."""
    pick_a = bool(a.value >= b.value)
    out = a.value if pick_a else b.value
    zero = np.zeros_like(out)
    return _record(np.asarray(out), (a, b), lambda g: (g if pick_a else zero, zero if pick_a else g))


def scale_add(a: Tensor, ca: float, b: Tensor, cb: float) -> Tensor:
    """ca * a + cb * b for same-shape (usually scalar) tensors."""
    return _record(ca * a.value + cb * b.value, (a, b), lambda g: (ca * g, cb * g))


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


LIKELIHOOD_FLOOR = 1e-9


def logistic_bin_bits(v: Tensor, mu: Tensor, log_scale: Tensor) -> Tensor:
    """Bits of integer bins [v - 1/2, v + 1/2] under per-channel logistic densities.

    ``v`` is (N, d); ``mu`` and ``log_scale`` are (d,). Evaluated in float64 in
    the tail-stable form; masses are floored at ``LIKELIHOOD_FLOOR``.
    """
    vv = v.value.astype(np.float64)
    m = mu.value.astype(np.float64)
    ls = log_scale.value.astype(np.float64)
    sigma = np.exp(ls)
    # mirror onto the lower tail so both CDFs are small and well conditioned
    sign = np.where(vv - m > 0, -1.0, 1.0)
    a = sign * (vv + 0.5 - m) / sigma
    b = sign * (vv - 0.5 - m) / sigma
    sa, sb = _sigmoid(a), _sigmoid(b)
    p = np.abs(sa - sb)
    floored = p < LIKELIHOOD_FLOOR
    p = np.maximum(p, LIKELIHOOD_FLOOR)
    bits = -np.log2(p)

    def back(g):
        # d p / d a etc. in the unmirrored frame
        ua = (vv + 0.5 - m) / sigma
        ub = (vv - 0.5 - m) / sigma
        da = _sigmoid(ua) * (1 - _sigmoid(ua))
        db = _sigmoid(ub) * (1 - _sigmoid(ub))
        coef = np.where(floored, 0.0, -g / (p * np.log(2.0)))
        dv = coef * (da - db) / sigma
        dmu = -dv
        dls = coef * (-ua * da + ub * db)
        return (
            dv.astype(v.dtype),
            dmu.sum(axis=0).astype(mu.dtype),
            dls.sum(axis=0).astype(log_scale.dtype),
        )

    return _record(bits, (v, mu, log_scale), back)


def sparse_conv_op(x: Tensor, w: Tensor, b: Tensor | None, kmap, n_out: int) -> Tensor:
    """Gather/matmul/scatter convolution over a precomputed kernel map.

    ``w`` has shape (K, C_in, C_out); ``kmap`` is a list of K pairs
    ``(in_rows, out_rows)``. Within one offset each output row receives at most
    one input row, so plain fancy-index accumulation is exact.
    """
    xv, wv = x.value, w.value
    if xv.shape[1] != wv.shape[1]:
        raise ValueError(f"channel mismatch: input has {xv.shape[1]}, kernel expects {wv.shape[1]}")
    out = np.zeros((n_out, wv.shape[2]), dtype=xv.dtype)
    for k, (ii, oo) in enumerate(kmap):
        if len(ii):
            out[oo] += xv[ii] @ wv[k]
    if b is not None:
        out += b.value

    def back(g):
        gx = np.zeros_like(xv)
        gw = np.zeros_like(wv)
        for k, (ii, oo) in enumerate(kmap):
            if len(ii):
                go = g[oo]
                gx[ii] += go @ wv[k].T
                gw[k] = xv[ii].T @ go
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, back)
