"""Range coding front end: backend selection, symbol models, rc_encode/rc_decode.

The compiled kernels are used when importable; set ``HETPCC_PURE_PYTHON=1`` to
force the pure-Python implementation. Both produce identical bytes.
"""

from __future__ import annotations

import os

import numpy as np

from . import _pykernels
from .errors import StreamExhausted

PROB_BITS = 16
PROB_TOTAL = 1 << PROB_BITS

if os.environ.get("HETPCC_PURE_PYTHON", "") not in ("", "0"):
    _kernels = _pykernels
else:
    try:
        from . import _ckernels as _kernels
    except ImportError:  # extension not built
        _kernels = _pykernels

BACKEND = "cython" if _kernels is not _pykernels else "python"


def backends() -> dict:
    """Available kernel modules by name; the compiled one only if it was built."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out


class AdaptiveByteModel:
    """Order-0 adaptive model over 256 symbols.

    Frequencies start at 1, grow by ``increment`` per coded symbol and are
    halved (rounding up) whenever the total exceeds 2**16.
    """

    alphabet_size = 256

    def __init__(self, increment: int = 32, limit: int = PROB_TOTAL):
        self.increment = int(increment)
        self.limit = int(limit)
        self.freqs = np.ones(self.alphabet_size, dtype=np.uint32)
        self.total = self.alphabet_size

    def copy(self) -> "AdaptiveByteModel":
        m = AdaptiveByteModel(self.increment, self.limit)
        m.freqs = self.freqs.copy()
        m.total = self.total
        return m

    def cdf(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.freqs, dtype=np.int64)])

    def update(self, symbol: int) -> None:
        self.freqs[symbol] += self.increment
        self.total += self.increment
        if self.total > self.limit:
            self.freqs = (self.freqs + 1) >> 1
            self.total = int(self.freqs.sum())


class StaticTables:
    """Per-position static CDFs: symbol ``i`` is coded with table ``table_idx[i]``.

    ``cdfs`` is a 2-D array or a list of CDF rows of possibly different
    alphabet sizes (each row starts at 0, every bin has frequency >= 1, total
    at most 2**16). Ragged rows are padded internally with zero-width bins that
    can never be coded.
    """

    def __init__(self, cdfs, table_idx=None):
        if isinstance(cdfs, np.ndarray) and cdfs.ndim == 2:
            rows = list(cdfs)
        elif isinstance(cdfs, np.ndarray) and cdfs.ndim == 1:
            rows = [cdfs]
        else:
            rows = [np.asarray(r) for r in cdfs]
            if rows and np.ndim(rows[0]) == 0:
                rows = [np.asarray(cdfs)]
        width = max(len(r) for r in rows)
        padded = np.zeros((len(rows), width), dtype=np.int64)
        sizes = np.zeros(len(rows), dtype=np.int64)
        for i, r in enumerate(rows):
            r = np.asarray(r, dtype=np.int64)
            if len(r) < 2 or r[0] != 0 or np.any(np.diff(r) < 1) or r[-1] > PROB_TOTAL:
                raise ValueError(
                    f"table {i}: CDF must start at 0, give every symbol frequency >= 1 and total at most 2**16"
                )
            padded[i, : len(r)] = r
            padded[i, len(r):] = r[-1]
            sizes[i] = len(r) - 1
        self.cdfs = padded
        self.sizes = sizes
        self.table_idx = None if table_idx is None else np.ascontiguousarray(table_idx, dtype=np.int64)

    def indices(self, n: int) -> np.ndarray:
        if self.table_idx is None:
            return np.zeros(n, dtype=np.int64)
        if len(self.table_idx) < n:
            raise ValueError("fewer table indices than symbols")
        return self.table_idx[:n]

    def check(self, symbols: np.ndarray) -> None:
        idx = self.indices(len(symbols))
        if len(symbols) and (np.any(symbols < 0) or np.any(symbols >= self.sizes[idx])):
            bad = int(np.nonzero((symbols < 0) | (symbols >= self.sizes[idx]))[0][0])
            raise ValueError(f"symbol {int(symbols[bad])} at position {bad} outside its table's alphabet")


def rc_encode(symbols, model) -> bytes:
    """Range-codes ``symbols`` under ``model``.

    ``model`` is an :class:`AdaptiveByteModel` (updated in place, so pass a
    fresh one per stream), a :class:`StaticTables`, or any object with
    ``cdf() -> array`` and ``update(symbol)``.
    """
    syms = np.ascontiguousarray(symbols, dtype=np.int64).ravel()
    enc = _kernels.RangeEncoder()
    if isinstance(model, AdaptiveByteModel):
        model.total = enc.encode_adaptive(model.freqs, syms, model.total, model.increment, model.limit)
    elif isinstance(model, StaticTables):
        model.check(syms)
        enc.encode_tables(syms, model.indices(len(syms)), model.cdfs)
    else:
        for s in syms.tolist():
            cdf = np.asarray(model.cdf(), dtype=np.int64)
            if s < 0 or s >= len(cdf) - 1:
                raise ValueError(f"symbol {s} outside model alphabet")
            enc.encode(int(cdf[s]), int(cdf[s + 1] - cdf[s]), int(cdf[-1]))
            model.update(s)
    return enc.finish()


class Decoder:
    """Incremental decoder over one range-coded stream.

    Lets callers decode in chunks whose sizes depend on earlier symbols, as the
    octree decoder does level by level.
    """

    def __init__(self, data: bytes):
        self._dec = _kernels.RangeDecoder(bytes(data))

    def decode(self, model, n: int) -> np.ndarray:
        out = np.zeros(n, dtype=np.int64)
        if n == 0:
            return out
        if isinstance(model, AdaptiveByteModel):
            model.total = self._dec.decode_adaptive(
                model.freqs, n, model.total, model.increment, model.limit, out
            )
        elif isinstance(model, StaticTables):
            self._dec.decode_tables(model.indices(n), model.cdfs, out)
        else:
            for i in range(n):
                s = self._dec.decode(np.ascontiguousarray(model.cdf(), dtype=np.int64))
                out[i] = s
                model.update(s)
        return out

    @property
    def position(self) -> int:
        return self._dec.position


def rc_decode(data: bytes, model, n: int) -> np.ndarray:
    """Inverse of :func:`rc_encode` given a model that evolves identically."""
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    return Decoder(data).decode(model, n)


__all__ = [
    "AdaptiveByteModel",
    "StaticTables",
    "Decoder",
    "StreamExhausted",
    "rc_encode",
    "rc_decode",
    "BACKEND",
    "backends",
    "PROB_TOTAL",
]
