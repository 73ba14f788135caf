"""Pure-Python range-coder kernels; byte-identical to the compiled ``_ckernels``.

Carry-less range coder with 32-bit low/range registers, byte output and
frequency totals up to 2**16.
"""

from __future__ import annotations

import numpy as np

from .errors import StreamExhausted

MASK = 0xFFFFFFFF
TOP = 1 << 24
BOT = 1 << 16


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.rng = MASK
        self.out = bytearray()
        self.done = False

    def _enc(self, cum, freq, total):
        r = self.rng // total
        low = (self.low + cum * r) & MASK
        rng = r * freq
        out = self.out
        while True:
            if (low ^ ((low + rng) & MASK)) >= TOP:
                if rng >= BOT:
                    break
                rng = (-low) & (BOT - 1)
            out.append(low >> 24)
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        self.low = low
        self.rng = rng

    def encode(self, cum: int, freq: int, total: int) -> None:
        if freq == 0 or total == 0 or total > BOT or cum + freq > total:
            raise ValueError("invalid frequency triple")
        self._enc(cum, freq, total)

    def encode_adaptive(self, freqs: np.ndarray, symbols, total: int, inc: int, limit: int) -> int:
        a = len(freqs)
        f = [int(v) for v in freqs]
        for s in np.asarray(symbols, dtype=np.int64).tolist():
            if s < 0 or s >= a:
                raise ValueError(f"symbol {s} outside alphabet of size {a}")
            self._enc(sum(f[:s]), f[s], total)
            f[s] += inc
            total += inc
            if total > limit:
                f = [(v + 1) >> 1 for v in f]
                total = sum(f)
        freqs[:] = f
        return total

    def encode_tables(self, symbols, table_idx, cdfs) -> None:
        cdfs = np.asarray(cdfs, dtype=np.int64)
        a = cdfs.shape[1] - 1
        rows = cdfs.tolist()
        for s, t in zip(np.asarray(symbols).tolist(), np.asarray(table_idx).tolist()):
            if s < 0 or s >= a:
                raise ValueError(f"symbol {s} outside alphabet of size {a}")
            c = rows[t]
            self._enc(c[s], c[s + 1] - c[s], c[a])

    def finish(self) -> bytes:
        if not self.done:
            for _ in range(4):
                self.out.append(self.low >> 24)
                self.low = (self.low << 8) & MASK
            self.done = True
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0
        self.low = 0
        self.rng = MASK
        self.code = 0
        self.r = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._get()

    def _get(self) -> int:
        if self.pos >= len(self.data):
            raise StreamExhausted("range-coded stream exhausted")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def _freq(self, total):
        self.r = self.rng // total
        v = ((self.code - self.low) & MASK) // self.r
        return v if v < total else total - 1

    def _consume(self, cum, freq):
        low = (self.low + cum * self.r) & MASK
        rng = self.r * freq
        while True:
            if (low ^ ((low + rng) & MASK)) >= TOP:
                if rng >= BOT:
                    break
                rng = (-low) & (BOT - 1)
            self.code = ((self.code << 8) | self._get()) & MASK
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        self.low = low
        self.rng = rng

    def decode(self, cdf) -> int:
        cdf = np.asarray(cdf).tolist()
        a = len(cdf) - 1
        v = self._freq(cdf[a])
        s = 0
        while cdf[s + 1] <= v:
            s += 1
        self._consume(cdf[s], cdf[s + 1] - cdf[s])
        return s

    def decode_adaptive(self, freqs: np.ndarray, n: int, total: int, inc: int, limit: int, out) -> int:
        f = [int(v) for v in freqs]
        for i in range(n):
            v = self._freq(total)
            cum = 0
            s = 0
            while cum + f[s] <= v:
                cum += f[s]
                s += 1
            self._consume(cum, f[s])
            out[i] = s
            f[s] += inc
            total += inc
            if total > limit:
                f = [(x + 1) >> 1 for x in f]
                total = sum(f)
        freqs[:] = f
        return total

    def decode_tables(self, table_idx, cdfs, out) -> None:
        rows = np.asarray(cdfs, dtype=np.int64).tolist()
        a = len(rows[0]) - 1 if rows else 0
        for i, t in enumerate(np.asarray(table_idx).tolist()):
            c = rows[t]
            v = self._freq(c[a])
            s = 0
            while c[s + 1] <= v:
                s += 1
            self._consume(c[s], c[s + 1] - c[s])
            out[i] = s

    @property
    def position(self) -> int:
        return self.pos
