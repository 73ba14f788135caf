# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled range-coder kernels. Mirrors ``_pykernels`` bit for bit."""

from libc.stdint cimport uint8_t, uint32_t, uint64_t, int64_t
from libc.stdlib cimport malloc, realloc, free

from .errors import StreamExhausted

cdef enum:
    TOP = 1 << 24
    BOT = 1 << 16


cdef class RangeEncoder:
    cdef uint32_t low
    cdef uint32_t rng
    cdef uint8_t* buf
    cdef Py_ssize_t size
    cdef Py_ssize_t cap
    cdef bint done

    def __cinit__(self):
        self.low = 0
        self.rng = 0xFFFFFFFF
        self.cap = 256
        self.size = 0
        self.buf = <uint8_t*> malloc(self.cap)
        if self.buf == NULL:
            raise MemoryError()
        self.done = False

    def __dealloc__(self):
        free(self.buf)

    cdef inline void _put(self, uint8_t b):
        cdef uint8_t* nb
        if self.size == self.cap:
            self.cap *= 2
            nb = <uint8_t*> realloc(self.buf, self.cap)
            if nb == NULL:
                raise MemoryError()
            self.buf = nb
        self.buf[self.size] = b
        self.size += 1

    cdef inline void _enc(self, uint32_t cum, uint32_t freq, uint32_t total):
        cdef uint32_t r = self.rng // total
        self.low += cum * r
        self.rng = r * freq
        while True:
            if (self.low ^ (self.low + self.rng)) >= TOP:
                if self.rng >= BOT:
                    break
                self.rng = (<uint32_t>0 - self.low) & (BOT - 1)
            self._put(<uint8_t>(self.low >> 24))
            self.low <<= 8
            self.rng <<= 8

    def encode(self, uint32_t cum, uint32_t freq, uint32_t total):
        if freq == 0 or total == 0 or total > BOT or cum + freq > total:
            raise ValueError("invalid frequency triple")
        self._enc(cum, freq, total)

    def encode_adaptive(self, uint32_t[::1] freqs, const int64_t[::1] symbols,
                        uint32_t total, uint32_t inc, uint32_t limit):
        """Codes symbols under an order-0 adaptive model; updates ``freqs`` in place.

        Returns the model total after the last update.
        """
        cdef Py_ssize_t i, j, n = symbols.shape[0], a = freqs.shape[0]
        cdef int64_t s
        cdef uint32_t cum
        for i in range(n):
            s = symbols[i]
            if s < 0 or s >= a:
                raise ValueError(f"symbol {s} outside alphabet of size {a}")
            cum = 0
            for j in range(s):
                cum += freqs[j]
            self._enc(cum, freqs[s], total)
            freqs[s] += inc
            total += inc
            if total > limit:
                total = 0
                for j in range(a):
                    freqs[j] = (freqs[j] + 1) >> 1
                    total += freqs[j]
        return total

    def encode_tables(self, const int64_t[::1] symbols, const int64_t[::1] table_idx,
                      const int64_t[:, ::1] cdfs):
        """Codes ``symbols[i]`` under static CDF row ``cdfs[table_idx[i]]``."""
        cdef Py_ssize_t i, n = symbols.shape[0], a = cdfs.shape[1] - 1
        cdef int64_t s, t
        for i in range(n):
            s = symbols[i]
            t = table_idx[i]
            if s < 0 or s >= a:
                raise ValueError(f"symbol {s} outside alphabet of size {a}")
            self._enc(<uint32_t>cdfs[t, s], <uint32_t>(cdfs[t, s + 1] - cdfs[t, s]),
                      <uint32_t>cdfs[t, a])

    def finish(self):
        cdef int i
        if not self.done:
            for i in range(4):
                self._put(<uint8_t>(self.low >> 24))
                self.low <<= 8
            self.done = True
        return bytes(self.buf[:self.size])


cdef class RangeDecoder:
    cdef const uint8_t[:] data
    cdef Py_ssize_t pos
    cdef uint32_t low
    cdef uint32_t rng
    cdef uint32_t code
    cdef uint32_t r

    def __cinit__(self, data):
        cdef int i
        self.data = data
        self.pos = 0
        self.low = 0
        self.rng = 0xFFFFFFFF
        self.code = 0
        for i in range(4):
            self.code = (self.code << 8) | self._get()

    cdef inline uint32_t _get(self) except? 0xFFFFFFFF:
        if self.pos >= self.data.shape[0]:
            raise StreamExhausted("range-coded stream exhausted")
        self.pos += 1
        return self.data[self.pos - 1]

    cdef inline uint32_t _freq(self, uint32_t total):
        self.r = self.rng // total
        cdef uint32_t v = (self.code - self.low) // self.r
        return v if v < total else total - 1

    cdef inline int _consume(self, uint32_t cum, uint32_t freq) except -1:
        self.low += cum * self.r
        self.rng = self.r * freq
        while True:
            if (self.low ^ (self.low + self.rng)) >= TOP:
                if self.rng >= BOT:
                    break
                self.rng = (<uint32_t>0 - self.low) & (BOT - 1)
            self.code = (self.code << 8) | self._get()
            self.low <<= 8
            self.rng <<= 8
        return 0

    def decode(self, const int64_t[::1] cdf):
        cdef Py_ssize_t a = cdf.shape[0] - 1
        cdef uint32_t v = self._freq(<uint32_t>cdf[a])
        cdef Py_ssize_t s = 0
        while cdf[s + 1] <= v:
            s += 1
        self._consume(<uint32_t>cdf[s], <uint32_t>(cdf[s + 1] - cdf[s]))
        return s

    def decode_adaptive(self, uint32_t[::1] freqs, Py_ssize_t n, uint32_t total,
                        uint32_t inc, uint32_t limit, int64_t[::1] out):
        cdef Py_ssize_t i, j, s, a = freqs.shape[0]
        cdef uint32_t v, cum
        for i in range(n):
            v = self._freq(total)
            cum = 0
            s = 0
            while cum + freqs[s] <= v:
                cum += freqs[s]
                s += 1
            self._consume(cum, freqs[s])
            out[i] = s
            freqs[s] += inc
            total += inc
            if total > limit:
                total = 0
                for j in range(a):
                    freqs[j] = (freqs[j] + 1) >> 1
                    total += freqs[j]
        return total

    def decode_tables(self, const int64_t[::1] table_idx, const int64_t[:, ::1] cdfs,
                      int64_t[::1] out):
        cdef Py_ssize_t i, s, n = table_idx.shape[0], a = cdfs.shape[1] - 1
        cdef int64_t t
        cdef uint32_t v
        for i in range(n):
            t = table_idx[i]
            v = self._freq(<uint32_t>cdfs[t, a])
            s = 0
            while cdfs[t, s + 1] <= v:
                s += 1
            self._consume(<uint32_t>cdfs[t, s], <uint32_t>(cdfs[t, s + 1] - cdfs[t, s]))
            out[i] = s

    @property
    def position(self):
        return self.pos
