"""Named parameters, Glorot-uniform init, Adam, and the binary checkpoint format."""

from __future__ import annotations

import json
import struct

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = b"HPCCKPT\0"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class AdamState:
    __slots__ = ("m", "v", "step")

    def __init__(self, shape, dtype):
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.step = 0


class ParameterStore:
    """Ordered name -> Tensor mapping with per-parameter Adam moments."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self._adam: dict[str, AdamState] = {}

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def glorot(self, name: str, shape, rng: np.random.Generator, fan_in=None, fan_out=None) -> Tensor:
        fan_in = shape[-2] if fan_in is None else fan_in
        fan_out = shape[-1] if fan_out is None else fan_out
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, rng.uniform(-lim, lim, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def count(self) -> int:
        return int(sum(t.value.size for t in self._params.values()))

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict:
        return {k: t.value.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict) -> None:
        if set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise CheckpointError(f"parameter names differ (missing {sorted(missing)}, unexpected {sorted(extra)})")
        for k, t in self._params.items():
            v = np.asarray(state[k])
            if v.shape != t.shape:
                raise CheckpointError(f"shape mismatch for {k!r}: {v.shape} vs {t.shape}")
            t.value = v.astype(self.dtype, copy=True)

    def astype(self, dtype) -> "ParameterStore":
        """Copy with every parameter converted (Adam state is not copied)."""
        out = ParameterStore(dtype)
        for k, t in self._params.items():
            out.add(k, t.value)
        return out

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                  only=None) -> None:
        """One bias-corrected Adam update; clears gradients afterwards.

        ``only`` restricts the update to the named parameters; the rest stay frozen.
        """
        names = list(self._params) if only is None else list(only)
        for k in names:
            if self._params[k].grad is None:
                raise ValueError(f"missing gradient for parameter {k!r}")
        for k in names:
            t = self._params[k]
            st = self._adam.get(k)
            if st is None:
                st = self._adam[k] = AdamState(t.shape, self.dtype)
            g = np.asarray(t.grad, dtype=self.dtype)
            st.step += 1
            st.m = beta1 * st.m + (1 - beta1) * g
            st.v = beta2 * st.v + (1 - beta2) * g * g
            mhat = st.m / (1 - beta1 ** st.step)
            vhat = st.v / (1 - beta2 ** st.step)
            t.value = (t.value - lr * mhat / (np.sqrt(vhat) + eps)).astype(self.dtype)
            t.grad = None


# ----------------------------------------------------------------- checkpoints

def dump_checkpoint(store: ParameterStore, config: dict) -> bytes:
    """magic | u32 version | u32 len + JSON config | u32 count | per param:
    u16 name len, name, u8 dtype code, u8 ndim, u32 dims..., raw little-endian values."""
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", CHECKPOINT_VERSION)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg
    out += struct.pack("<I", len(store))
    for name, t in store:
        nb = name.encode("utf-8")
        code = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}[t.dtype]
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", code, t.value.ndim)
        out += struct.pack(f"<{t.value.ndim}I", *t.shape)
        out += t.value.astype(t.dtype.newbyteorder("<"), copy=False).tobytes()
    return bytes(out)


def parse_checkpoint(data: bytes):
    """Returns (config, {name: array}) in file order."""
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"checkpoint truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", take(4))
    try:
        config = json.loads(take(clen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint config: {e}") from None
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in (0, 1):
            raise CheckpointError(f"unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = np.dtype("<f4" if code == 0 else "<f8")
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        params[name] = np.frombuffer(take(size), dtype=dt).reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return config, params
