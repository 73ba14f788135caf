"""End-to-end encoder/decoder, the codec model, and the ``.grsp`` container.

Container layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"GRSP"
    4       1     version (1)
    5       1     input bit depth B
    6       8     step size s (float64)
    14      1     hierarchy count h
    15      2     k (points per anchor)
    17      2     m (point feature width)
    19      2     d (latent width)
    21      1     flags (bit 0: skip_encoded)
    22      4     N, input point count (reporting only)
    26      8*d   per-channel latent min, max (int32 pairs); present iff not skipped
    ..      4     base section length L_b
    ..      L_b   base section: u8 octree depth, u32 payload length, payload
    ..      4     enhancement length L_e; present iff not skipped
    ..      L_e   enhancement payload
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .base import OctreeCode, OctreeError, QuantizerConfig, dequantize, octree_decode, octree_encode, quantize
from .coder.prior import FactorizedPrior, prior_bits, prior_cdf_table, round_half_away
from .coder.rangecoder import Decoder, StaticTables, StreamExhausted, rc_encode
from .geometry import PointCloud, VoxelizedCloud
from .nn.params import CheckpointError, ParameterStore, dump_checkpoint, parse_checkpoint
from .nn.tensor import Tensor
from .pointnets import PointAnalysisConfig, PointAnalysisNet, PointSynthesisConfig, PointSynthesisNet
from .residual import default_cutoff, geometric_add, geometric_subtract
from .sparse import FeatureAnalysisNet, FeatureNetConfig, FeatureSynthesisNet, pyramid

MAGIC = b"GRSP"
VERSION = 1
FLAG_SKIP = 1


class ContainerError(ValueError):
    """Malformed or truncated container bytes."""


class ModeError(ValueError):
    """Requested decode mode is incompatible with the container."""


class ModelMismatch(ValueError):
    """Model widths or operating point disagree with the container or request."""


# ------------------------------------------------------------------ container

@dataclass
class BitstreamContainer:
    bit_depth: int
    step: float
    hierarchies: int
    k: int
    m: int
    d: int
    skip_encoded: bool
    n_input: int
    base_bytes: bytes
    enh_bytes: bytes | None = None
    ch_min: tuple = ()
    ch_max: tuple = ()

    def __post_init__(self):
        if self.skip_encoded != (self.enh_bytes is None):
            raise ContainerError("enhancement bytes must be absent exactly when skip_encoded is set")
        if not self.skip_encoded and (len(self.ch_min) != self.d or len(self.ch_max) != self.d):
            raise ContainerError("need one latent min/max pair per channel")

    def strip_enhancement(self) -> "BitstreamContainer":
        """Drop B_enh and set the skip flag, as a receiver would after losing the packet."""
        return replace(self, skip_encoded=True, enh_bytes=None, ch_min=(), ch_max=())


_HEAD = struct.Struct("<4sBBdBHHHBI")


def serialize(c: BitstreamContainer) -> bytes:
    out = bytearray(
        _HEAD.pack(MAGIC, VERSION, c.bit_depth, float(c.step), c.hierarchies, c.k, c.m, c.d,
                   FLAG_SKIP if c.skip_encoded else 0, c.n_input)
    )
    if not c.skip_encoded:
        for lo, hi in zip(c.ch_min, c.ch_max):
            out += struct.pack("<ii", lo, hi)
    out += struct.pack("<I", len(c.base_bytes)) + c.base_bytes
    if not c.skip_encoded:
        out += struct.pack("<I", len(c.enh_bytes)) + c.enh_bytes
    return bytes(out)


def deserialize(data: bytes) -> BitstreamContainer:
    if len(data) < 4 or data[:4] != MAGIC:
        raise ContainerError("bad magic: not a GRSP container")
    if len(data) < _HEAD.size:
        raise ContainerError("container truncated in header")
    _, version, B, s, h, k, m, d, flags, n = _HEAD.unpack_from(data, 0)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = _HEAD.size
    skip = bool(flags & FLAG_SKIP)

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(data):
            raise ContainerError(f"container truncated in {what}")
        chunk = data[pos:pos + nbytes]
        pos += nbytes
        return chunk

    ch_min, ch_max = [], []
    if not skip:
        for _ in range(d):
            lo, hi = struct.unpack("<ii", take(8, "latent ranges"))
            ch_min.append(lo)
            ch_max.append(hi)
    (lb,) = struct.unpack("<I", take(4, "base length"))
    base = bytes(take(lb, "base section"))
    enh = None
    if not skip:
        (le,) = struct.unpack("<I", take(4, "enhancement length"))
        enh = bytes(take(le, "enhancement section"))
    if pos != len(data):
        raise ContainerError("trailing bytes after container")
    return BitstreamContainer(B, s, h, k, m, d, skip, n, base, enh, tuple(ch_min), tuple(ch_max))


# ---------------------------------------------------------------------- model

@dataclass
class CodecModel:
    """All trainable parts plus the operating point they were trained for."""

    store: ParameterStore
    config: dict
    point_analysis: PointAnalysisNet
    point_synthesis: PointSynthesisNet
    feature_analysis: FeatureAnalysisNet
    feature_synthesis: FeatureSynthesisNet
    prior: FactorizedPrior

    @classmethod
    def create(cls, k: int, hierarchies: int = 2, m: int = 32, d: int = 16, step: float | None = None,
               seed: int = 0, dtype=np.float32, pa_hidden=(32, 64), ps_hidden=(128, 128),
               skip_trained: bool = False) -> "CodecModel":
        config = {
            "k": int(k), "hierarchies": int(hierarchies), "m": int(m), "d": int(d),
            "step": None if step is None else float(step), "seed": int(seed),
            "pa_hidden": list(pa_hidden), "ps_hidden": list(ps_hidden),
            "skip_trained": bool(skip_trained),
        }
        return cls.from_config(config, dtype)

    @classmethod
    def from_config(cls, config: dict, dtype=np.float32) -> "CodecModel":
        rng = np.random.default_rng(config.get("seed", 0))
        store = ParameterStore(dtype)
        m, d, k, h = config["m"], config["d"], config["k"], config["hierarchies"]
        pa = PointAnalysisNet(store, PointAnalysisConfig((3, *config["pa_hidden"], m)), rng)
        fcfg = FeatureNetConfig.default(h, m, d)
        fa = FeatureAnalysisNet(store, fcfg, rng)
        fs = FeatureSynthesisNet(store, fcfg, rng)
        ps = PointSynthesisNet(store, PointSynthesisConfig((fcfg.out_width, *config["ps_hidden"], 3 * k)), rng)
        prior = FactorizedPrior.create(store, d)
        return cls(store, dict(config), pa, ps, fa, fs, prior)

    @property
    def k(self) -> int:
        return self.config["k"]

    @property
    def hierarchies(self) -> int:
        return self.config["hierarchies"]

    @property
    def m(self) -> int:
        return self.config["m"]

    @property
    def d(self) -> int:
        return self.config["d"]

    @property
    def step(self):
        return self.config.get("step")

    def to_bytes(self) -> bytes:
        return dump_checkpoint(self.store, self.config)

    @classmethod
    def from_bytes(cls, data: bytes, expect: dict | None = None) -> "CodecModel":
        config, params = parse_checkpoint(data)
        if expect:
            for key, val in expect.items():
                if config.get(key) != val:
                    raise CheckpointError(f"checkpoint {key}={config.get(key)!r} but {val!r} was expected")
        dtypes = {a.dtype for a in params.values()}
        dtype = dtypes.pop() if len(dtypes) == 1 else np.float32
        model = cls.from_config(config, dtype)
        model.store.load_state_dict(params)
        return model

    def astype(self, dtype) -> "CodecModel":
        out = CodecModel.from_config(self.config, dtype)
        out.store.load_state_dict(self.store.state_dict())
        return out

    # forward pieces shared by the codec and training
    def analyze(self, x1: VoxelizedCloud, offsets) -> tuple:
        """Residual offsets (N, k, 3) -> (X2 geometry, F2 tensor)."""
        f1 = self.point_analysis(offsets)
        return self.feature_analysis(x1, f1)

    def synthesize(self, x1: VoxelizedCloud, f2: Tensor, trace: list | None = None) -> Tensor:
        """Latents on the pulled geometry -> (N, k, 3) offsets in step units."""
        f1p = self.feature_synthesis(x1, f2, trace)
        if trace is not None:
            trace.append(("point_synthesis", None, f1p.shape))
        return self.point_synthesis(f1p)

    def skip_features(self, x1: VoxelizedCloud) -> Tensor:
        n = len(pyramid(x1, self.hierarchies)[-1])
        return Tensor(np.ones((n, self.d), dtype=self.store.dtype))


# ------------------------------------------------------------------- encoding

@dataclass(frozen=True)
class EncodeConfig:
    step: float
    k: int
    hierarchies: int = 2
    skip: bool = False
    cutoff: float | None = None
    bit_depth: int | None = None


def infer_bit_depth(cloud: PointCloud) -> int:
    top = float(cloud.points.max()) if len(cloud) else 0.0
    return max(1, int(math.floor(top)).bit_length())


def _check_model(model: CodecModel, k: int, h: int, step: float):
    if model.k != k or model.hierarchies != h:
        raise ModelMismatch(
            f"model has k={model.k}, h={model.hierarchies}; operating point needs k={k}, h={h}"
        )
    if model.step is not None and not math.isclose(model.step, step, rel_tol=1e-9):
        raise ModelMismatch(f"model was trained for step {model.step}, not {step}")


@dataclass
class EncodeResult:
    container: BitstreamContainer
    coarse: VoxelizedCloud
    latents: np.ndarray | None = None  # rounded F2, (N', d)
    estimated_bits: float | None = None


def latent_tables(prior: FactorizedPrior, ch_min, ch_max) -> list:
    return [prior_cdf_table(prior, c, (lo, hi)) for c, (lo, hi) in enumerate(zip(ch_min, ch_max))]


def encode_detailed(x0: PointCloud, model: CodecModel | None, cfg: EncodeConfig) -> EncodeResult:
    if len(x0) == 0:
        raise ValueError("cannot encode an empty point cloud")
    B = cfg.bit_depth or infer_bit_depth(x0)
    qcfg = QuantizerConfig(cfg.step, B)
    coarse = quantize(x0, qcfg)
    base = octree_encode(coarse).to_bytes()
    m = model.m if model is not None else 0
    d = model.d if model is not None else 0
    if cfg.skip:
        c = BitstreamContainer(B, cfg.step, cfg.hierarchies, cfg.k, m, d, True, len(x0), base)
        return EncodeResult(c, coarse)
    if model is None:
        raise ModelMismatch("full encoding needs a model")
    _check_model(model, cfg.k, cfg.hierarchies, cfg.step)
    x1 = dequantize(coarse, qcfg)
    cutoff = cfg.cutoff or default_cutoff(cfg.step)
    residual = geometric_subtract(x0, x1, cfg.k, cutoff, cfg.step)
    _, f2 = model.analyze(coarse, residual.offsets.astype(model.store.dtype))
    q = round_half_away(f2.value).astype(np.int64)
    ch_min = tuple(int(v) for v in q.min(axis=0))
    ch_max = tuple(int(v) for v in q.max(axis=0))
    tables = latent_tables(model.prior, ch_min, ch_max)
    symbols = (q - np.asarray(ch_min)).T.reshape(-1)  # channel-major
    table_idx = np.repeat(np.arange(model.d), q.shape[0])
    enh = rc_encode(symbols, StaticTables(tables, table_idx))
    c = BitstreamContainer(B, cfg.step, cfg.hierarchies, cfg.k, model.m, model.d, False, len(x0), base,
                           enh, ch_min, ch_max)
    return EncodeResult(c, coarse, q, prior_bits(q, model.prior))


def encode(x0: PointCloud, model: CodecModel | None, cfg: EncodeConfig) -> BitstreamContainer:
    return encode_detailed(x0, model, cfg).container


# ------------------------------------------------------------------- decoding

def decode_coarse(container: BitstreamContainer) -> VoxelizedCloud:
    try:
        return octree_decode(OctreeCode.from_bytes(container.base_bytes))
    except OctreeError as e:
        raise ContainerError(f"corrupt base layer: {e}") from None


def decode_latents(container: BitstreamContainer, model: CodecModel, n_rows: int) -> np.ndarray:
    tables = latent_tables(model.prior, container.ch_min, container.ch_max)
    table_idx = np.repeat(np.arange(container.d), n_rows)
    try:
        sym = Decoder(container.enh_bytes).decode(StaticTables(tables, table_idx), n_rows * container.d)
    except StreamExhausted:
        raise ContainerError("enhancement stream exhausted") from None
    return sym.reshape(container.d, n_rows).T + np.asarray(container.ch_min, dtype=np.int64)


def decode(container: BitstreamContainer, model: CodecModel | None, mode: str = "full",
           trace: list | None = None) -> PointCloud:
    """Reconstruct a cloud. ``mode`` is ``full``, ``skip`` or ``base_only``."""
    if mode not in ("full", "skip", "base_only"):
        raise ValueError(f"unknown decode mode {mode!r}")
    coarse = decode_coarse(container)
    qcfg = QuantizerConfig(container.step, container.bit_depth)
    x1 = dequantize(coarse, qcfg)
    if mode == "base_only":
        return x1
    if model is None:
        raise ModelMismatch(f"{mode} decoding needs a model")
    _check_model(model, container.k, container.hierarchies, container.step)
    if mode == "full":
        if container.skip_encoded:
            raise ModeError("full decoding requested but the container has no enhancement stream")
        if model.d != container.d or model.m != container.m:
            raise ModelMismatch(f"model widths m={model.m}, d={model.d} differ from container m={container.m}, d={container.d}")
        n_rows = len(pyramid(coarse, container.hierarchies)[-1])
        f2 = Tensor(decode_latents(container, model, n_rows).astype(model.store.dtype))
    else:
        f2 = model.skip_features(coarse)
    offsets = model.synthesize(coarse, f2, trace)
    return geometric_add(x1, offsets.value.astype(np.float64), container.step)
