"""Sparse voxel tensors and the feature analysis / synthesis networks.

Convolutions run as gather -> matmul -> scatter over kernel maps computed from
packed coordinate keys. Maps are cached on :class:`Geometry` objects, so a
fixed cloud can be pushed through the networks repeatedly (training) without
recomputing neighbor lookups.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .geometry import VoxelizedCloud
from .nn.params import ParameterStore
from .nn.tensor import Tensor, add, concat, gather_rows, relu, sparse_conv_op

CUBE2 = np.array(list(product((0, 1), repeat=3)), dtype=np.int64)  # x-major, matches octant order
CUBE3 = np.array(list(product((-1, 0, 1), repeat=3)), dtype=np.int64)
POINT = np.zeros((1, 3), dtype=np.int64)


def pack(coords: np.ndarray) -> np.ndarray:
    """Order-preserving int64 key; valid for coordinates in [-1, 2^21 - 2]."""
    c = coords + 1
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


def unpack(keys: np.ndarray) -> np.ndarray:
    m = (1 << 21) - 1
    return np.stack([(keys >> 42) - 1, ((keys >> 21) & m) - 1, (keys & m) - 1], axis=1)


class Geometry:
    """Sorted unique voxel coordinates plus cached neighbor maps."""

    def __init__(self, coords, bit_depth: int | None = None, *, presorted: bool = False):
        c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if presorted:
            self.keys = pack(c)
            self.coords = c
        else:
            self.keys = np.unique(pack(c))
            self.coords = unpack(self.keys)
        self.bit_depth = bit_depth
        self._maps: dict = {}
        self._parent: Geometry | None = None

    def __len__(self):
        return len(self.keys)

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index of each coordinate, -1 where absent."""
        if len(self.keys) == 0:
            return np.full(len(coords), -1, dtype=np.int64)
        k = pack(coords)
        pos = np.searchsorted(self.keys, k)
        pos = np.minimum(pos, len(self.keys) - 1)
        return np.where(self.keys[pos] == k, pos, -1)

    def same(self, other: "Geometry") -> bool:
        return np.array_equal(self.keys, other.keys)

    def pulled(self) -> "Geometry":
        """Parent geometry: unique floor(c / 2). Cached."""
        if self._parent is None:
            depth = None if self.bit_depth is None else self.bit_depth - 1
            self._parent = Geometry(self.coords >> 1, depth)
        return self._parent

    def submanifold_map(self, offsets: np.ndarray):
        key = ("s1", offsets.tobytes())
        if key not in self._maps:
            kmap = []
            for o in offsets:
                src = self.lookup(self.coords + o)
                out_rows = np.nonzero(src >= 0)[0]
                kmap.append((src[out_rows], out_rows))
            self._maps[key] = kmap
        return self._maps[key]

    def down_map(self):
        """Stride-2 map from this geometry onto :meth:`pulled`, offsets CUBE2."""
        if "down" not in self._maps:
            parent = self.pulled()
            prow = parent.lookup(self.coords >> 1)
            octant = ((self.coords[:, 0] & 1) << 2) | ((self.coords[:, 1] & 1) << 1) | (self.coords[:, 2] & 1)
            kmap = []
            for o in range(8):
                rows = np.nonzero(octant == o)[0]
                kmap.append((rows, prow[rows]))
            self._maps["down"] = kmap
        return self._maps["down"]

    def up_map(self, target: "Geometry"):
        """Stride-2 transposed map from this geometry onto the children listed in ``target``."""
        key = ("up", id(target))
        if key not in self._maps:
            kmap = []
            for o in CUBE2:
                child_rows = target.lookup(2 * self.coords + o)
                src = np.nonzero(child_rows >= 0)[0]
                kmap.append((src, child_rows[src]))
            self._maps[key] = (target, kmap)
        return self._maps[key][1]

    def to_cloud(self) -> VoxelizedCloud:
        if self.bit_depth is None:
            raise ValueError("geometry has no bit depth")
        return VoxelizedCloud(self.coords, self.bit_depth)


@dataclass
class SparseVoxelTensor:
    geometry: Geometry
    features: Tensor

    def __post_init__(self):
        if self.features.shape[0] != len(self.geometry):
            raise ValueError(
                f"{self.features.shape[0]} feature rows for {len(self.geometry)} voxels"
            )

    @property
    def coords(self) -> np.ndarray:
        return self.geometry.coords

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return len(self.geometry)


# ------------------------------------------------------------ read / write ops

def as_geometry(geometry) -> Geometry:
    if isinstance(geometry, Geometry):
        return geometry
    if isinstance(geometry, VoxelizedCloud):
        return Geometry(geometry.voxels, geometry.bit_depth, presorted=True)
    return Geometry(geometry)


def stuffing(n: int, dtype=np.float32) -> Tensor:
    return Tensor(np.ones((n, 1), dtype=dtype))


def feature_write(geometry, features=None, dtype=np.float32) -> SparseVoxelTensor:
    """Attach features to a geometry; ``None`` writes width-1 stuffing ones.

    If ``geometry`` is a raw coordinate array, rows of ``features`` are taken
    in that array's order and re-ordered lexicographically with the coords.
    """
    if isinstance(geometry, (Geometry, VoxelizedCloud)):
        geom = as_geometry(geometry)
        perm = None
    else:
        raw = np.asarray(geometry, dtype=np.int64).reshape(-1, 3)
        keys = pack(raw)
        if len(np.unique(keys)) != len(keys):
            raise ValueError("duplicate coordinates")
        perm = np.argsort(keys, kind="stable")
        geom = Geometry(raw[perm], presorted=True)
    if features is None:
        return SparseVoxelTensor(geom, stuffing(len(geom), dtype))
    f = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
    if f.value.ndim != 2 or f.shape[0] != len(geom):
        raise ValueError(f"{f.shape[0] if f.value.ndim else 0} feature rows for {len(geom)} voxels")
    if perm is not None:
        f = gather_rows(f, perm)
    return SparseVoxelTensor(geom, f)


def feature_read(t: SparseVoxelTensor) -> Tensor:
    return t.features


def coord_read(t: SparseVoxelTensor) -> VoxelizedCloud:
    return t.geometry.to_cloud()


# ---------------------------------------------------------------- conv layers

@dataclass
class ConvSpec:
    offsets: np.ndarray
    stride: int
    c_in: int
    c_out: int
    weight: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        if self.weight.shape != (len(self.offsets), self.c_in, self.c_out):
            raise ValueError("weight shape does not match offsets and channels")

    @classmethod
    def create(cls, store: ParameterStore, name: str, offsets, stride, c_in, c_out, rng, bias=True):
        k = len(offsets)
        w = store.glorot(f"{name}.w", (k, c_in, c_out), rng, fan_in=k * c_in, fan_out=c_out)
        b = store.zeros(f"{name}.b", (c_out,)) if bias else None
        return cls(np.asarray(offsets), stride, c_in, c_out, w, b)


def _check_channels(t: SparseVoxelTensor, spec: ConvSpec):
    if t.channels != spec.c_in:
        raise ValueError(f"channel mismatch: tensor has {t.channels}, conv expects {spec.c_in}")


def sparse_conv(t: SparseVoxelTensor, spec: ConvSpec) -> SparseVoxelTensor:
    """Stride 1: output on the input coords (any offsets). Stride 2: offsets {0,1}^3 onto floor(c/2)."""
    _check_channels(t, spec)
    g = t.geometry
    if spec.stride == 1:
        kmap = g.submanifold_map(spec.offsets)
        out_geom = g
    elif spec.stride == 2:
        if not np.array_equal(spec.offsets, CUBE2):
            raise ValueError("stride-2 convolution uses offsets {0,1}^3")
        kmap = g.down_map()
        out_geom = g.pulled()
    else:
        raise ValueError("stride must be 1 or 2")
    return SparseVoxelTensor(out_geom, sparse_conv_op(t.features, spec.weight, spec.bias, kmap, len(out_geom)))


def sparse_deconv(t: SparseVoxelTensor, spec: ConvSpec, target=None) -> SparseVoxelTensor:
    """Stride-2 transposed convolution producing all 8 children of every voxel.

    With ``target`` the output is restricted to those children present in it,
    which equals ``coord_prune(sparse_deconv(t, spec), target)`` but skips
    computing discarded rows.
    """
    _check_channels(t, spec)
    if spec.stride != 2 or not np.array_equal(spec.offsets, CUBE2):
        raise ValueError("deconvolution is stride 2 with offsets {0,1}^3")
    g = t.geometry
    if target is None:
        children = (2 * g.coords[:, None, :] + CUBE2[None]).reshape(-1, 3)
        depth = None if g.bit_depth is None else g.bit_depth + 1
        out_geom = Geometry(children, depth)
    else:
        out_geom = as_geometry(target)
    kmap = g.up_map(out_geom)
    return SparseVoxelTensor(out_geom, sparse_conv_op(t.features, spec.weight, spec.bias, kmap, len(out_geom)))


def pulling(t: SparseVoxelTensor) -> SparseVoxelTensor:
    g = t.geometry.pulled()
    return SparseVoxelTensor(g, stuffing(len(g), t.features.dtype))


def coord_prune(t: SparseVoxelTensor, ref) -> SparseVoxelTensor:
    """Keep only voxels that also occur in ``ref``."""
    ref_geom = as_geometry(ref)
    keep = np.nonzero(ref_geom.lookup(t.coords) >= 0)[0]
    geom = Geometry(t.coords[keep], t.geometry.bit_depth, presorted=True)
    return SparseVoxelTensor(geom, gather_rows(t.features, keep))


def concat_stuffing(t: SparseVoxelTensor) -> SparseVoxelTensor:
    return SparseVoxelTensor(t.geometry, concat([t.features, stuffing(len(t), t.features.dtype)], axis=1))


# ---------------------------------------------------------------- networks

class IRNBlock:
    """Inception-residual block: x + [1^3 conv | 3^3 conv | 3^3 -> 3^3 conv], pre-activated."""

    def __init__(self, store: ParameterStore, name: str, channels: int, rng):
        if channels % 4:
            raise ValueError("IRN channels must be divisible by 4")
        q = channels // 4
        self.p1 = ConvSpec.create(store, f"{name}.p1", POINT, 1, channels, q, rng)
        self.p2 = ConvSpec.create(store, f"{name}.p2", CUBE3, 1, channels, q, rng)
        self.p3a = ConvSpec.create(store, f"{name}.p3a", CUBE3, 1, channels, 2 * q, rng)
        self.p3b = ConvSpec.create(store, f"{name}.p3b", CUBE3, 1, 2 * q, 2 * q, rng)

    def __call__(self, t: SparseVoxelTensor) -> SparseVoxelTensor:
        a = SparseVoxelTensor(t.geometry, relu(t.features))
        y1 = sparse_conv(a, self.p1).features
        y2 = sparse_conv(a, self.p2).features
        h = sparse_conv(a, self.p3a)
        y3 = sparse_conv(SparseVoxelTensor(t.geometry, relu(h.features)), self.p3b).features
        return SparseVoxelTensor(t.geometry, add(t.features, concat([y1, y2, y3], axis=1)))


@dataclass(frozen=True)
class FeatureNetConfig:
    """Channel plan. ``analysis_channels[i]`` is the width after Conv Down i+1;
    ``synthesis_channels[i]`` the width after Conv Up i+1 (coarsest first)."""

    hierarchies: int = 2
    in_width: int = 32
    analysis_channels: tuple = (32, 16)
    synthesis_channels: tuple = (32, 32)
    irn_per_stage: int = 2

    def __post_init__(self):
        if self.hierarchies not in (1, 2):
            raise ValueError("hierarchy count must be 1 or 2")
        if len(self.analysis_channels) != self.hierarchies or len(self.synthesis_channels) != self.hierarchies:
            raise ValueError("one channel entry per hierarchy")

    @property
    def latent_width(self) -> int:
        return self.analysis_channels[-1]

    @property
    def out_width(self) -> int:
        return self.synthesis_channels[-1]

    @classmethod
    def default(cls, hierarchies: int = 2, m: int = 32, d: int = 16) -> "FeatureNetConfig":
        if hierarchies == 1:
            return cls(1, m, (d,), (m,))
        return cls(2, m, (m, d), (m, m))


def pyramid(x1: VoxelizedCloud | Geometry, levels: int) -> list[Geometry]:
    """[X1, pull(X1), pull^2(X1), ...] sharing cached maps."""
    g = as_geometry(x1)
    out = [g]
    for _ in range(levels):
        out.append(out[-1].pulled())
    return out


class FeatureAnalysisNet:
    def __init__(self, store: ParameterStore, cfg: FeatureNetConfig, rng, prefix: str = "feature_analysis"):
        self.cfg = cfg
        self.stages = []
        c = cfg.in_width
        for i, c_out in enumerate(cfg.analysis_channels):
            down = ConvSpec.create(store, f"{prefix}.down{i}", CUBE2, 2, c, c_out, rng)
            irns = [IRNBlock(store, f"{prefix}.irn{i}_{j}", c_out, rng) for j in range(cfg.irn_per_stage)]
            self.stages.append((down, irns))
            c = c_out

    def __call__(self, x1, f1: Tensor):
        """Returns (X2 geometry, F2 tensor)."""
        t = feature_write(as_geometry(x1), f1)
        for down, irns in self.stages:
            t = sparse_conv(t, down)
            for irn in irns:
                t = irn(t)
        return t.geometry, feature_read(t)


class FeatureSynthesisNet:
    def __init__(self, store: ParameterStore, cfg: FeatureNetConfig, rng, prefix: str = "feature_synthesis"):
        self.cfg = cfg
        self.stages = []
        c = cfg.latent_width
        for i, c_out in enumerate(cfg.synthesis_channels):
            up = ConvSpec.create(store, f"{prefix}.up{i}", CUBE2, 2, c + 1, c_out, rng)
            irns = [IRNBlock(store, f"{prefix}.irn{i}_{j}", c_out, rng) for j in range(cfg.irn_per_stage)]
            self.stages.append((up, irns))
            c = c_out

    def __call__(self, x1, f2: Tensor, trace: list | None = None) -> Tensor:
        levels = pyramid(x1, self.cfg.hierarchies)
        coarse = levels[-1]
        if f2.shape[0] != len(coarse):
            raise ValueError(
                f"{f2.shape[0]} latent rows but the pulled geometry has {len(coarse)} voxels"
            )
        t = feature_write(coarse, f2)
        if trace is not None:
            trace.append(("write", t.coords.copy(), t.features.shape))
        for i, (up, irns) in enumerate(self.stages):
            target = levels[self.cfg.hierarchies - 1 - i]
            t = sparse_deconv(concat_stuffing(t), up, target=target)
            for irn in irns:
                t = irn(t)
            if trace is not None:
                trace.append((f"up{i}", t.coords.copy(), t.features.shape))
        return feature_read(t)
