"""Quantization to the coarse grid and lossless octree coding of the coarse cloud."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .coder.rangecoder import AdaptiveByteModel, Decoder, StreamExhausted, rc_encode
from .geometry import PointCloud, VoxelizedCloud, dedupe


class OctreeError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizerConfig:
    step: float
    bit_depth: int

    def __post_init__(self):
        if not self.step >= 1:
            raise ValueError("step size must be >= 1")
        if self.coarse_depth < 1:
            raise ValueError("coarse bit depth must be >= 1")

    @property
    def coarse_depth(self) -> int:
        return max(0, math.ceil(self.bit_depth - math.log2(self.step) - 1e-9))


def quantize(cloud: PointCloud, cfg: QuantizerConfig) -> VoxelizedCloud:
    """Divide by the step, round half away from zero, clamp, merge duplicates."""
    pts = cloud.points
    if pts.size and pts.min() < 0:
        raise ValueError("quantize expects non-negative coordinates")
    if pts.size and pts.max() >= (1 << cfg.bit_depth):
        raise ValueError(f"coordinates exceed the {cfg.bit_depth}-bit domain")
    q = np.floor(pts / cfg.step + 0.5).astype(np.int64)  # half away from zero for x >= 0
    np.clip(q, 0, (1 << cfg.coarse_depth) - 1, out=q)
    return dedupe(q, cfg.coarse_depth)


def dequantize(coarse: VoxelizedCloud, cfg: QuantizerConfig) -> PointCloud:
    return PointCloud(coarse.voxels.astype(np.float64) * cfg.step)


# --------------------------------------------------------------------- octree

@dataclass(frozen=True)
class OctreeCode:
    depth: int
    payload: bytes

    def to_bytes(self) -> bytes:
        return struct.pack("<BI", self.depth, len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "OctreeCode":
        if len(data) < 5:
            raise OctreeError("octree code truncated in header")
        depth, n = struct.unpack_from("<BI", data, 0)
        if len(data) < 5 + n:
            raise OctreeError(f"octree payload truncated: need {n} bytes, have {len(data) - 5}")
        return cls(depth, bytes(data[5:5 + n]))


def _pack(v: np.ndarray) -> np.ndarray:
    return (v[:, 0] << 42) | (v[:, 1] << 21) | v[:, 2]


def occupancy_symbols(cloud: VoxelizedCloud) -> np.ndarray:
    """Breadth-first occupancy bytes, nodes of each level in lexicographic order.

    Bit ``4*x + 2*y + z`` of a node's byte is set when the child with those
    low coordinate bits is occupied.
    """
    D = cloud.bit_depth
    vox = cloud.voxels
    out = []
    parents = np.zeros((1, 3), dtype=np.int64)
    for level in range(D):
        children = np.unique(_pack(vox >> (D - level - 1)))
        mask = (1 << 21) - 1
        cx, cy, cz = children >> 42, (children >> 21) & mask, children & mask
        octant = ((cx & 1) << 2) | ((cy & 1) << 1) | (cz & 1)
        pkeys = _pack(np.stack([cx >> 1, cy >> 1, cz >> 1], axis=1))
        pidx = np.searchsorted(_pack(parents), pkeys)
        sym = np.zeros(len(parents), dtype=np.int64)
        np.bitwise_or.at(sym, pidx, 1 << octant)
        out.append(sym)
        parents = np.stack([cx, cy, cz], axis=1)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


_OCTANTS = np.array([[(b >> 2) & 1, (b >> 1) & 1, b & 1] for b in range(8)], dtype=np.int64)


def _expand(parents: np.ndarray, symbols: np.ndarray) -> np.ndarray:
    bits = (symbols[:, None] >> np.arange(8)[None, :]) & 1
    pi, oi = np.nonzero(bits)
    children = 2 * parents[pi] + _OCTANTS[oi]
    order = np.argsort(_pack(children), kind="stable")
    return children[order]


def octree_encode(cloud: VoxelizedCloud) -> OctreeCode:
    if len(cloud) == 0:
        raise ValueError("cannot octree-code an empty cloud")
    if cloud.bit_depth > 21:
        raise ValueError("octree depth above 21 is not supported")
    syms = occupancy_symbols(cloud)
    return OctreeCode(cloud.bit_depth, rc_encode(syms, AdaptiveByteModel()))


def octree_decode(code: OctreeCode) -> VoxelizedCloud:
    if not 1 <= code.depth <= 21:
        raise OctreeError(f"invalid octree depth {code.depth}")
    dec = Decoder(code.payload) if len(code.payload) >= 4 else None
    if dec is None:
        raise OctreeError("octree payload exhausted")
    model = AdaptiveByteModel()
    nodes = np.zeros((1, 3), dtype=np.int64)
    for level in range(code.depth):
        try:
            syms = dec.decode(model, len(nodes))
        except StreamExhausted:
            raise OctreeError(f"octree payload exhausted at level {level}") from None
        if np.any(syms == 0):
            raise OctreeError(f"empty occupancy symbol at level {level}")
        nodes = _expand(nodes, syms)
    return VoxelizedCloud(nodes, code.depth)
