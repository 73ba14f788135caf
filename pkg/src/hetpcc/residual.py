"""Geometric subtraction (kNN grouping + re-centering) and geometric addition."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import NeighborIndex, PointCloud


def default_k(step: float) -> int:
    """Neighbors per anchor: 10 for the two coarsest dense rate points, else 5."""
    return 10 if step in (4, 8) else 5


def default_cutoff(step: float) -> float:
    return step * math.sqrt(3.0)


@dataclass(frozen=True)
class ResidualPointSet:
    anchor_index: int
    offsets: np.ndarray  # (k, 3), divided by the step
    valid_count: int


@dataclass(frozen=True)
class Residual:
    """Offsets of shape (N, k, 3) in step-normalized units, one set per anchor."""

    offsets: np.ndarray
    valid_count: np.ndarray
    k: int
    cutoff: float
    step: float

    def __len__(self):
        return self.offsets.shape[0]

    @property
    def sets(self):
        return [
            ResidualPointSet(i, self.offsets[i], int(self.valid_count[i]))
            for i in range(len(self))
        ]


def geometric_subtract(x0: PointCloud, x1: PointCloud, k: int, cutoff: float, step: float,
                       index: NeighborIndex | None = None) -> Residual:
    """For each anchor of ``x1``: up to k neighbors in ``x0`` within ``cutoff``,
    re-centered on the anchor and divided by ``step``.

    Sets with fewer than k neighbors are padded by repeating the nearest one.
    """
    if len(x0) == 0 or len(x1) == 0:
        raise ValueError("geometric_subtract needs non-empty clouds")
    if k < 1 or cutoff <= 0:
        raise ValueError("k must be >= 1 and cutoff > 0")
    index = NeighborIndex(x0) if index is None else index
    anchors = x1.points
    idx, _, count = index.query_batch(anchors, k, radius=cutoff)
    if np.any(count == 0):
        bad = int(np.argmax(count == 0))
        raise ValueError(f"anchor {bad} has no input point within the cutoff")
    cols = np.arange(k)[None, :]
    idx = np.where(cols < count[:, None], idx, idx[:, :1])
    offsets = (index.points[idx] - anchors[:, None, :]) / step
    return Residual(offsets, count, k, float(cutoff), float(step))


def geometric_add(x1: PointCloud, offsets, step: float) -> PointCloud:
    """Anchor + step * offset for every row; result has k points per anchor, anchor-major."""
    off = offsets.offsets if isinstance(offsets, Residual) else np.asarray(offsets)
    if off.ndim != 3 or off.shape[0] != len(x1) or off.shape[2] != 3:
        raise ValueError(f"offsets of shape {off.shape} do not match {len(x1)} anchors")
    pts = x1.points[:, None, :] + step * off
    return PointCloud(pts.reshape(-1, 3))
