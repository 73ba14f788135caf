"""Per-scale point counts and the dyadic dimension spectrum of a voxelized cloud."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .geometry import VoxelizedCloud


@dataclass(frozen=True)
class DimensionSpectrum:
    bit_depth: int
    counts: tuple  # N_0 .. N_B
    ratios: tuple  # r_1 .. r_B
    dims: tuple  # D_1 .. D_B

    def rows(self):
        """(n, N_n, r_n, D_n) for n = 1..B."""
        return [(n, self.counts[n], self.ratios[n - 1], self.dims[n - 1]) for n in range(1, self.bit_depth + 1)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "N_n", "r_n", "D_n"])
        w.writerow([0, self.counts[0], "", ""])
        for n, count, r, d in self.rows():
            w.writerow([n, count, repr(float(r)), repr(float(d))])
        return buf.getvalue()


def counts_per_scale(cloud: VoxelizedCloud) -> list[int]:
    """Number of distinct voxels after dropping ``B - n`` low bits, for n = 0..B."""
    if len(cloud) == 0:
        raise ValueError("cloud is empty")
    B = cloud.bit_depth
    vox = cloud.voxels
    counts = []
    for n in range(B + 1):
        shifted = vox >> (B - n)
        if n <= 21:
            keys = (shifted[:, 0] << 42) | (shifted[:, 1] << 21) | shifted[:, 2]
            counts.append(int(np.unique(keys).size))
        else:
            counts.append(int(np.unique(shifted, axis=0).shape[0]))
    return counts


def dimension_spectrum(counts, bit_depth: int | None = None) -> DimensionSpectrum:
    counts = [int(c) for c in counts]
    B = len(counts) - 1 if bit_depth is None else bit_depth
    if len(counts) != B + 1:
        raise ValueError("need one count per scale 0..B")
    ratios = tuple(counts[n] / counts[n - 1] for n in range(1, B + 1))
    dims = tuple(math.log2(r) for r in ratios)
    return DimensionSpectrum(B, tuple(counts), ratios, dims)
