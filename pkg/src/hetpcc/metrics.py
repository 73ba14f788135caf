"""Geometry distortion and rate metrics: augmented Chamfer, D1/D2 PSNR, bpp, Bjontegaard deltas."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud


def _pts(x) -> np.ndarray:
    p = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError("metric needs non-empty point clouds")
    return p


def nearest(src: np.ndarray, dst: np.ndarray):
    """For each row of ``src``: (distance, index) of its nearest row in ``dst``."""
    d, i = cKDTree(dst).query(src, k=1)
    return d, i


def chamfer_augmented(x, y) -> float:
    """max(mean_x min_y |x - y|, mean_y min_x |x - y|), unsquared Euclidean."""
    a, b = _pts(x), _pts(y)
    dab, _ = nearest(a, b)
    dba, _ = nearest(b, a)
    return float(max(dab.mean(), dba.mean()))


def psnr_from_mse(mse: float, peak: float) -> float:
    if mse <= 0:
        return math.inf
    return 10.0 * math.log10(3.0 * peak * peak / mse)


def d1_mse(ref, rec) -> float:
    a, b = _pts(ref), _pts(rec)
    d_ab, _ = nearest(a, b)
    d_ba, _ = nearest(b, a)
    return float(max(np.mean(d_ab ** 2), np.mean(d_ba ** 2)))


def d2_mse(ref, rec, normals) -> float:
    """Point-to-plane MSE; every error vector is projected on the reference point's normal."""
    a, b = _pts(ref), _pts(rec)
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if len(n) != len(a):
        raise ValueError("need one normal per reference point")
    _, i_ab = nearest(a, b)
    e_ab = np.einsum("ij,ij->i", b[i_ab] - a, n)
    _, i_ba = nearest(b, a)
    e_ba = np.einsum("ij,ij->i", b - a[i_ba], n[i_ba])
    return float(max(np.mean(e_ab ** 2), np.mean(e_ba ** 2)))


def d1_psnr(ref, rec, peak: float) -> float:
    return psnr_from_mse(d1_mse(ref, rec), peak)


def d2_psnr(ref, rec, normals, peak: float) -> float:
    return psnr_from_mse(d2_mse(ref, rec, normals), peak)


def peak_for_bit_depth(bit_depth: int) -> float:
    return float((1 << bit_depth) - 1)


def estimate_normals(cloud, k: int = 12) -> np.ndarray:
    """Smallest-eigenvector normals of k-neighborhood covariances.

    Signs point to +z (then +y, then +x when the earlier component is zero).
    Neighborhoods without a unique normal direction yield (0, 0, 1).
    """
    p = _pts(cloud)
    if len(p) <= k:
        raise ValueError(f"need more than k={k} points")
    _, idx = cKDTree(p).query(p, k=k)
    nb = p[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = (evals[:, 2] <= 1e-18) | (evals[:, 1] <= 1e-9 * scale)
    normals[degenerate] = (0.0, 0.0, 1.0)
    tol = 1e-12
    lead = np.where(np.abs(normals[:, 2]) > tol, normals[:, 2],
                    np.where(np.abs(normals[:, 1]) > tol, normals[:, 1], normals[:, 0]))
    normals *= np.where(lead < 0, -1.0, 1.0)[:, None]
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def bpp(container_or_bytes, n_input: int) -> float:
    """Bits per input point of a serialized container."""
    if n_input <= 0:
        raise ValueError("input point count must be positive")
    if isinstance(container_or_bytes, (bytes, bytearray)):
        size = len(container_or_bytes)
    else:
        from .codec import serialize

        size = len(serialize(container_or_bytes))
    return 8.0 * size / n_input


# ------------------------------------------------------------------ Bjontegaard

@dataclass(frozen=True)
class RDPoint:
    bpp: float
    d1_psnr: float
    d2_psnr: float = float("nan")

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError("bpp must be positive")


@dataclass(frozen=True)
class RDCurve:
    points: tuple

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(sorted(self.points, key=lambda p: p.bpp)))

    @classmethod
    def from_arrays(cls, rates, psnrs, d2=None) -> "RDCurve":
        d2 = [float("nan")] * len(rates) if d2 is None else d2
        return cls(tuple(RDPoint(float(r), float(q), float(e)) for r, q, e in zip(rates, psnrs, d2)))

    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    def psnrs(self, metric: str = "d1") -> np.ndarray:
        return np.array([p.d1_psnr if metric == "d1" else p.d2_psnr for p in self.points])


class BDError(ValueError):
    pass


def _arrays(curve, metric):
    if isinstance(curve, RDCurve):
        return curve.rates(), curve.psnrs(metric)
    r, q = curve
    return np.asarray(r, dtype=np.float64), np.asarray(q, dtype=np.float64)


def _poly_mean(x1, y1, x2, y2):
    """Mean of (fit2 - fit1) over the overlap of the x ranges; cubic fits of y on x."""
    if len(x1) < 4 or len(x2) < 4:
        raise BDError("Bjontegaard deltas need at least 4 points per curve")
    lo = max(x1.min(), x2.min())
    hi = min(x1.max(), x2.max())
    if not hi > lo:
        raise BDError("curves do not overlap")
    p1 = np.polyfit(x1, y1, 3)
    p2 = np.polyfit(x2, y2, 3)
    i1 = np.polyint(p1)
    i2 = np.polyint(p2)
    area1 = np.polyval(i1, hi) - np.polyval(i1, lo)
    area2 = np.polyval(i2, hi) - np.polyval(i2, lo)
    return (area2 - area1) / (hi - lo)


def bd_rate(ref, test, metric: str = "d1") -> float:
    """Average bitrate change of ``test`` vs ``ref`` at equal quality, in percent."""
    r1, q1 = _arrays(ref, metric)
    r2, q2 = _arrays(test, metric)
    delta = _poly_mean(q1, np.log10(r1), q2, np.log10(r2))
    return float(100.0 * (10.0 ** delta - 1.0))


def bd_psnr(ref, test, metric: str = "d1") -> float:
    """Average quality change of ``test`` vs ``ref`` at equal rate, in dB."""
    r1, q1 = _arrays(ref, metric)
    r2, q2 = _arrays(test, metric)
    return float(_poly_mean(np.log10(r1), q1, np.log10(r2), q2))
