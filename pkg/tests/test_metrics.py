import math

import numpy as np
import pytest
from scipy.integrate import quad

from hetpcc.geometry import PointCloud
from hetpcc.metrics import (
    BDError,
    RDCurve,
    RDPoint,
    bd_psnr,
    bd_rate,
    bpp,
    chamfer_augmented,
    d1_mse,
    d1_psnr,
    d2_mse,
    d2_psnr,
    estimate_normals,
    peak_for_bit_depth,
    psnr_from_mse,
)


def brute_d(a, b):
    return np.sqrt(((a[:, None, :] - b[None]) ** 2).sum(-1))


def test_chamfer_examples(rng):
    x = PointCloud(rng.normal(size=(50, 3)))
    assert chamfer_augmented(x, x) == 0.0
    assert chamfer_augmented([[0, 0, 0]], [[1, 0, 0]]) == 1.0
    y = PointCloud(rng.normal(size=(80, 3)))
    assert chamfer_augmented(x, y) == chamfer_augmented(y, x)
    d = brute_d(x.points, y.points)
    assert chamfer_augmented(x, y) == pytest.approx(max(d.min(1).mean(), d.min(0).mean()), abs=1e-12)
    with pytest.raises(ValueError):
        chamfer_augmented(np.zeros((0, 3)), x)


def test_d1_d2_examples():
    ref, rec = [[0, 0, 0]], [[1, 0, 0]]
    assert d1_mse(ref, rec) == 1.0
    assert d2_mse(ref, rec, [[0, 0, 1]]) == 0.0
    assert d1_psnr(ref, ref, 511) == math.inf
    assert d2_psnr(ref, rec, [[0, 0, 1]], 511) == math.inf
    assert psnr_from_mse(1.0, 1.0) == pytest.approx(10 * math.log10(3))
    assert peak_for_bit_depth(10) == 1023.0


def test_d1_d2_brute_force(rng):
    a = rng.uniform(0, 10, size=(200, 3))
    b = a + rng.normal(scale=0.3, size=a.shape)
    n = rng.normal(size=(200, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    d = brute_d(a, b)
    iab, iba = d.argmin(1), d.argmin(0)
    e1 = max((d.min(1) ** 2).mean(), (d.min(0) ** 2).mean())
    e2 = max(
        (np.einsum("ij,ij->i", b[iab] - a, n) ** 2).mean(),
        (np.einsum("ij,ij->i", b - a[iba], n[iba]) ** 2).mean(),
    )
    assert abs(d1_mse(a, b) - e1) < 1e-9
    assert abs(d2_mse(a, b, n) - e2) < 1e-9
    assert d2_mse(a, b, n) <= d1_mse(a, b)
    assert d1_psnr(a, b, 1023) == pytest.approx(10 * math.log10(3 * 1023 ** 2 / e1), abs=1e-9)


def test_normals_on_planes(rng):
    xy = rng.uniform(0, 10, size=(300, 2))
    z0 = np.column_stack([xy, np.zeros(300)])
    assert np.allclose(estimate_normals(z0), [0, 0, 1])
    x0 = np.column_stack([np.zeros(300), xy])
    assert np.allclose(estimate_normals(x0), [1, 0, 0])
    with pytest.raises(ValueError):
        estimate_normals(z0[:12])


def test_normals_on_sphere(rng):
    v = rng.normal(size=(10_000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    n = estimate_normals(v * 50)
    cos = np.abs(np.sum(n * v, axis=1))
    assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() < 5


def test_bpp():
    assert bpp(bytes(125), 1000) == 1.0
    with pytest.raises(ValueError):
        bpp(b"", 0)


def curve(rates, psnrs):
    return RDCurve.from_arrays(rates, psnrs)


def test_bd_identity_and_offset():
    ref = curve([0.1, 0.2, 0.4, 0.8], [30, 34, 37, 39])
    assert bd_rate(ref, ref) == pytest.approx(0.0, abs=1e-9)
    assert bd_psnr(ref, ref) == pytest.approx(0.0, abs=1e-9)
    test = curve([0.09, 0.18, 0.36, 0.72], [30, 34, 37, 39])
    assert bd_rate(ref, test) == pytest.approx(-10.0, abs=1e-9)


def test_bd_matches_quadrature():
    r1 = np.array([0.12, 0.25, 0.5, 1.1])
    q1 = np.array([31.0, 35.2, 38.1, 40.3])
    r2 = np.array([0.1, 0.21, 0.46, 0.9])
    q2 = np.array([31.5, 35.0, 38.6, 40.9])
    f1 = np.poly1d(np.polyfit(q1, np.log10(r1), 3))
    f2 = np.poly1d(np.polyfit(q2, np.log10(r2), 3))
    lo, hi = max(q1.min(), q2.min()), min(q1.max(), q2.max())
    area, _ = quad(lambda q: f2(q) - f1(q), lo, hi, epsabs=0, epsrel=1e-12)
    oracle = 100 * (10 ** (area / (hi - lo)) - 1)
    got = bd_rate((r1, q1), (r2, q2))
    assert abs(got - oracle) <= 1e-3 * abs(oracle)
    g1 = np.poly1d(np.polyfit(np.log10(r1), q1, 3))
    g2 = np.poly1d(np.polyfit(np.log10(r2), q2, 3))
    lo, hi = np.log10(max(r1.min(), r2.min())), np.log10(min(r1.max(), r2.max()))
    area, _ = quad(lambda x: g2(x) - g1(x), lo, hi, epsabs=0, epsrel=1e-12)
    assert bd_psnr((r1, q1), (r2, q2)) == pytest.approx(area / (hi - lo), rel=1e-3)


def test_bd_antisymmetry():
    a = curve([0.1, 0.2, 0.4, 0.8], [30, 33.8, 37.1, 39.5])
    b = curve([0.08, 0.17, 0.35, 0.7], [30.2, 34, 37, 39.8])
    ab, ba = bd_rate(a, b), bd_rate(b, a)
    assert abs(ab - (-ba / (1 + ba / 100))) < 0.5


def test_bd_errors():
    with pytest.raises(BDError):
        bd_rate(curve([0.1, 0.2, 0.4], [30, 33, 36]), curve([0.1, 0.2, 0.4], [30, 33, 36]))
    a = curve([0.1, 0.2, 0.4, 0.8], [20, 21, 22, 23])
    b = curve([0.1, 0.2, 0.4, 0.8], [30, 31, 32, 33])
    with pytest.raises(BDError):
        bd_rate(a, b)
    with pytest.raises(ValueError):
        RDPoint(0.0, 30.0)
    assert curve([0.4, 0.1], [2, 1]).rates().tolist() == [0.1, 0.4]
