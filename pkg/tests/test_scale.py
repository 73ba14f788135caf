import math

import numpy as np
import pytest

from hetpcc.geometry import VoxelizedCloud, dedupe
from hetpcc.scale import counts_per_scale, dimension_spectrum


def test_full_plane_counts():
    g = np.stack(np.meshgrid(np.arange(16), np.arange(16), indexing="ij"), -1).reshape(-1, 2)
    cloud = dedupe(np.column_stack([g, np.zeros(len(g), int)]), 4)
    assert counts_per_scale(cloud) == [4 ** n for n in range(5)]
    spec = dimension_spectrum(counts_per_scale(cloud))
    assert spec.dims == (2.0, 2.0, 2.0, 2.0)


def test_single_voxel():
    cloud = VoxelizedCloud([[13, 2, 60]], 6)
    assert counts_per_scale(cloud) == [1] * 7
    assert set(dimension_spectrum(counts_per_scale(cloud)).dims) == {0.0}


def test_line_has_dimension_one():
    B = 7
    cloud = dedupe(np.column_stack([np.arange(1 << B), np.zeros((1 << B, 2), int)]), B)
    assert all(d == 1.0 for d in dimension_spectrum(counts_per_scale(cloud)).dims)


def test_random_cloud_against_set_oracle(rng):
    vox = rng.integers(0, 1024, size=(500, 3))
    cloud = dedupe(vox, 10)
    counts = counts_per_scale(cloud)
    for n in (1, 5, 10):
        assert counts[n] == len({tuple(c >> (10 - n) for c in v) for v in vox.tolist()})
    assert counts[1] <= 8
    assert counts[0] == 1


def test_csv_shape():
    spec = dimension_spectrum([1, 4, 16])
    lines = spec.to_csv().splitlines()
    assert lines[0] == "n,N_n,r_n,D_n"
    assert lines[1] == "0,1,,"
    assert lines[2].startswith("1,4,4.0,2.0")
    assert spec.rows()[1] == (2, 16, 4.0, 2.0)


def test_bad_input():
    with pytest.raises(ValueError):
        counts_per_scale(VoxelizedCloud(np.zeros((0, 3)), 3))
    with pytest.raises(ValueError):
        dimension_spectrum([1, 2], bit_depth=3)
    assert math.isclose(dimension_spectrum([1, 8]).dims[0], 3.0)
