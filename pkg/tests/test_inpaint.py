import numpy as np
import pytest

from svrkit.errors import AllHolesError
from svrkit.grid import Volume
from svrkit.inpaint import fill_holes


def sphere_mask(n, center, radius):
    x, y, z = np.meshgrid(*(np.arange(n, dtype=float),) * 3, indexing="ij")
    return ((x - center[0]) ** 2 + (y - center[1]) ** 2
            + (z - center[2]) ** 2) <= radius ** 2


def test_no_holes_is_identity():
    rng = np.random.default_rng(0)
    vol = Volume(rng.uniform(size=(8, 8, 8)))
    out = fill_holes(vol, np.zeros((8, 8, 8), dtype=bool))
    assert np.array_equal(out.data, vol.data)


def test_constant_volume_fill():
    vol = Volume(np.full((10, 10, 10), 4.5))
    holes = sphere_mask(10, (5, 5, 5), 3)
    out = fill_holes(vol, holes)
    assert np.max(np.abs(out.data - 4.5)) < 1e-6


def test_linear_ramp_spherical_hole():
    n = 16
    ramp = np.arange(n, dtype=float)[:, None, None] * np.ones((1, n, n))
    holes = sphere_mask(n, (7.3, 8.1, 7.7), 3)
    out = fill_holes(Volume(ramp), holes)
    err = out.data[holes] - ramp[holes]
    rng_span = ramp.max() - ramp.min()
    assert np.sqrt(np.mean(err**2)) < 0.05 * rng_span
    # observed voxels untouched, bit-exact
    assert np.array_equal(out.data[~holes], ramp[~holes])


def test_filled_values_within_observed_range():
    rng = np.random.default_rng(1)
    vol = Volume(rng.uniform(2.0, 3.0, size=(12, 12, 12)))
    holes = rng.uniform(size=(12, 12, 12)) < 0.4
    holes[0, 0, 0] = False  # keep at least one observation
    out = fill_holes(vol, holes, passes=3)
    lo, hi = vol.data[~holes].min(), vol.data[~holes].max()
    assert out.data.min() >= lo
    assert out.data.max() <= hi


def test_most_voxels_missing_still_fills():
    rng = np.random.default_rng(2)
    vol = Volume(np.full((9, 9, 9), 7.0))
    holes = np.ones((9, 9, 9), dtype=bool)
    holes[::4, ::4, ::4] = False
    out = fill_holes(vol, holes)
    assert np.max(np.abs(out.data - 7.0)) < 1e-9


def test_all_holes_raises():
    vol = Volume(np.zeros((4, 4, 4)))
    with pytest.raises(AllHolesError):
        fill_holes(vol, np.ones((4, 4, 4), dtype=bool))


def test_bad_args():
    vol = Volume(np.zeros((4, 4, 4)))
    with pytest.raises(ValueError):
        fill_holes(vol, np.zeros((4, 4, 4), dtype=bool), passes=0)
    with pytest.raises(ValueError):
        fill_holes(vol, np.zeros((3, 4, 4), dtype=bool))
