"""Hole filling for normalized splat reconstructions.

Uses a multi-scale normalized convolution: the (value, weight) pair is
block-averaged down until every voxel of the coarsest level is observed,
then estimates are upsampled trilinearly and composited into hole voxels
only. Non-hole voxels pass through bit-identical, and filled values are
clamped to the observed intensity range (they are convex combinations of
observed values up to rounding).
"""

from __future__ import annotations

import numpy as np

from .errors import AllHolesError
from .grid import Volume, block_mean2


def _upsample_trilinear(arr: np.ndarray, fine_dims) -> np.ndarray:
    """Separable trilinear upsampling onto the factor-2 finer grid with
    the half-voxel lattice alignment, clamped at the borders."""
    out = arr
    for axis in range(3):
        n_f = fine_dims[axis]
        n_c = out.shape[axis]
        pos = np.clip((np.arange(n_f, dtype=np.float64) - 0.5) / 2.0,
                      0.0, n_c - 1.0)
        i0 = np.floor(pos).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_c - 1)
        f = pos - i0
        moved = np.moveaxis(out, axis, 0)
        shape = (n_f,) + (1,) * (moved.ndim - 1)
        interp = (1 - f).reshape(shape) * moved[i0] + f.reshape(shape) * moved[i1]
        out = np.moveaxis(interp, 0, axis)
    return out


def fill_holes(vol: Volume, holes: np.ndarray, passes: int = 1) -> Volume:
    """Fill hole voxels by multi-scale normalized convolution.

    holes is a boolean mask of voxels to fill; everything else is treated
    as observed and returned unchanged. passes >= 2 adds box-smoothing
    relaxation sweeps over the filled voxels.
    """
    if passes < 1:
        raise ValueError(f"passes must be >= 1, got {passes}")
    holes = np.asarray(holes, dtype=bool)
    if holes.shape != vol.dims:
        raise ValueError(f"hole mask shape {holes.shape} does not match "
                         f"volume dims {vol.dims}")
    if not holes.any():
        return Volume(vol.data.copy(), vol.spacing)
    if holes.all():
        raise AllHolesError("cannot fill a volume with no observed voxels")

    w = (~holes).astype(np.float64)
    v = vol.data * w
    lo = float(vol.data[~holes].min())
    hi = float(vol.data[~holes].max())

    # downsample (value, weight) pairs until everything is observed
    pairs = [(v, w)]
    while np.any(pairs[-1][1] == 0.0) and min(pairs[-1][0].shape) > 1:
        pv, pw = pairs[-1]
        pairs.append((block_mean2(pv, (0, 1, 2)), block_mean2(pw, (0, 1, 2))))

    pv, pw = pairs[-1]
    est = np.divide(pv, pw, out=np.zeros_like(pv), where=pw > 0)
    for pv, pw in reversed(pairs[:-1]):
        up = _upsample_trilinear(est, pv.shape)
        obs = pw > 0
        est = np.where(obs, np.divide(pv, pw, out=np.zeros_like(pv),
                                      where=obs), up)

    out = vol.data.copy()
    out[holes] = np.clip(est[holes], lo, hi)

    # optional relaxation: 3x3x3 box means over hole voxels only
    for _ in range(passes - 1):
        sm = _box_mean3(out)
        out[holes] = np.clip(sm[holes], lo, hi)
    return Volume(out, vol.spacing)


def _box_mean3(a: np.ndarray) -> np.ndarray:
    """3-tap box mean per axis with edge-clamped borders."""
    out = a
    for axis in range(3):
        m = np.moveaxis(out, axis, 0)
        padded = np.concatenate([m[:1], m, m[-1:]], axis=0)
        out = np.moveaxis((padded[:-2] + padded[1:-1] + padded[2:]) / 3.0,
                          0, axis)
    return out
