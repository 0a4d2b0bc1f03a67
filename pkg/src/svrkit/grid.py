"""Core lattice types: volumes, coordinate grids, gradients and pyramids.

Conventions used throughout the toolkit:

* A volume is a 3D scalar grid with dims ``(Nx, Ny, Nz)`` and isotropic
  voxel spacing. ``Volume.data`` is indexed ``data[ix, iy, iz]`` and any
  flattened view uses x-fastest order (``ravel(order="F")``), which is
  also the on-disk layout of the NIfTI payload.
* Coordinates are in voxel units: voxel ``(i, j, k)`` sits at the point
  ``(i, j, k)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError


@dataclass
class Volume:
    """3D intensity grid with isotropic voxel spacing (mm/voxel)."""

    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise GeometryError(f"volume data must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise GeometryError(f"volume dims must be >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume intensities must be finite")
        if not self.spacing > 0:
            raise ValueError(f"voxel spacing must be > 0, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def ravel(self) -> np.ndarray:
        """Flat x-fastest view/copy of the intensities."""
        return self.data.ravel(order="F")

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing)


def volume_from_flat(flat: np.ndarray, dims: tuple[int, int, int],
                     spacing: float = 1.0) -> Volume:
    """Rebuild a Volume from an x-fastest flat array."""
    return Volume(np.asarray(flat, dtype=np.float64).reshape(dims, order="F"), spacing)


@dataclass
class CoordLattice:
    """Voxel-center coordinates of a grid: point (i,j,k) -> (i,j,k)."""

    dims: tuple[int, int, int]
    points: np.ndarray = field(init=False)  # (Nx, Ny, Nz, 3)

    def __post_init__(self):
        self.points = coord_grid(self.dims)


def coord_grid(dims: tuple[int, int, int]) -> np.ndarray:
    """(Nx, Ny, Nz, 3) array of voxel coordinates in voxel units."""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def gradient(vol: Volume) -> tuple[Volume, Volume, Volume]:
    """Spatial derivatives (v_x, v_y, v_z) of a volume.

    Central differences at interior voxels, one-sided differences at the
    boundary, zero along axes of extent 1.
    """
    grads = []
    for axis in range(3):
        if vol.data.shape[axis] < 2:
            grads.append(np.zeros_like(vol.data))
        else:
            grads.append(np.gradient(vol.data, axis=axis, edge_order=1))
    return tuple(Volume(g, vol.spacing) for g in grads)


def _halve_axis(a: np.ndarray, axis: int) -> np.ndarray:
    """Mean over non-overlapping pairs along one axis; odd tail kept as-is."""
    n = a.shape[axis]
    if n < 2:
        return a
    a = np.moveaxis(a, axis, 0)
    even = a[0 : n - n % 2 : 2]
    odd = a[1::2]
    out = 0.5 * (even + odd)
    if n % 2:
        out = np.concatenate([out, a[-1:]], axis=0)
    return np.moveaxis(out, 0, axis)


def block_mean2(a: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    """Factor-2 block mean along the given axes (partial blocks averaged
    over the voxels present)."""
    for axis in axes:
        a = _halve_axis(a, axis)
    return a


def downsample2(vol: Volume) -> Volume:
    """Halve a volume by 2x2x2 block averaging; output dims = ceil(dims/2)."""
    return Volume(block_mean2(vol.data, (0, 1, 2)), vol.spacing * 2.0)


@dataclass
class Pyramid:
    """Multi-resolution stack, level 0 finest, fixed factor-2 downsampling."""

    levels: list
    factor: int = 2


def pyramid_dims(dims: tuple[int, int, int], levels: int) -> list[tuple[int, int, int]]:
    """Dim chain for a factor-2 pyramid (ceil division per level)."""
    chain = [tuple(int(n) for n in dims)]
    for _ in range(levels - 1):
        chain.append(tuple(-(-n // 2) for n in chain[-1]))
    return chain


def build_pyramid(vol: Volume, levels: int) -> Pyramid:
    """Factor-2 volume pyramid; errors if any dim would drop below 4."""
    if levels < 1:
        raise ValueError(f"pyramid needs levels >= 1, got {levels}")
    chain = pyramid_dims(vol.dims, levels)
    for lvl, dims in enumerate(chain):
        if min(dims) < 4:
            raise GeometryError(
                f"level {lvl} dims {dims} fall below 4; reduce levels ({levels})"
            )
    out = [vol]
    for _ in range(levels - 1):
        out.append(downsample2(out[-1]))
    return Pyramid(out)
