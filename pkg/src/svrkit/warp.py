"""Adjoint slice (pull) and splat (push) warping with multi-linear weights.

A slice stack is acquired along one grid axis. Pixel ``(k, h, w)`` of the
stack has a nominal 3D position determined by the stack geometry:

========  =========================  =========================
axis      w runs along               h runs along
========  =========================  =========================
``"z"``   x                          y
``"y"``   x                          z
``"x"``   y                          z
========  =========================  =========================

with the slice plane at ``k * spacing`` voxels along the stack axis.
The through-plane PSF places its taps at voxel offsets symmetric about
the slice plane: ``{-(w-1)/2, ..., +(w-1)/2}`` for width ``w``.

Out-of-volume samples are zero-padded and their interpolation weight is
dropped (not renormalized), which keeps pull and push exact adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .grid import Volume

AXES = ("x", "y", "z")
_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}

# slices per batch are chosen to keep roughly this many sample points
# in flight at once
_POINT_BUDGET = 4_000_000


@dataclass
class SliceStack:
    """K acquired 2D slices along one axis of the reconstruction grid."""

    data: np.ndarray  # (K, H, W)
    spacing: float  # inter-slice spacing in reconstruction voxels
    axis: str = "z"
    slab: int = 4  # through-plane PSF support in voxels

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise GeometryError(f"stack data must be (K,H,W), got {self.data.shape}")
        if self.axis not in AXES:
            raise GeometryError(f"axis must be one of {AXES}, got {self.axis!r}")
        if not self.spacing > 0:
            raise ValueError(f"slice spacing must be > 0, got {self.spacing}")
        if int(self.slab) < 1:
            raise ValueError(f"slab must be >= 1, got {self.slab}")
        self.slab = int(self.slab)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("stack intensities must be finite")

    @property
    def K(self) -> int:
        return self.data.shape[0]

    @property
    def in_plane(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def geometry(self) -> tuple:
        return (*self.data.shape, self.axis, float(self.spacing), self.slab)


@dataclass
class MotionStack:
    """Per-slice dense 3D displacement fields on the slice lattice.

    ``data[k, c, h, w]`` is displacement component c (0=x, 1=y, 2=z) of
    slice-k pixel (h, w), in reconstruction-grid voxel units.
    """

    data: np.ndarray  # (K, 3, H, W)
    spacing: float
    axis: str = "z"
    slab: int = 4

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[1] != 3:
            raise GeometryError(f"motion data must be (K,3,H,W), got {self.data.shape}")
        if self.axis not in AXES:
            raise GeometryError(f"axis must be one of {AXES}, got {self.axis!r}")
        if not self.spacing > 0:
            raise ValueError(f"slice spacing must be > 0, got {self.spacing}")
        if int(self.slab) < 1:
            raise ValueError(f"slab must be >= 1, got {self.slab}")
        self.slab = int(self.slab)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("displacements must be finite")

    @property
    def K(self) -> int:
        return self.data.shape[0]

    @property
    def in_plane(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    def geometry(self) -> tuple:
        return (self.K, *self.in_plane, self.axis, float(self.spacing), self.slab)

    def copy(self) -> "MotionStack":
        return MotionStack(self.data.copy(), self.spacing, self.axis, self.slab)


def zero_motion(K: int, H: int, W: int, spacing: float, axis: str = "z",
                slab: int = 4) -> MotionStack:
    return MotionStack(np.zeros((K, 3, H, W)), spacing, axis, slab)


def motion_like(stack: SliceStack) -> MotionStack:
    """Zero motion matching a stack's geometry."""
    return zero_motion(stack.K, *stack.in_plane, stack.spacing, stack.axis, stack.slab)


@dataclass(frozen=True)
class Psf:
    """Through-plane point spread function: nonnegative taps summing to 1,
    centered on the slice plane with pitch voxels between taps."""

    weights: np.ndarray
    pitch: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("psf weights must be a non-empty 1D array")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-12):
            raise ValueError("psf weights must be nonnegative and sum to 1")
        if not self.pitch > 0:
            raise ValueError(f"psf tap pitch must be > 0, got {self.pitch}")

    @property
    def width(self) -> int:
        return self.weights.size

    def offsets(self) -> np.ndarray:
        """Tap offsets in voxels along the stack axis, centered on the plane."""
        w = self.width
        return (np.arange(w, dtype=np.float64) - (w - 1) / 2.0) * self.pitch


def boxcar_psf(width: int, pitch: float = 1.0) -> Psf:
    if width < 1:
        raise ValueError(f"psf width must be >= 1, got {width}")
    return Psf(np.full(int(width), 1.0 / int(width)), pitch)


@dataclass
class SplatVolume:
    """Accumulated intensities and weights of a push-warp (splat)."""

    values: Volume
    weights: Volume

    def __post_init__(self):
        if self.values.dims != self.weights.dims:
            raise GeometryError("splat values/weights dims differ")


def pixel_coords(K: int, H: int, W: int, axis: str, spacing: float) -> np.ndarray:
    """Nominal 3D coordinates of stack pixels, shape (K, H, W, 3)."""
    ax = _AXIS_INDEX[axis]
    aw, ah = [a for a in range(3) if a != ax]
    coords = np.empty((K, H, W, 3), dtype=np.float64)
    coords[..., aw] = np.arange(W, dtype=np.float64)[None, None, :]
    coords[..., ah] = np.arange(H, dtype=np.float64)[None, :, None]
    coords[..., ax] = (spacing * np.arange(K, dtype=np.float64))[:, None, None]
    return coords


def stack_coords(motion: MotionStack) -> np.ndarray:
    """Nominal pixel coordinates for a motion stack's lattice, (K,H,W,3)."""
    return pixel_coords(motion.K, *motion.in_plane, motion.axis, motion.spacing)


def _check_pair(stack: SliceStack, motion: MotionStack):
    if stack.geometry()[:5] != motion.geometry()[:5]:
        raise GeometryError(
            f"stack geometry {stack.geometry()} does not match "
            f"motion geometry {motion.geometry()}"
        )


def _corner_terms(pts: np.ndarray, dims: tuple[int, int, int]):
    """Yield (linear index, weight, mask) for the 8 trilinear corners.

    Only in-bounds corners are yielded; points are pre-clipped far outside
    the grid to avoid integer overflow, which cannot change any in-bounds
    corner weight.
    """
    nx, ny, nz = dims
    lim = float(max(dims) + 4)
    pts = np.clip(pts, -4.0, lim)
    i0 = np.floor(pts).astype(np.int64)
    f = pts - i0
    g = 1.0 - f
    for dx in (0, 1):
        wx = f[:, 0] if dx else g[:, 0]
        ix = i0[:, 0] + dx
        okx = (ix >= 0) & (ix < nx)
        for dy in (0, 1):
            wy = f[:, 1] if dy else g[:, 1]
            iy = i0[:, 1] + dy
            okxy = okx & (iy >= 0) & (iy < ny)
            for dz in (0, 1):
                wz = f[:, 2] if dz else g[:, 2]
                iz = i0[:, 2] + dz
                ok = okxy & (iz >= 0) & (iz < nz)
                lin = ix[ok] + nx * (iy[ok] + ny * iz[ok])
                yield lin, (wx * wy * wz)[ok], ok


def trilinear_gather(flat: np.ndarray, dims: tuple[int, int, int],
                     pts: np.ndarray) -> np.ndarray:
    """Trilinear samples of an x-fastest flat volume at pts (n, 3);
    out-of-volume contributions are zero."""
    out = np.zeros(pts.shape[0], dtype=np.float64)
    for lin, w, ok in _corner_terms(pts, dims):
        out[ok] += w * flat[lin]
    return out


def trilinear_scatter(acc: np.ndarray, dims: tuple[int, int, int],
                      pts: np.ndarray, amounts: np.ndarray):
    """Scatter-add amounts (n,) into a flat accumulator at pts (n, 3).

    Accumulation is a fixed-order sequential sum (np.bincount), so results
    are reproducible run to run.
    """
    nvox = acc.size
    for lin, w, ok in _corner_terms(pts, dims):
        acc += np.bincount(lin, weights=w * amounts[ok], minlength=nvox)


def trilinear_jacobian(flat: np.ndarray, dims: tuple[int, int, int],
                       pts: np.ndarray) -> np.ndarray:
    """Exact derivative (n, 3) of the trilinear sample wrt the sample
    position, with the same dropped-weight zero-padding as the gather.

    This is the true linearization of the discrete pull warp; resampling
    a precomputed central-difference gradient volume only approximates it.
    """
    nx, ny, nz = dims
    lim = float(max(dims) + 4)
    pts = np.clip(pts, -4.0, lim)
    i0 = np.floor(pts).astype(np.int64)
    f = pts - i0
    g = 1.0 - f
    jac = np.zeros((pts.shape[0], 3), dtype=np.float64)
    for dx in (0, 1):
        wx, sx = (f[:, 0], 1.0) if dx else (g[:, 0], -1.0)
        ix = i0[:, 0] + dx
        okx = (ix >= 0) & (ix < nx)
        for dy in (0, 1):
            wy, sy = (f[:, 1], 1.0) if dy else (g[:, 1], -1.0)
            iy = i0[:, 1] + dy
            okxy = okx & (iy >= 0) & (iy < ny)
            for dz in (0, 1):
                wz, sz = (f[:, 2], 1.0) if dz else (g[:, 2], -1.0)
                iz = i0[:, 2] + dz
                ok = okxy & (iz >= 0) & (iz < nz)
                lin = ix[ok] + nx * (iy[ok] + ny * iz[ok])
                v = flat[lin]
                jac[ok, 0] += sx * (wy * wz)[ok] * v
                jac[ok, 1] += sy * (wx * wz)[ok] * v
                jac[ok, 2] += sz * (wx * wy)[ok] * v
    return jac


def _slice_batches(K: int, H: int, W: int, width: int):
    per_slice = max(1, width * H * W)
    step = max(1, _POINT_BUDGET // per_slice)
    for k0 in range(0, K, step):
        yield k0, min(K, k0 + step)


def _batch_points(base: np.ndarray, disp: np.ndarray, offsets: np.ndarray,
                  ax: int) -> np.ndarray:
    """(T, n, 3) sample locations for a batch of slices: nominal + tap + motion."""
    pts = (base + disp).reshape(-1, 3)
    out = np.repeat(pts[None, :, :], offsets.size, axis=0)
    out[..., ax] += offsets[:, None]
    return out


def pull_stack(vol_data: np.ndarray, motion_data: np.ndarray, axis: str,
               spacing: float, psf: Psf, first_slice: int = 0) -> np.ndarray:
    """Raw slice-pull kernel: (K,3,H,W) motion -> (K,H,W) slice values.

    first_slice offsets the nominal slice planes, so a sub-range of a
    stack can be pulled with motion_data[k0:k1] and first_slice=k0.
    """
    K, _, H, W = motion_data.shape
    dims = vol_data.shape
    ax = _AXIS_INDEX[axis]
    flat = vol_data.ravel(order="F")
    offsets = psf.offsets()
    wts = psf.weights
    out = np.empty((K, H, W), dtype=np.float64)
    for k0, k1 in _slice_batches(K, H, W, psf.width):
        base = pixel_coords(k1 - k0, H, W, axis, spacing)
        base[..., ax] += (first_slice + k0) * spacing
        disp = motion_data[k0:k1].transpose(0, 2, 3, 1)
        pts = _batch_points(base, disp, offsets, ax)
        vals = np.zeros(pts.shape[1], dtype=np.float64)
        for t in range(psf.width):
            vals += wts[t] * trilinear_gather(flat, dims, pts[t])
        out[k0:k1] = vals.reshape(k1 - k0, H, W)
    return out


def pull_jacobian(vol_data: np.ndarray, motion_data: np.ndarray, axis: str,
                  spacing: float, psf: Psf,
                  first_slice: int = 0) -> np.ndarray:
    """PSF-weighted exact pull derivative wrt displacement, (K, 3, H, W)."""
    K, _, H, W = motion_data.shape
    dims = vol_data.shape
    ax = _AXIS_INDEX[axis]
    flat = vol_data.ravel(order="F")
    offsets = psf.offsets()
    wts = psf.weights
    out = np.empty((K, 3, H, W), dtype=np.float64)
    for k0, k1 in _slice_batches(K, H, W, psf.width):
        base = pixel_coords(k1 - k0, H, W, axis, spacing)
        base[..., ax] += (first_slice + k0) * spacing
        disp = motion_data[k0:k1].transpose(0, 2, 3, 1)
        pts = _batch_points(base, disp, offsets, ax)
        jac = np.zeros((pts.shape[1], 3), dtype=np.float64)
        for t in range(psf.width):
            jac += wts[t] * trilinear_jacobian(flat, dims, pts[t])
        out[k0:k1] = jac.reshape(k1 - k0, H, W, 3).transpose(0, 3, 1, 2)
    return out


def push_stack(stack_data: np.ndarray, motion_data: np.ndarray, axis: str,
               spacing: float, psf: Psf,
               dims: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Raw splat kernel: returns flat (values, weights) accumulators."""
    K, _, H, W = motion_data.shape
    ax = _AXIS_INDEX[axis]
    nvox = int(np.prod(dims))
    acc_v = np.zeros(nvox, dtype=np.float64)
    acc_w = np.zeros(nvox, dtype=np.float64)
    offsets = psf.offsets()
    wts = psf.weights
    for k0, k1 in _slice_batches(K, H, W, psf.width):
        base = pixel_coords(k1 - k0, H, W, axis, spacing)
        base[..., ax] += k0 * spacing
        disp = motion_data[k0:k1].transpose(0, 2, 3, 1)
        pts = _batch_points(base, disp, offsets, ax)
        vals = stack_data[k0:k1].ravel()
        ones = np.ones_like(vals)
        for t in range(psf.width):
            trilinear_scatter(acc_v, dims, pts[t], wts[t] * vals)
            trilinear_scatter(acc_w, dims, pts[t], wts[t] * ones)
    return acc_v, acc_w


class WarpPlan:
    """Precomputed sparse pull operator for one (motion, psf, grid) triple.

    Caches the trilinear corner indices and weights as a CSR matrix so
    repeated applications (e.g. CG iterations) skip the geometry work.
    apply/adjoint reproduce pull_stack/push_stack exactly in exact
    arithmetic; summation order differs only at rounding level.
    """

    def __init__(self, motion: MotionStack, psf: Psf,
                 dims: tuple[int, int, int]):
        from scipy.sparse import csr_matrix

        K, H, W = motion.K, *motion.in_plane
        ax = _AXIS_INDEX[motion.axis]
        self.dims = tuple(dims)
        self.n_pix = K * H * W
        self.shape = (K, H, W)
        nvox = int(np.prod(dims))
        rows, cols, vals = [], [], []
        offsets = psf.offsets()
        base = pixel_coords(K, H, W, motion.axis, motion.spacing)
        pts0 = (base + motion.data.transpose(0, 2, 3, 1)).reshape(-1, 3)
        pix_idx = np.arange(self.n_pix, dtype=np.int64)
        for t, wt in zip(offsets, psf.weights):
            pts = pts0.copy()
            pts[:, ax] += t
            for lin, w, ok in _corner_terms(pts, dims):
                rows.append(pix_idx[ok])
                cols.append(lin)
                vals.append(wt * w)
        self.matrix = csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_pix, nvox))
        self._adjoint = None

    def apply(self, vol_flat: np.ndarray) -> np.ndarray:
        """Pull: flat volume -> flat stack pixels."""
        return self.matrix @ vol_flat

    def adjoint(self, pix_flat: np.ndarray) -> np.ndarray:
        """Splat: flat stack pixels -> flat volume accumulator."""
        if self._adjoint is None:
            self._adjoint = self.matrix.T.tocsr()
        return self._adjoint @ pix_flat

    def weight_image(self) -> np.ndarray:
        """Flat splat of an all-ones stack (the weight accumulator)."""
        return self.adjoint(np.ones(self.n_pix))


def slice_pull(vol: Volume, motion: MotionStack, psf: Psf) -> SliceStack:
    """Sample a volume at motion-displaced slice locations (the forward
    acquisition operator): trilinear gather averaged over PSF taps."""
    data = pull_stack(vol.data, motion.data, motion.axis, motion.spacing, psf)
    return SliceStack(data, motion.spacing, motion.axis, psf.width)


def splat_push(stack: SliceStack, motion: MotionStack, psf: Psf,
               dims: tuple[int, int, int]) -> SplatVolume:
    """Scatter slice intensities into the volume grid (exact adjoint of
    slice_pull); weights accumulate the splat of an all-ones stack."""
    _check_pair(stack, motion)
    if len(dims) != 3 or min(dims) < 1:
        raise GeometryError(f"invalid target dims {dims}")
    acc_v, acc_w = push_stack(stack.data, motion.data, motion.axis,
                              motion.spacing, psf, tuple(dims))
    spacing_mm = 1.0
    values = Volume(acc_v.reshape(dims, order="F"), spacing_mm)
    weights = Volume(acc_w.reshape(dims, order="F"), spacing_mm)
    return SplatVolume(values, weights)


def normalize_splat(splat: SplatVolume, eps: float = 1e-3) -> tuple[Volume, np.ndarray]:
    """Weight-normalize a splat; voxels with weight < eps become 0-valued
    holes. Returns (volume, hole mask)."""
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    w = splat.weights.data
    holes = w < eps
    out = np.divide(splat.values.data, w, out=np.zeros_like(w), where=~holes)
    out[holes] = 0.0
    return Volume(out, splat.values.spacing), holes


def compose_motion(coarse: MotionStack, residual: MotionStack) -> MotionStack:
    """Additive composition u <- u_coarse + u_residual (small-motion model)."""
    if coarse.geometry() != residual.geometry():
        raise GeometryError(
            f"motion geometries differ: {coarse.geometry()} vs {residual.geometry()}"
        )
    return MotionStack(coarse.data + residual.data, coarse.spacing, coarse.axis,
                       coarse.slab)
