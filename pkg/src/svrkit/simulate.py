"""Simulation of motion-corrupted slice stacks from ground-truth volumes.

A per-slice rigid trajectory is drawn by sampling uniform rotation and
translation control points and smoothing them with a clamped cubic
B-spline, so every per-slice parameter stays inside the sampled range
(convex-hull property). Two-shot acquisition is modeled by interleaving:
the first temporal half of the trajectory lands on even slice indices,
the second half on odd ones.

Acquisition then pulls slices through the boxcar PSF, adds Gaussian
noise, and applies a gamma mapping drawn once per stack.

Randomness: all draws come from one explicit ``numpy.random.Generator``
(PCG64 when seeded via ``rng_for``). Draw order is fixed and documented:
knot count (only when ``knots`` is None), rotation knots, translation
knots, pixel noise (only when ``noise_sigma > 0``), gamma exponent.
Identical (volume, config, seed) inputs produce bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import GeometryError
from .grid import Volume
from .warp import (_AXIS_INDEX, MotionStack, SliceStack, boxcar_psf,
                   pixel_coords, pull_stack)

KNOT_RANGE = (32, 64)


def rng_for(seed: int) -> np.random.Generator:
    """The toolkit's named generator: PCG64 with the given seed."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class RigidParams:
    """Rigid pose offset: Euler angles in degrees applied intrinsically in
    Z-Y-X order (about z, then y, then x), translation in voxels."""

    euler: np.ndarray  # (3,) degrees, (about_z, about_y, about_x)
    trans: np.ndarray  # (3,) voxels

    def __post_init__(self):
        self.euler = np.asarray(self.euler, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)
        if self.euler.shape != (3,) or self.trans.shape != (3,):
            raise ValueError("euler and trans must be 3-vectors")
        if not (np.all(np.isfinite(self.euler)) and np.all(np.isfinite(self.trans))):
            raise ValueError("rigid parameters must be finite")


def euler_zyx_matrix(euler_deg: np.ndarray) -> np.ndarray:
    """Rotation matrix for intrinsic Z-Y-X Euler angles in degrees:
    R = Rz(a) @ Ry(b) @ Rx(c)."""
    a, b, c = np.deg2rad(np.asarray(euler_deg, dtype=np.float64))
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    rz = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1.0]])
    ry = np.array([[cb, 0, sb], [0, 1.0, 0], [-sb, 0, cb]])
    rx = np.array([[1.0, 0, 0], [0, cc, -sc], [0, sc, cc]])
    return rz @ ry @ rx


@dataclass
class SliceTrajectory:
    """Per-slice rigid parameters plus the shared rotation center."""

    euler: np.ndarray  # (K, 3) degrees
    trans: np.ndarray  # (K, 3) voxels
    center: np.ndarray  # (3,) voxel coordinates

    def __post_init__(self):
        self.euler = np.asarray(self.euler, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)
        self.center = np.asarray(self.center, dtype=np.float64)
        if (self.euler.ndim != 2 or self.euler.shape[1] != 3
                or self.euler.shape != self.trans.shape):
            raise ValueError("trajectory needs matching (K,3) euler and trans")

    @property
    def K(self) -> int:
        return self.euler.shape[0]

    def param(self, k: int) -> RigidParams:
        return RigidParams(self.euler[k], self.trans[k])


@dataclass
class SimConfig:
    """Stack-simulation parameters (defaults follow the standard protocol:
    4-voxel boxcar slab, every-4th-slice sampling, sigma 0.01 noise,
    gamma in [0.9, 1])."""

    knots: int | None = None  # None: draw uniformly from KNOT_RANGE
    euler_max: float = 20.0  # degrees
    trans_max: float = 26.0  # voxels
    psf_width: int = 4
    stride: int = 4
    noise_sigma: float = 0.01
    gamma_range: tuple[float, float] = (0.9, 1.0)
    interleave: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.euler_max < 0 or self.trans_max < 0:
            raise ValueError("euler_max and trans_max must be >= 0")
        if self.psf_width < 1 or self.stride < 1:
            raise ValueError("psf_width and stride must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        lo, hi = self.gamma_range
        if not (0 < lo <= hi):
            raise ValueError(f"gamma_range must satisfy 0 < lo <= hi, got {lo, hi}")
        if self.knots is not None and self.knots < 4:
            raise ValueError("cubic B-spline needs at least 4 control points")


def _clamped_cubic_bspline(ctrl: np.ndarray, n_eval: int) -> np.ndarray:
    """Evaluate a clamped uniform cubic B-spline with the given control
    points at n_eval uniformly spaced parameters spanning the full curve."""
    n = ctrl.shape[0]
    deg = 3
    knots = np.concatenate([np.zeros(deg + 1), np.arange(1, n - deg),
                            np.full(deg + 1, n - deg)])
    spline = BSpline(knots, ctrl, deg, extrapolate=False)
    s = np.linspace(0.0, float(n - deg), n_eval)
    return np.asarray(spline(s))


def interleave_indices(K: int) -> np.ndarray:
    """Temporal position assigned to each slice of a two-shot sequence:
    the first temporal half lands on even slice indices, the second half
    on odd ones."""
    order = np.empty(K, dtype=np.int64)
    n_even = (K + 1) // 2
    order[np.arange(0, K, 2)] = np.arange(n_even)
    order[np.arange(1, K, 2)] = np.arange(n_even, K)
    return order


def gen_trajectory(K: int, cfg: SimConfig, rng: np.random.Generator,
                   center=(0.0, 0.0, 0.0)) -> SliceTrajectory:
    """Draw a smooth per-slice rigid trajectory of length K."""
    if K < 2:
        raise ValueError(f"trajectory needs K >= 2 slices, got {K}")
    knots = cfg.knots if cfg.knots is not None else int(
        rng.integers(KNOT_RANGE[0], KNOT_RANGE[1] + 1))
    if knots < 4:
        raise ValueError("cubic B-spline needs at least 4 control points")
    euler_knots = rng.uniform(-cfg.euler_max, cfg.euler_max, size=(knots, 3))
    trans_knots = rng.uniform(-cfg.trans_max, cfg.trans_max, size=(knots, 3))
    smooth = _clamped_cubic_bspline(np.hstack([euler_knots, trans_knots]), K)
    if cfg.interleave:
        smooth = smooth[interleave_indices(K)]
    return SliceTrajectory(smooth[:, :3], smooth[:, 3:],
                           np.asarray(center, dtype=np.float64))


def rasterize_motion(traj: SliceTrajectory, K: int, H: int, W: int, axis: str,
                     spacing: float, slab: int = 4) -> MotionStack:
    """Exact rigid displacement field on the slice lattice:
    u(q) = R(q - c) + c + t - q per slice."""
    if traj.K != K:
        raise GeometryError(f"trajectory has {traj.K} slices, stack needs {K}")
    base = pixel_coords(K, H, W, axis, spacing)  # (K,H,W,3)
    c = traj.center
    data = np.empty((K, 3, H, W), dtype=np.float64)
    for k in range(K):
        r = euler_zyx_matrix(traj.euler[k])
        d = base[k] - c
        disp = d @ r.T + c + traj.trans[k] - base[k]
        data[k] = disp.transpose(2, 0, 1)
    return MotionStack(data, spacing, axis, slab)


def volume_center(dims) -> np.ndarray:
    return (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0


def stack_shape_for(dims, axis: str, stride: int) -> tuple[int, int, int]:
    """(K, H, W) of the stack acquired from a volume: every stride-th slice
    along the axis (partial last slice dropped), full in-plane grid."""
    ax = _AXIS_INDEX[axis]
    others = [a for a in range(3) if a != ax]
    K = dims[ax] // stride
    if K < 1:
        raise GeometryError(f"volume extent {dims[ax]} along {axis} is below "
                            f"stride {stride}")
    return K, dims[others[1]], dims[others[0]]


def acquire(vol: Volume, traj: SliceTrajectory, cfg: SimConfig,
            rng: np.random.Generator, axis: str = "z"
            ) -> tuple[SliceStack, MotionStack]:
    """Simulate stack acquisition: rigid motion, boxcar PSF pull, noise,
    then gamma on stack intensities normalized by the stack maximum.
    Returns the degraded stack and the ground-truth motion."""
    K, H, W = stack_shape_for(vol.dims, axis, cfg.stride)
    motion = rasterize_motion(traj, K, H, W, axis, float(cfg.stride),
                              cfg.psf_width)
    psf = boxcar_psf(cfg.psf_width)
    data = pull_stack(vol.data, motion.data, axis, float(cfg.stride), psf)
    if cfg.noise_sigma > 0:
        data = data + rng.normal(0.0, cfg.noise_sigma, size=data.shape)
    gamma = rng.uniform(cfg.gamma_range[0], cfg.gamma_range[1])
    if gamma != 1.0:
        peak = data.max()
        if peak > 0:
            data = peak * np.power(np.clip(data, 0.0, None) / peak, gamma)
    stack = SliceStack(data, float(cfg.stride), axis, cfg.psf_width)
    return stack, motion


def simulate_stack(vol: Volume, cfg: SimConfig, axis: str = "z",
                   rng: np.random.Generator | None = None
                   ) -> tuple[SliceStack, MotionStack, SliceTrajectory]:
    """One-call pipeline: trajectory + acquisition with the config seed."""
    if rng is None:
        rng = rng_for(cfg.seed)
    K, _, _ = stack_shape_for(vol.dims, axis, cfg.stride)
    traj = gen_trajectory(K, cfg, rng, center=volume_center(vol.dims))
    stack, motion = acquire(vol, traj, cfg, rng, axis)
    return stack, motion, traj
