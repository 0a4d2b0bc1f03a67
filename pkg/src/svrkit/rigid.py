"""Global rigid alignment of motion fields and the rigid-compensated loss.

The loss between two motion fields u, v (each a displacement per lattice
point p) removes the best global rotation + translation before penalizing:
an unconstrained least-squares affine fit is projected onto the rotation
group by polar decomposition, and the translation is then re-solved in
closed form for the projected rotation.

Point clouds follow the row-vector convention: points are rows of an
(N, 3) matrix and rotations act on the right, ``y = x @ R + t``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFitError, GeometryError
from .warp import MotionStack, stack_coords


@dataclass
class RigidTransform:
    """Proper rotation matrix plus translation vector (voxel units)."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("rigid transform needs a 3x3 matrix and 3-vector")
        err = np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3)))
        if err > 1e-6:
            raise ValueError(f"rotation is not orthogonal (|R'R - I| = {err:.2e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > 1e-6:
            raise ValueError(f"rotation must have det +1, got {det:.6f}")


def identity_transform() -> RigidTransform:
    return RigidTransform(np.eye(3), np.zeros(3))


@dataclass
class PolarFactors:
    """Rotation and symmetric stretch factors of a 3x3 matrix."""

    rotation: np.ndarray  # (3, 3), proper rotation
    stretch: np.ndarray  # (3, 3), symmetric


def _as_points(u) -> np.ndarray:
    """Displacements as an (N, 3) row matrix."""
    if isinstance(u, MotionStack):
        return u.data.transpose(0, 2, 3, 1).reshape(-1, 3)
    a = np.asarray(u, dtype=np.float64)
    if a.ndim == 1 or a.shape[-1] != 3:
        raise GeometryError(f"expected (..., 3) displacement array, got {a.shape}")
    return a.reshape(-1, 3)


def _lattice_for(u, p) -> np.ndarray:
    if p is not None:
        return _as_points(p)
    if isinstance(u, MotionStack):
        return stack_coords(u).reshape(-1, 3)
    raise GeometryError("coordinate matrix p required for raw displacement arrays")


def _masked(arrs, mask):
    if mask is None:
        return arrs
    m = np.asarray(mask, dtype=bool).ravel()
    if m.size != arrs[0].shape[0]:
        raise GeometryError(f"mask has {m.size} entries for {arrs[0].shape[0]} points")
    return [a[m] for a in arrs]


def fit_affine(u, v, p=None, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares (A, b) with (u + p) ~ (v + p) @ A + b over masked points.

    Solved via the centered normal equations. Raises DegenerateFitError when
    fewer than 4 points are given or the points are (nearly) coplanar.
    """
    up, vp, pp = _as_points(u), _as_points(v), _lattice_for(u, p)
    if up.shape != vp.shape or up.shape != pp.shape:
        raise GeometryError(
            f"point counts differ: u {up.shape}, v {vp.shape}, p {pp.shape}")
    y, x = _masked([up + pp, vp + pp], mask)
    n = x.shape[0]
    if n < 4:
        raise DegenerateFitError(f"affine fit needs >= 4 points, got {n}")
    xm, ym = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - xm, y - ym
    m = xc.T @ xc
    if np.linalg.matrix_rank(m) < 3:
        raise DegenerateFitError("points are coplanar; affine fit is rank-deficient")
    a = np.linalg.solve(m, xc.T @ yc)
    b = ym - xm @ a
    return a, b


def polar_decompose(rp: np.ndarray) -> PolarFactors:
    """Factor a 3x3 matrix into rotation @ stretch via the SVD.

    With rp = U S V', the rotation is U D V' and the stretch V D S V',
    where D = diag(1, 1, det(UV')) forces det(rotation) = +1. For inputs
    with det > 0 the product rotation @ stretch reconstructs rp and the
    rotation is the Frobenius-nearest rotation to rp.
    """
    rp = np.asarray(rp, dtype=np.float64)
    if rp.shape != (3, 3) or not np.all(np.isfinite(rp)):
        raise ValueError(f"need a finite 3x3 matrix, got shape {rp.shape}")
    u, s, vt = np.linalg.svd(rp)
    if s[0] > 0 and s[-1] < 1e-12 * s[0]:
        warnings.warn("polar decomposition of a nearly singular matrix",
                      RuntimeWarning, stacklevel=2)
    d = np.sign(np.linalg.det(u @ vt))
    dvec = np.array([1.0, 1.0, d if d != 0 else 1.0])
    rotation = (u * dvec) @ vt
    stretch = (vt.T * (dvec * s)) @ vt
    return PolarFactors(rotation, stretch)


def compensated_loss(u, v, p=None, mask=None) -> tuple[float, RigidTransform]:
    """Mean squared residual after removing the best global rigid offset.

    Fits (u+p) ~ (v+p) @ A + b, projects A onto the rotation group, and
    re-solves the translation for the projected rotation. The identity
    transform is always a feasible compensation, so the returned loss never
    exceeds the plain per-point MSE: whichever of {fitted, identity} gives
    the lower residual is returned.
    """
    up, vp, pp = _as_points(u), _as_points(v), _lattice_for(u, p)
    a, _ = fit_affine(up, vp, pp, mask)
    r = polar_decompose(a).rotation
    y, x = _masked([up + pp, vp + pp], mask)
    n = x.shape[0]
    t = y.mean(axis=0) - x.mean(axis=0) @ r

    def sse(rot, trans):
        d = y - x @ rot - trans
        return float(np.sum(d * d))

    fitted = sse(r, t)
    plain = sse(np.eye(3), np.zeros(3))
    if fitted <= plain:
        return fitted / n, RigidTransform(r, t)
    return plain / n, identity_transform()


def apply_rigid(field, rigid: RigidTransform, p=None):
    """Transform a motion field's point cloud: (field + p) @ R + t - p."""
    pts = _as_points(field)
    pp = _lattice_for(field, p)
    out = (pts + pp) @ rigid.rotation + rigid.translation - pp
    if isinstance(field, MotionStack):
        k, h, w = field.K, *field.in_plane
        data = out.reshape(k, h, w, 3).transpose(0, 3, 1, 2)
        return MotionStack(data, field.spacing, field.axis, field.slab)
    return out.reshape(np.asarray(field).shape)
