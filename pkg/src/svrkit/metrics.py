"""Motion and reconstruction accuracy metrics.

Motion metrics (MSE, end-point error, anchor-point error) are reported in
voxel units of the reconstruction grid. PSNR is in dB with a hard cap of
300 dB for identical inputs. End-point error can optionally be compensated
for a global rigid offset via the rigid module.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import GeometryError
from .rigid import _as_points, _lattice_for, _masked, compensated_loss
from .warp import MotionStack

PSNR_CAP_DB = 300.0


@dataclass
class MetricReport:
    """Scalar summary emitted by the evaluate pipeline (None = not computed)."""

    mse: float | None = None
    epe: float | None = None
    epe_compensated: float | None = None
    ape: float | None = None
    psnr_slices: float | None = None
    psnr_volume: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _paired_points(u, v, p, mask):
    up, vp = _as_points(u), _as_points(v)
    if up.shape != vp.shape:
        raise GeometryError(f"motion shapes differ: {up.shape} vs {vp.shape}")
    pp = _lattice_for(u, p)
    up, vp, pp = _masked([up, vp, pp], mask)
    if up.shape[0] == 0:
        raise ValueError("empty mask: no points to evaluate")
    return up, vp, pp


def motion_mse(u, v, mask=None) -> float:
    """Mean squared displacement difference, (1/N) * ||u - v||_F^2."""
    up, vp = _as_points(u), _as_points(v)
    if up.shape != vp.shape:
        raise GeometryError(f"motion shapes differ: {up.shape} vs {vp.shape}")
    up, vp = _masked([up, vp], mask)
    if up.shape[0] == 0:
        raise ValueError("empty mask: no points to evaluate")
    d = up - vp
    return float(np.sum(d * d) / up.shape[0])


def epe(u, v, mask=None, compensate: bool = False, p=None) -> float:
    """Mean Euclidean end-point distance between two motion fields.

    With compensate=True the best global rigid offset between the two point
    clouds is removed first; the compensation never increases the error
    (identity is a feasible offset).
    """
    if not compensate:
        up, vp = _as_points(u), _as_points(v)
        if up.shape != vp.shape:
            raise GeometryError(f"motion shapes differ: {up.shape} vs {vp.shape}")
        up, vp = _masked([up, vp], mask)
        if up.shape[0] == 0:
            raise ValueError("empty mask: no points to evaluate")
        return float(np.mean(np.linalg.norm(up - vp, axis=1)))
    up, vp, pp = _paired_points(u, v, p, mask)
    _, rigid = compensated_loss(up, vp, pp)
    aligned = (vp + pp) @ rigid.rotation + rigid.translation - pp
    comp = float(np.mean(np.linalg.norm(up - aligned, axis=1)))
    plain = float(np.mean(np.linalg.norm(up - vp, axis=1)))
    return min(comp, plain)


def _bilinear_slice_sample(field: np.ndarray, h: float, w: float) -> np.ndarray:
    """Sample a (3, H, W) per-slice field at fractional (h, w), clamped."""
    H, W = field.shape[1:]
    h = min(max(h, 0.0), H - 1.0)
    w = min(max(w, 0.0), W - 1.0)
    h0, w0 = int(np.floor(h)), int(np.floor(w))
    h1, w1 = min(h0 + 1, H - 1), min(w0 + 1, W - 1)
    fh, fw = h - h0, w - w0
    return ((1 - fh) * (1 - fw) * field[:, h0, w0]
            + (1 - fh) * fw * field[:, h0, w1]
            + fh * (1 - fw) * field[:, h1, w0]
            + fh * fw * field[:, h1, w1])


def slice_anchors(H: int, W: int) -> list[tuple[float, float]]:
    """Anchor pixels of a slice as (h, w): center, bottom-left, bottom-right."""
    return [((H - 1) / 2.0, (W - 1) / 2.0), (0.0, 0.0), (0.0, float(W - 1))]


def ape(u: MotionStack, v: MotionStack) -> float:
    """Anchor-point error: mean over slices of the mean Euclidean distance
    between predicted and true anchor positions (3 anchors per slice)."""
    if u.geometry() != v.geometry():
        raise GeometryError(
            f"motion geometries differ: {u.geometry()} vs {v.geometry()}")
    H, W = u.in_plane
    if H < 2 or W < 2:
        raise GeometryError(f"slices must be at least 2x2 for anchors, got {H}x{W}")
    anchors = slice_anchors(H, W)
    per_slice = []
    for k in range(u.K):
        dists = [np.linalg.norm(_bilinear_slice_sample(u.data[k], h, w)
                                - _bilinear_slice_sample(v.data[k], h, w))
                 for h, w in anchors]
        per_slice.append(np.mean(dists))
    return float(np.mean(per_slice))


def _intensities(x) -> np.ndarray:
    data = getattr(x, "data", x)
    return np.asarray(data, dtype=np.float64)


def psnr(a, b, mask=None, peak: float | None = None) -> float:
    """10*log10(peak^2 / MSE) between a and its reference b, capped at
    300 dB; peak defaults to the reference maximum over the mask."""
    da, db = _intensities(a), _intensities(b)
    if da.shape != db.shape:
        raise GeometryError(f"shapes differ: {da.shape} vs {db.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        da, db = da[m], db[m]
    if da.size == 0:
        raise ValueError("empty mask: no elements to evaluate")
    if peak is None:
        peak = float(np.max(db))
    if not peak > 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    mse = float(np.mean((da - db) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB)
