"""Classical slice-to-volume reconstruction by block coordinate descent.

For each stack i the solver alternates:

* v-update: conjugate-gradient solution of the matrix-free normal
  equations ``(U*U + c I + eps I) v = U* f + c vbar`` where U is the
  slice-pull operator, U* the splat adjoint, ``c = (partners) * lambda``
  and vbar the mean reconstruction of the partner stacks. The Tikhonov
  eps is applied only in single-stack mode (c = 0), keeping the coupled
  v-step an exact block minimizer of the objective.
* u-update: per-slice Gauss-Newton steps on the data term, with the
  Jacobian formed by slicing the volume's spatial derivative at the
  current motion (the exact derivative of the discrete pull), Levenberg
  damping, an infinity-norm step cap, and halving backtraces that accept
  only non-increasing per-slice data terms.

Levels run coarse to fine; motion estimated on a coarser level is
upsampled (bilinear in-plane, displacements doubled) to initialize the
next finer one. The objective is re-evaluated after every block step and
updates that fail to decrease it are reverted, so the recorded trace is
non-increasing within each level.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError
from .grid import Volume, block_mean2, pyramid_dims
from .metrics import epe
from .warp import (_AXIS_INDEX, MotionStack, Psf, SliceStack, SplatVolume,
                   WarpPlan, boxcar_psf, normalize_splat, pixel_coords,
                   pull_jacobian, pull_stack, push_stack, splat_push,
                   zero_motion)


@dataclass
class ReconConfig:
    """Solver controls: coupling weight, pyramid depth, CG/GN budgets."""

    lam: float = 0.05
    levels: int = 3
    outer_iters: int = 5
    cg_iters: int = 40
    cg_tol: float = 1e-6
    gn_iters: int = 2
    step_max: float = 2.0
    armijo: float = 0.5
    tikhonov_eps: float = 1e-8
    splat_eps: float = 1e-3

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if min(self.levels, self.outer_iters, self.cg_iters, self.gn_iters) < 1:
            raise ValueError("iteration counts must be >= 1")
        if not (self.cg_tol > 0 and self.step_max > 0 and self.splat_eps > 0):
            raise ValueError("tolerances must be > 0")
        if not 0 < self.armijo < 1:
            raise ValueError("armijo backtracking factor must be in (0, 1)")
        if self.tikhonov_eps < 0:
            raise ValueError("tikhonov_eps must be >= 0")


@dataclass
class MotionBasis:
    """Motion parameterization for the u-update: per-slice dense field or
    6-parameter linearized rigid (3 translations + 3 infinitesimal
    rotations about a center)."""

    kind: str = "rigid"
    center: np.ndarray | None = None  # voxels on the level-0 grid

    def __post_init__(self):
        if self.kind not in ("rigid", "dense"):
            raise ValueError(f"basis kind must be rigid or dense, got {self.kind!r}")
        if self.center is not None:
            self.center = np.asarray(self.center, dtype=np.float64)


@dataclass
class SvrState:
    """Per-stack reconstructions and motions at the current pyramid level."""

    volumes: list
    motions: list
    level: int = 0
    objective_history: list = field(default_factory=list)


@dataclass
class ReconResult:
    motions: list  # per-stack MotionStack on the full-resolution lattice
    fused: Volume
    holes: np.ndarray
    report: dict


def cyclic_pairs(n: int) -> list[tuple[int, int]]:
    """Coupled reconstruction pairs: none for 1 stack, (0,1) for 2,
    the three cyclic pairs for 3."""
    if n <= 1:
        return []
    if n == 2:
        return [(0, 1)]
    return [(i, (i + 1) % n) for i in range(n)]


def _psf_for(stack: SliceStack) -> Psf:
    return boxcar_psf(stack.slab)


def _slice_terms(stack: SliceStack, motion: MotionStack, vol: Volume) -> np.ndarray:
    """Per-slice squared data residuals ||pull(v)_k - f_k||^2."""
    pred = pull_stack(vol.data, motion.data, motion.axis, motion.spacing,
                      _psf_for(stack))
    return np.array([float(((pred[k] - stack.data[k]) ** 2).sum())
                     for k in range(stack.K)])


def data_term(stack: SliceStack, motion: MotionStack, vol: Volume) -> float:
    return float(_slice_terms(stack, motion, vol).sum())


def coupling_term(volumes, lam: float) -> float:
    total = 0.0
    for i, j in cyclic_pairs(len(volumes)):
        d = volumes[i].data - volumes[j].data
        total += float(np.sum(d * d))
    return lam * total


def objective(state: SvrState, stacks, cfg: ReconConfig) -> float:
    """Quadratic SVR objective: per-stack data terms plus the pairwise
    coupling penalty (zero for a single stack)."""
    if len(state.volumes) != len(stacks) or len(state.motions) != len(stacks):
        raise GeometryError("state and stacks disagree on the stack count")
    total = sum(data_term(f, u, v)
                for f, u, v in zip(stacks, state.motions, state.volumes))
    return total + coupling_term(state.volumes, cfg.lam)


def _cg(matvec, b: np.ndarray, x0: np.ndarray, maxiter: int,
        tol: float) -> tuple[np.ndarray, int, float]:
    """Plain conjugate gradient on an SPD system, matrix-free."""
    x = x0.copy()
    r = b - matvec(x)
    p = r.copy()
    rs = float(r @ r)
    bnorm = float(np.sqrt(b @ b)) or 1.0
    it = 0
    while it < maxiter and np.sqrt(rs) > tol * bnorm:
        ap = matvec(p)
        pap = float(p @ ap)
        if pap <= 0:
            break
        alpha = rs / pap
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
        it += 1
    return x, it, float(np.sqrt(rs)) / bnorm


def v_update(stack: SliceStack, motion: MotionStack, v_bar: Volume,
             cfg: ReconConfig, coupling: float | None = None,
             x0: Volume | None = None) -> tuple[Volume, dict]:
    """Solve the volume normal equations for one stack by CG.

    coupling defaults to 2*lambda (the three-stack coupling coefficient);
    pass the stack's partner count times lambda otherwise. The coupling
    target v_bar also fixes the reconstruction grid.
    """
    c = 2.0 * cfg.lam if coupling is None else float(coupling)
    eps = cfg.tikhonov_eps if c == 0.0 else 0.0
    if c <= 0 and eps <= 0:
        raise ValueError("need coupling > 0 or tikhonov_eps > 0 for a "
                         "well-posed v-update")
    dims = v_bar.dims
    # the motion is fixed for the whole solve, so the pull operator is
    # assembled once and reused across CG iterations
    plan = WarpPlan(motion, _psf_for(stack), dims)

    def matvec(x):
        return plan.adjoint(plan.apply(x)) + (c + eps) * x

    rhs = plan.adjoint(stack.data.ravel()) + c * v_bar.ravel()
    start = v_bar if x0 is None else x0
    x, iters, resid = _cg(matvec, rhs, start.ravel(), cfg.cg_iters, cfg.cg_tol)
    info = {"iters": iters, "residual": resid,
            "converged": resid <= cfg.cg_tol}
    return Volume(x.reshape(dims, order="F"), v_bar.spacing), info


def _rigid_coeffs(g: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Project per-pixel gradients onto the 6 rigid generator fields:
    translations then infinitesimal rotations about the basis center."""
    a = np.empty((g.shape[0], 6))
    a[:, :3] = g
    a[:, 3] = -g[:, 1] * d[:, 2] + g[:, 2] * d[:, 1]
    a[:, 4] = g[:, 0] * d[:, 2] - g[:, 2] * d[:, 0]
    a[:, 5] = -g[:, 0] * d[:, 1] + g[:, 1] * d[:, 0]
    return a


def _rigid_field(delta: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Displacement field of a 6-vector of rigid coefficients."""
    du = np.empty((d.shape[0], 3))
    du[:, 0] = delta[0] + delta[4] * d[:, 2] - delta[5] * d[:, 1]
    du[:, 1] = delta[1] - delta[3] * d[:, 2] + delta[5] * d[:, 0]
    du[:, 2] = delta[2] + delta[3] * d[:, 1] - delta[4] * d[:, 0]
    return du


def u_update(stack: SliceStack, vol: Volume, motion: MotionStack,
             basis: MotionBasis, cfg: ReconConfig) -> tuple[MotionStack, dict]:
    """Per-slice Gauss-Newton motion steps against the current volume.

    The Jacobian is the exact derivative of the PSF-weighted trilinear
    pull at the current motion (the volume's spatial derivative sliced at
    the sample locations), so every step is a true descent direction of
    the per-slice data term. Returns the updated motion stack and a dict
    flagging slices that received no update (flat image region or failed
    backtrack).
    """
    psf = _psf_for(stack)
    axis, spacing = motion.axis, motion.spacing
    K, H, W = stack.data.shape
    center = basis.center
    if center is None:
        center = (np.asarray(vol.dims, dtype=np.float64) - 1.0) / 2.0
    base = pixel_coords(K, H, W, axis, spacing)
    new = motion.data.copy()
    flat_slices: list[int] = []
    stalled: list[int] = []

    def pull_k(vol_data, u_k, k):
        return pull_stack(vol_data, u_k[None], axis, spacing, psf,
                          first_slice=k)[0]

    for k in range(K):
        f_k = stack.data[k]
        d = (base[k].reshape(-1, 3) - center)
        for _ in range(cfg.gn_iters):
            u_k = new[k]
            pred = pull_k(vol.data, u_k, k)
            r = (f_k - pred).ravel()
            g = pull_jacobian(vol.data, u_k[None], axis, spacing, psf,
                              first_slice=k)[0].transpose(1, 2, 0).reshape(-1, 3)
            if basis.kind == "rigid":
                a = _rigid_coeffs(g, d)
                n_mat = a.T @ a
                tr = float(np.trace(n_mat))
                if tr <= 0:
                    flat_slices.append(k)
                    break
                mu = 1e-6 * tr / 6.0
                delta = np.linalg.solve(n_mat + mu * np.eye(6), a.T @ r)
                du = _rigid_field(delta, d)
            else:
                gsq = np.sum(g * g, axis=1)
                tr = float(gsq.sum())
                if tr <= 0:
                    flat_slices.append(k)
                    break
                mu = 1e-6 * tr / (3.0 * g.shape[0])
                du = g * (r / (mu + gsq))[:, None]
            cap = np.max(np.abs(du))
            if cap > cfg.step_max:
                du *= cfg.step_max / cap
            du = du.reshape(H, W, 3).transpose(2, 0, 1)
            cur = float(((f_k - pred) ** 2).sum())
            accepted = False
            for _ in range(25):
                cand = u_k + du
                val = float(((f_k - pull_k(vol.data, cand, k)) ** 2).sum())
                if val <= cur:
                    new[k] = cand
                    accepted = True
                    break
                du = du * cfg.armijo
            if not accepted:
                stalled.append(k)
                break
    out = MotionStack(new, spacing, axis, motion.slab)
    return out, {"flat_slices": sorted(set(flat_slices)),
                 "stalled_slices": sorted(set(stalled))}


def infer_grid_dims(stacks) -> tuple[int, int, int]:
    """Reconstruction grid implied by the stacks: in-plane extents fix the
    two transverse axes; a stack's own axis falls back to K * spacing."""
    dims: list[int | None] = [None, None, None]
    for s in stacks:
        ax = _AXIS_INDEX[s.axis]
        others = [a for a in range(3) if a != ax]
        H, W = s.in_plane
        for a, n in ((others[0], W), (others[1], H)):
            if dims[a] is None:
                dims[a] = n
            elif dims[a] != n:
                raise GeometryError(
                    f"stacks disagree on axis {a} extent: {dims[a]} vs {n}")
    for s in stacks:
        ax = _AXIS_INDEX[s.axis]
        if dims[ax] is None:
            dims[ax] = int(round(s.K * s.spacing))
    if any(d is None or d < 1 for d in dims):
        raise GeometryError(f"could not infer grid dims from stacks: {dims}")
    return tuple(dims)  # type: ignore[return-value]


def downsample_stack(s: SliceStack) -> SliceStack:
    """Halve a stack in-plane; slice spacing and slab halve with the grid."""
    data = block_mean2(s.data, (1, 2))
    return SliceStack(data, s.spacing / 2.0, s.axis, max(1, s.slab // 2))


def upsample_motion(m: MotionStack, H: int, W: int, spacing: float,
                    slab: int) -> MotionStack:
    """Motion initialization for the next finer level: bilinear in-plane
    interpolation at the half-voxel-aligned fine lattice, displacements
    doubled to fine-voxel units."""
    Hc, Wc = m.in_plane
    hc = np.clip((np.arange(H, dtype=np.float64) - 0.5) / 2.0, 0, Hc - 1)
    wc = np.clip((np.arange(W, dtype=np.float64) - 0.5) / 2.0, 0, Wc - 1)
    h0 = np.floor(hc).astype(np.int64)
    w0 = np.floor(wc).astype(np.int64)
    h1 = np.minimum(h0 + 1, Hc - 1)
    w1 = np.minimum(w0 + 1, Wc - 1)
    fh = (hc - h0)[None, None, :, None]
    fw = (wc - w0)[None, None, None, :]
    d = m.data
    out = ((1 - fh) * (1 - fw) * d[:, :, h0[:, None], w0[None, :]]
           + (1 - fh) * fw * d[:, :, h0[:, None], w1[None, :]]
           + fh * (1 - fw) * d[:, :, h1[:, None], w0[None, :]]
           + fh * fw * d[:, :, h1[:, None], w1[None, :]])
    return MotionStack(2.0 * out, spacing, m.axis, slab)


def _scale_center(center: np.ndarray, level: int) -> np.ndarray:
    # voxel-center mapping p_L = (p_0 - (2^L - 1)/2) / 2^L
    f = float(2**level)
    return (center - (f - 1.0) / 2.0) / f


def fuse_stacks(stacks, motions, dims, eps: float) -> tuple[Volume, np.ndarray]:
    """Splat all stacks with their motions into one grid and normalize."""
    acc_v = np.zeros(int(np.prod(dims)))
    acc_w = np.zeros_like(acc_v)
    for s, m in zip(stacks, motions):
        v, w = push_stack(s.data, m.data, m.axis, m.spacing, _psf_for(s), dims)
        acc_v += v
        acc_w += w
    splat = SplatVolume(Volume(acc_v.reshape(dims, order="F")),
                        Volume(acc_w.reshape(dims, order="F")))
    return normalize_splat(splat, eps)


def _level_epe(motions, truth_motions, level: int, fine_geoms) -> list[dict]:
    out = []
    for i, (m, t) in enumerate(zip(motions, truth_motions)):
        full = m
        for lvl in range(level, 0, -1):
            H, W, spacing, slab = fine_geoms[i][lvl - 1]
            full = upsample_motion(full, H, W, spacing, slab)
        plain = epe(full, t, compensate=False)
        comp = epe(full, t, compensate=True)
        out.append({"stack": i, "epe": plain, "epe_compensated": comp})
    return out


def reconstruct(stacks, cfg: ReconConfig | None = None,
                basis: MotionBasis | None = None,
                dims: tuple[int, int, int] | None = None,
                truth_motions=None) -> ReconResult:
    """Coarse-to-fine block-coordinate-descent SVR over 1-3 stacks.

    Returns per-stack motion estimates on the input lattice, the fused
    (splat + normalize) volume with its hole mask, and a report holding
    the objective trace, CG residuals, per-level motion errors when truth
    is supplied, and timings.
    """
    cfg = cfg or ReconConfig()
    basis = basis or MotionBasis()
    if not 1 <= len(stacks) <= 3:
        raise GeometryError(f"need 1-3 stacks, got {len(stacks)}")
    dims0 = tuple(dims) if dims is not None else infer_grid_dims(stacks)
    dim_chain = pyramid_dims(dims0, cfg.levels)
    if min(dim_chain[-1]) < 4:
        raise GeometryError(
            f"coarsest level dims {dim_chain[-1]} fall below 4; reduce levels")

    n = len(stacks)
    coupling = (n - 1) * cfg.lam
    # per-stack, per-level geometry and data
    stack_pyr = []
    for s in stacks:
        levels = [s]
        for _ in range(cfg.levels - 1):
            levels.append(downsample_stack(levels[-1]))
        stack_pyr.append(levels)
    fine_geoms = [[(lv.in_plane[0], lv.in_plane[1], lv.spacing, lv.slab)
                   for lv in levels] for levels in stack_pyr]

    trace: list[dict] = []
    cg_log: list[dict] = []
    level_errors: list[dict] = []
    timings: list[dict] = []
    reverted = 0
    motions: list[MotionStack] = []

    for level in range(cfg.levels - 1, -1, -1):
        t0 = time.perf_counter()
        ldims = dim_chain[level]
        lstacks = [pyr[level] for pyr in stack_pyr]
        if level == cfg.levels - 1:
            motions = [zero_motion(s.K, *s.in_plane, s.spacing, s.axis, s.slab)
                       for s in lstacks]
        else:
            motions = [upsample_motion(m, s.in_plane[0], s.in_plane[1],
                                       s.spacing, s.slab)
                       for m, s in zip(motions, lstacks)]
        volumes = []
        for s, m in zip(lstacks, motions):
            splat = splat_push(s, m, _psf_for(s), ldims)
            vol, _ = normalize_splat(splat, cfg.splat_eps)
            volumes.append(vol)
        lcenter = (basis.center if basis.center is None
                   else _scale_center(basis.center, level))
        lbasis = MotionBasis(basis.kind, lcenter)
        state = SvrState(volumes, motions, level)
        # per-stack data terms are cached so each block step re-pulls only
        # the stack it touched
        terms = [data_term(f, u, v)
                 for f, u, v in zip(lstacks, motions, volumes)]
        coup = coupling_term(volumes, cfg.lam)
        obj = sum(terms) + coup
        state.objective_history.append(obj)
        trace.append({"level": level, "sweep": -1, "stack": -1,
                      "step": "init", "objective": obj, "accepted": True})

        def record(sweep, i, step, value, accepted):
            trace.append({"level": level, "sweep": sweep, "stack": i,
                          "step": step, "objective": value,
                          "accepted": accepted})

        for sweep in range(cfg.outer_iters):
            for i in range(n):
                if n > 1:
                    others = [volumes[j].data for j in range(n) if j != i]
                    v_bar = Volume(np.mean(others, axis=0))
                else:
                    v_bar = volumes[i]
                v_new, cg_info = v_update(lstacks[i], motions[i], v_bar, cfg,
                                          coupling=coupling, x0=volumes[i])
                cg_log.append({"level": level, "sweep": sweep, "stack": i,
                               **cg_info})
                term_new = data_term(lstacks[i], motions[i], v_new)
                old_v = volumes[i]
                volumes[i] = v_new
                coup_new = coupling_term(volumes, cfg.lam)
                obj_new = sum(terms[:i]) + term_new + sum(terms[i + 1:]) + coup_new
                if obj_new > obj:
                    volumes[i] = old_v
                    reverted += 1
                    record(sweep, i, "v", obj, False)
                else:
                    terms[i], coup, obj = term_new, coup_new, obj_new
                    state.objective_history.append(obj)
                    record(sweep, i, "v", obj, True)

                u_new, _ = u_update(lstacks[i], volumes[i], motions[i],
                                    lbasis, cfg)
                term_new = data_term(lstacks[i], u_new, volumes[i])
                obj_new = sum(terms[:i]) + term_new + sum(terms[i + 1:]) + coup
                if obj_new > obj:
                    reverted += 1
                    record(sweep, i, "u", obj, False)
                else:
                    motions[i] = u_new
                    terms[i], obj = term_new, obj_new
                    state.objective_history.append(obj)
                    record(sweep, i, "u", obj, True)

        if truth_motions is not None:
            for entry in _level_epe(motions, truth_motions, level, fine_geoms):
                level_errors.append({"level": level, **entry})
        timings.append({"level": level,
                        "seconds": time.perf_counter() - t0})

    fused, holes = fuse_stacks(stacks, motions, dims0, cfg.splat_eps)
    report = {
        "dims": list(dims0),
        "levels": cfg.levels,
        "stacks": n,
        "objective_trace": trace,
        "cg": cg_log,
        "level_errors": level_errors,
        "timings": timings,
        "reverted_steps": reverted,
        "hole_voxels": int(holes.sum()),
        "hole_fraction": float(holes.mean()),
    }
    return ReconResult(motions, fused, holes, report)
