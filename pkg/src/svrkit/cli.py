"""Command-line interface: simulate -> reconstruct -> inpaint -> evaluate.

Every subcommand resolves its configuration from built-in defaults, then
an optional JSON config file (--config), then command-line flags (flags
win). Unknown config keys are rejected. Errors print one JSON object
``{"error": <type>, "message": <text>}`` to stderr and exit nonzero.

Thread count can be capped with --threads or the SVRKIT_THREADS
environment variable; outputs do not depend on it (all accumulations are
fixed-order).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, SvrkitError
from .grid import Volume
from .inpaint import fill_holes
from .metrics import MetricReport, ape, epe, motion_mse, psnr
from .simulate import SimConfig, rng_for, simulate_stack
from .solver import MotionBasis, ReconConfig, infer_grid_dims, reconstruct
from .warp import boxcar_psf, normalize_splat, splat_push

SIM_DEFAULTS = {
    "axis": "z",
    "seed": 0,
    "knots": None,
    "euler_max": 20.0,
    "trans_max": 26.0,
    "psf": 4,
    "stride": 4,
    "noise": 0.01,
    "gamma_lo": 0.9,
    "gamma_hi": 1.0,
    "interleave": True,
}

RECON_DEFAULTS = {
    "lambda": 0.05,
    "levels": 3,
    "outer_iters": 5,
    "cg_iters": 40,
    "cg_tol": 1e-6,
    "gn_iters": 2,
    "step_max": 2.0,
    "armijo": 0.5,
    "tikhonov_eps": 1e-8,
    "splat_eps": 1e-3,
    "basis": "rigid",
}

SPLAT_DEFAULTS = {"eps": 1e-3}
INPAINT_DEFAULTS = {"passes": 1}
EVAL_DEFAULTS = {"units": "voxels", "peak": None, "spacing": None}


class CliError(SvrkitError):
    """Bad command line or config input."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures through JSON output
        raise CliError(message)


def _resolve(defaults: dict, config_path, overrides: dict) -> dict:
    cfg = dict(defaults)
    if config_path:
        doc = io.read_json(config_path)
        if not isinstance(doc, dict):
            raise ConfigError(f"{config_path}: config must be a JSON object")
        unknown = sorted(set(doc) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(doc)
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val
    return cfg


def _limit_threads(n: int | None):
    if n is None:
        env = os.environ.get("SVRKIT_THREADS")
        n = int(env) if env else None
    if n is None:
        return
    if n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=n)
    except ImportError:
        pass  # pure-numpy kernels are single-threaded anyway


def _parse_dims(text: str) -> tuple[int, int, int]:
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError as e:
        raise CliError(f"bad --dims {text!r}: {e}") from e
    if len(parts) != 3 or min(parts) < 1:
        raise CliError(f"bad --dims {text!r}: need three positive integers")
    return tuple(parts)


def _mask_from(path) -> np.ndarray:
    return io.read_nifti(path).data > 0.5


def cmd_simulate(args) -> int:
    cfg = _resolve(SIM_DEFAULTS, args.config, {
        "axis": args.axis, "seed": args.seed, "knots": args.knots,
        "euler_max": args.euler_max, "trans_max": args.trans_max,
        "psf": args.psf, "stride": args.stride, "noise": args.noise,
        "gamma_lo": args.gamma_lo, "gamma_hi": args.gamma_hi,
        "interleave": args.interleave,
    })
    vol = io.read_nifti(args.infile)
    sim = SimConfig(knots=cfg["knots"], euler_max=cfg["euler_max"],
                    trans_max=cfg["trans_max"], psf_width=cfg["psf"],
                    stride=cfg["stride"], noise_sigma=cfg["noise"],
                    gamma_range=(cfg["gamma_lo"], cfg["gamma_hi"]),
                    interleave=bool(cfg["interleave"]), seed=cfg["seed"])
    stack, motion, _ = simulate_stack(vol, sim, axis=cfg["axis"],
                                      rng=rng_for(cfg["seed"]))
    io.write_nifti(args.out_stack, io.stack_to_volume(stack, vol.spacing))
    io.write_motion(args.out_motion, motion)
    sidecar = args.sidecar or Path(args.out_stack).with_suffix(".json")
    io.write_json(sidecar, io.stack_sidecar(stack, vol.dims, vol.spacing, cfg))
    return 0


def _load_stacks(paths, sidecars):
    if sidecars and len(sidecars) != len(paths):
        raise CliError("--geometry must be given once per --stack")
    stacks, docs = [], []
    for i, p in enumerate(paths):
        side = sidecars[i] if sidecars else None
        stack, doc = io.read_stack(p, side)
        stacks.append(stack)
        docs.append(doc)
    return stacks, docs


def cmd_reconstruct(args) -> int:
    cfg = _resolve(RECON_DEFAULTS, args.config, {
        "lambda": getattr(args, "lam"), "levels": args.levels,
        "outer_iters": args.outer_iters, "cg_iters": args.cg_iters,
        "cg_tol": args.cg_tol, "gn_iters": args.gn_iters,
        "step_max": args.step_max, "armijo": args.armijo,
        "tikhonov_eps": args.tikhonov_eps, "splat_eps": args.splat_eps,
        "basis": args.basis,
    })
    stacks, docs = _load_stacks(args.stack, args.geometry)
    if args.dims:
        dims = _parse_dims(args.dims)
    else:
        grid_dims = {tuple(d["grid_dims"]) for d in docs if "grid_dims" in d}
        if len(grid_dims) > 1:
            raise ConfigError(f"stack sidecars disagree on grid dims: "
                              f"{sorted(grid_dims)}")
        dims = grid_dims.pop() if grid_dims else infer_grid_dims(stacks)
    truth = None
    if args.truth_motion:
        if len(args.truth_motion) != len(stacks):
            raise CliError("--truth-motion must be given once per --stack")
        truth = [io.read_motion(p) for p in args.truth_motion]
    rc = ReconConfig(lam=cfg["lambda"], levels=cfg["levels"],
                     outer_iters=cfg["outer_iters"], cg_iters=cfg["cg_iters"],
                     cg_tol=cfg["cg_tol"], gn_iters=cfg["gn_iters"],
                     step_max=cfg["step_max"], armijo=cfg["armijo"],
                     tikhonov_eps=cfg["tikhonov_eps"],
                     splat_eps=cfg["splat_eps"])
    basis = MotionBasis(cfg["basis"])
    result = reconstruct(stacks, rc, basis, dims=dims, truth_motions=truth)
    spacing_mm = docs[0].get("spacing_mm", 1.0) if docs else 1.0
    if args.out_volume:
        io.write_nifti(args.out_volume, Volume(result.fused.data, spacing_mm))
    if args.out_motion_prefix:
        for i, m in enumerate(result.motions):
            io.write_motion(f"{args.out_motion_prefix}_{i}.svrm", m)
    if args.out_holes:
        io.write_nifti(args.out_holes,
                       Volume(result.holes.astype(np.float64), spacing_mm))
    result.report["config"] = cfg
    if truth is not None:
        final = [e for e in result.report["level_errors"] if e["level"] == 0]
        result.report["final_epe_compensated"] = (
            float(np.mean([e["epe_compensated"] for e in final]))
            if final else None)
    if args.report:
        from .report import write_report
        write_report(args.report, result.report)
    return 0


def cmd_splat(args) -> int:
    cfg = _resolve(SPLAT_DEFAULTS, args.config, {"eps": args.eps})
    stack, doc = io.read_stack(args.stack, args.geometry)
    motion = io.read_motion(args.motion)
    if args.dims:
        dims = _parse_dims(args.dims)
    elif "grid_dims" in doc:
        dims = tuple(doc["grid_dims"])
    else:
        dims = infer_grid_dims([stack])
    splat = splat_push(stack, motion, boxcar_psf(stack.slab), dims)
    vol, holes = normalize_splat(splat, cfg["eps"])
    spacing_mm = doc.get("spacing_mm", 1.0)
    io.write_nifti(args.out, Volume(vol.data, spacing_mm))
    if args.out_weights:
        io.write_nifti(args.out_weights,
                       Volume(splat.weights.data, spacing_mm))
    if args.out_holes:
        io.write_nifti(args.out_holes,
                       Volume(holes.astype(np.float64), spacing_mm))
    return 0


def cmd_inpaint(args) -> int:
    cfg = _resolve(INPAINT_DEFAULTS, args.config, {"passes": args.passes})
    vol = io.read_nifti(args.infile)
    holes = _mask_from(args.holes)
    out = fill_holes(vol, holes, passes=cfg["passes"])
    io.write_nifti(args.out, out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve(EVAL_DEFAULTS, args.config, {
        "units": args.units, "peak": args.peak, "spacing": args.spacing,
    })
    u = io.read_motion(args.motion)
    v = io.read_motion(args.truth_motion)
    mask = None
    if args.mask:
        m = _mask_from(args.mask)
        if m.shape != (u.in_plane[1], u.in_plane[0], u.K):
            raise ConfigError(
                f"mask dims {m.shape} do not match the stack lattice "
                f"(W,H,K) = {(u.in_plane[1], u.in_plane[0], u.K)}")
        mask = m.transpose(2, 1, 0).ravel()  # back to (K,H,W) order
    report = MetricReport(
        mse=motion_mse(u, v, mask),
        epe=epe(u, v, mask, compensate=False),
        epe_compensated=epe(u, v, mask, compensate=True),
        ape=ape(u, v),
    )
    spacing_mm = cfg["spacing"]
    if args.volume and args.truth_volume:
        vol = io.read_nifti(args.volume)
        tvol = io.read_nifti(args.truth_volume)
        report.psnr_volume = psnr(vol, tvol, peak=cfg["peak"])
        if spacing_mm is None:
            spacing_mm = tvol.spacing
    if args.stack and args.truth_stack:
        s = io.read_nifti(args.stack)
        t = io.read_nifti(args.truth_stack)
        report.psnr_slices = psnr(s.data, t.data, peak=cfg["peak"])
    if cfg["units"] == "mm":
        sp = float(spacing_mm if spacing_mm is not None else 1.0)
        report.mse *= sp * sp
        report.epe *= sp
        report.epe_compensated *= sp
        report.ape *= sp
    elif cfg["units"] != "voxels":
        raise ConfigError(f"units must be voxels or mm, got {cfg['units']!r}")
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_formats(_args) -> int:
    print(io.format_spec())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (flags override)")
    common.add_argument("--threads", type=int, default=None,
                        help="thread cap (env SVRKIT_THREADS also honored); "
                             "results are independent of it")

    p = _Parser(prog="svrkit",
                description="slice-to-volume reconstruction toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common],
                       help="simulate a motion-corrupted stack from a volume")
    s.add_argument("--in", dest="infile", required=True, help="input .nii")
    s.add_argument("--out-stack", required=True, help="output stack .nii")
    s.add_argument("--out-motion", required=True,
                   help="output ground-truth motion .svrm")
    s.add_argument("--sidecar", help="sidecar JSON path "
                                     "(default: out-stack with .json)")
    s.add_argument("--axis", choices=("x", "y", "z"), default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--knots", type=int, default=None,
                   help="trajectory control points (default: drawn 32-64)")
    s.add_argument("--euler-max", type=float, default=None,
                   help="max |Euler angle| in degrees")
    s.add_argument("--trans-max", type=float, default=None,
                   help="max |translation| in voxels")
    s.add_argument("--psf", type=int, default=None,
                   help="boxcar PSF width in voxels")
    s.add_argument("--stride", type=int, default=None,
                   help="slice sampling stride in voxels")
    s.add_argument("--noise", type=float, default=None,
                   help="Gaussian noise sigma")
    s.add_argument("--gamma-lo", type=float, default=None)
    s.add_argument("--gamma-hi", type=float, default=None)
    s.add_argument("--interleave", action=argparse.BooleanOptionalAction,
                   default=None, help="two-shot slice interleaving")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reconstruct", parents=[common],
                       help="reconstruct a volume from 1-3 stacks")
    r.add_argument("--stack", action="append", required=True,
                   help="stack .nii (repeat for each stack)")
    r.add_argument("--geometry", action="append",
                   help="sidecar JSON per stack (default: stack with .json)")
    r.add_argument("--truth-motion", action="append",
                   help="ground-truth .svrm per stack, enables motion errors "
                        "in the report")
    r.add_argument("--dims", help="grid dims NX,NY,NZ (default: sidecar)")
    r.add_argument("--out-volume", help="fused volume .nii")
    r.add_argument("--out-motion-prefix",
                   help="writes <prefix>_<i>.svrm per stack")
    r.add_argument("--out-holes", help="hole mask .nii (0/1)")
    r.add_argument("--report",
                   help="report JSON path; a .csv trace and .png figure are "
                        "written beside it")
    r.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="coupling weight")
    r.add_argument("--levels", type=int, default=None)
    r.add_argument("--outer-iters", type=int, default=None)
    r.add_argument("--cg-iters", type=int, default=None)
    r.add_argument("--cg-tol", type=float, default=None)
    r.add_argument("--gn-iters", type=int, default=None)
    r.add_argument("--step-max", type=float, default=None)
    r.add_argument("--armijo", type=float, default=None)
    r.add_argument("--tikhonov-eps", type=float, default=None)
    r.add_argument("--splat-eps", type=float, default=None)
    r.add_argument("--basis", choices=("rigid", "dense"), default=None)
    r.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("splat", parents=[common],
                        help="splat one stack into a volume and normalize")
    sp.add_argument("--stack", required=True)
    sp.add_argument("--geometry", help="sidecar JSON (default: stack .json)")
    sp.add_argument("--motion", required=True, help="motion .svrm")
    sp.add_argument("--dims", help="grid dims NX,NY,NZ (default: sidecar)")
    sp.add_argument("--out", required=True, help="normalized volume .nii")
    sp.add_argument("--out-weights", help="accumulated weights .nii")
    sp.add_argument("--out-holes", help="hole mask .nii (0/1)")
    sp.add_argument("--eps", type=float, default=None,
                    help="hole threshold on accumulated weight")
    sp.set_defaults(func=cmd_splat)

    i = sub.add_parser("inpaint", parents=[common],
                       help="fill hole voxels in a reconstruction")
    i.add_argument("--in", dest="infile", required=True)
    i.add_argument("--holes", required=True, help="hole mask .nii (nonzero "
                                                  "voxels are filled)")
    i.add_argument("--out", required=True)
    i.add_argument("--passes", type=int, default=None)
    i.set_defaults(func=cmd_inpaint)

    e = sub.add_parser("evaluate", parents=[common],
                       help="motion/reconstruction metrics as JSON on stdout")
    e.add_argument("--motion", required=True, help="predicted .svrm")
    e.add_argument("--truth-motion", required=True, help="reference .svrm")
    e.add_argument("--volume", help="reconstruction .nii for psnr_volume")
    e.add_argument("--truth-volume", help="reference .nii for psnr_volume")
    e.add_argument("--stack", help="stack .nii for psnr_slices")
    e.add_argument("--truth-stack", help="reference stack .nii")
    e.add_argument("--mask", help="stack-lattice mask .nii for motion metrics")
    e.add_argument("--units", choices=("voxels", "mm"), default=None)
    e.add_argument("--peak", type=float, default=None, help="PSNR peak")
    e.add_argument("--spacing", type=float, default=None,
                   help="mm per voxel for --units mm")
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("formats", parents=[common],
                       help="print the on-disk format specification")
    f.set_defaults(func=cmd_formats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _limit_threads(getattr(args, "threads", None))
        return args.func(args)
    except (SvrkitError, OSError, ValueError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
