"""svrkit: slice-to-volume reconstruction toolkit.

Simulates motion-corrupted 2D slice stacks from 3D volumes, reconstructs
volumes from 1-3 stacks by classical alternating optimization over adjoint
splat/slice warps, fills splat holes, and evaluates motion/reconstruction
accuracy with rigid-motion-compensated metrics.
"""

from .errors import (AllHolesError, ConfigError, DegenerateFitError,
                     FormatError, GeometryError, SvrkitError)
from .grid import (CoordLattice, Pyramid, Volume, build_pyramid, coord_grid,
                   downsample2, gradient, volume_from_flat)
from .inpaint import fill_holes
from .metrics import MetricReport, ape, epe, motion_mse, psnr
from .rigid import (PolarFactors, RigidTransform, apply_rigid,
                    compensated_loss, fit_affine, polar_decompose)
from .simulate import (RigidParams, SimConfig, SliceTrajectory, acquire,
                       gen_trajectory, rasterize_motion, rng_for,
                       simulate_stack)
from .solver import (MotionBasis, ReconConfig, ReconResult, SvrState,
                     objective, reconstruct, u_update, v_update)
from .warp import (MotionStack, Psf, SliceStack, SplatVolume, boxcar_psf,
                   compose_motion, motion_like, normalize_splat, pixel_coords,
                   slice_pull, splat_push, stack_coords, zero_motion)

__version__ = "0.1.0"
