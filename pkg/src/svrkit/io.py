"""Bit-exact file formats: NIfTI-1 volumes and .svrm motion stacks.

Volumes are written as single-file NIfTI-1 (.nii), little-endian float32
(datatype 16), no compression, with the affine set to identity scaled by
the voxel spacing. The payload is x-fastest, matching the in-memory
convention of :class:`svrkit.grid.Volume`.

Motion stacks use a fixed custom layout (.svrm):

============  ====================================================
bytes         field
============  ====================================================
0..3          magic ``SVRM``
4..7          u32 version = 1
8..11         u32 K (slice count)
12..15        u32 H
16..19        u32 W
20..23        u32 axis (0 = x, 1 = y, 2 = z)
24..27        u32 slab (through-plane PSF support, voxels)
28..31        f32 slice spacing (reconstruction voxels)
32..          payload: K*3*H*W little-endian f32, slice-major then
              component-major (x, y, z) then row-major (h outer, w
              inner); displacements in reconstruction-voxel units
============  ====================================================

All integers are little-endian. Read-then-write and write-then-read
round trips are bit-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .grid import Volume
from .warp import AXES, MotionStack, SliceStack

_NII_HDR_SIZE = 348
_NII_FLOAT32 = 16
_SVRM_MAGIC = b"SVRM"
_SVRM_VERSION = 1
_SVRM_HEADER = struct.Struct("<4sIIIIIIf")


def write_nifti(path, vol: Volume):
    """Write a volume as single-file little-endian float32 NIfTI-1."""
    nx, ny, nz = vol.dims
    sp = float(vol.spacing)
    hdr = bytearray(_NII_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _NII_HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, _NII_FLOAT32, 32)  # datatype, bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, sp, sp, sp, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    hdr[123] = 2  # xyzt_units: millimeters
    struct.pack_into("<hh", hdr, 252, 0, 1)  # qform_code, sform_code
    struct.pack_into("<4f", hdr, 280, sp, 0.0, 0.0, 0.0)  # srow_x
    struct.pack_into("<4f", hdr, 296, 0.0, sp, 0.0, 0.0)  # srow_y
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sp, 0.0)  # srow_z
    hdr[344:348] = b"n+1\x00"
    payload = np.asarray(vol.data, dtype="<f4").tobytes(order="F")
    with open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00\x00\x00\x00")  # no extensions
        f.write(payload)


def read_nifti(path) -> Volume:
    """Read a single-file NIfTI-1 volume (little-endian, 3D)."""
    raw = Path(path).read_bytes()
    if len(raw) < _NII_HDR_SIZE + 4:
        raise FormatError(f"{path}: too short for a NIfTI-1 file")
    (size,) = struct.unpack_from("<i", raw, 0)
    if size != _NII_HDR_SIZE:
        raise FormatError(f"{path}: not little-endian NIfTI-1 "
                          f"(sizeof_hdr = {size})")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"{path}: bad NIfTI magic {magic!r}")
    if magic == b"ni1\x00":
        raise FormatError(f"{path}: two-file NIfTI (.hdr/.img) not supported")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise FormatError(f"{path}: expected 3D volume, got dim[0] = {dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    (datatype, bitpix) = struct.unpack_from("<hh", raw, 70)
    if datatype != _NII_FLOAT32 or bitpix != 32:
        raise FormatError(f"{path}: only float32 volumes supported "
                          f"(datatype {datatype}, bitpix {bitpix})")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    slope, inter = struct.unpack_from("<ff", raw, 112)
    off = int(vox_offset)
    n = nx * ny * nz
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
    arr = data.astype(np.float64).reshape((nx, ny, nz), order="F")
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr * (slope if slope != 0.0 else 1.0) + inter
    spacing = float(pixdim[1]) if pixdim[1] > 0 else 1.0
    return Volume(arr, spacing)


def write_motion(path, motion: MotionStack):
    """Write a motion stack in the .svrm layout."""
    K, H, W = motion.K, *motion.in_plane
    header = _SVRM_HEADER.pack(_SVRM_MAGIC, _SVRM_VERSION, K, H, W,
                               AXES.index(motion.axis), motion.slab,
                               float(motion.spacing))
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.asarray(motion.data, dtype="<f4").tobytes(order="C"))


def read_motion(path) -> MotionStack:
    """Read a .svrm motion stack."""
    raw = Path(path).read_bytes()
    if len(raw) < _SVRM_HEADER.size:
        raise FormatError(f"{path}: too short for an svrm file")
    magic, version, K, H, W, axis_idx, slab, spacing = _SVRM_HEADER.unpack_from(raw)
    if magic != _SVRM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _SVRM_VERSION:
        raise FormatError(f"{path}: unsupported svrm version {version}")
    if axis_idx not in (0, 1, 2):
        raise FormatError(f"{path}: bad axis code {axis_idx}")
    n = K * 3 * H * W
    if len(raw) != _SVRM_HEADER.size + 4 * n:
        raise FormatError(f"{path}: payload size mismatch "
                          f"({len(raw) - _SVRM_HEADER.size} bytes for "
                          f"{4 * n} expected)")
    data = np.frombuffer(raw, dtype="<f4", offset=_SVRM_HEADER.size, count=n)
    data = data.astype(np.float64).reshape(K, 3, H, W)
    return MotionStack(data, float(spacing), AXES[axis_idx], int(slab))


def stack_to_volume(stack: SliceStack, spacing_mm: float = 1.0) -> Volume:
    """Stack (K,H,W) stored as a NIfTI payload with (x,y,z) = (w,h,k)."""
    return Volume(stack.data.transpose(2, 1, 0), spacing_mm)


def volume_to_stack(vol: Volume, axis: str, spacing: float,
                    slab: int) -> SliceStack:
    """Inverse of stack_to_volume given the geometry from a sidecar."""
    return SliceStack(vol.data.transpose(2, 1, 0), spacing, axis, slab)


def stack_sidecar(stack: SliceStack, grid_dims, spacing_mm: float,
                  config: dict) -> dict:
    """Sidecar document describing a simulated stack."""
    return {
        "stack": {
            "K": stack.K,
            "H": stack.in_plane[0],
            "W": stack.in_plane[1],
            "axis": stack.axis,
            "spacing": float(stack.spacing),
            "slab": stack.slab,
        },
        "grid_dims": [int(d) for d in grid_dims],
        "spacing_mm": float(spacing_mm),
        "config": config,
    }


def write_json(path, doc: dict):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from e


def read_stack(nii_path, sidecar_path=None) -> tuple[SliceStack, dict]:
    """Load a stack volume plus its geometry sidecar.

    The sidecar defaults to the .nii path with a .json suffix.
    """
    nii_path = Path(nii_path)
    if sidecar_path is None:
        sidecar_path = nii_path.with_suffix(".json")
    doc = read_json(sidecar_path)
    try:
        geo = doc["stack"]
        stack = volume_to_stack(read_nifti(nii_path), geo["axis"],
                                float(geo["spacing"]), int(geo["slab"]))
    except KeyError as e:
        raise FormatError(f"{sidecar_path}: missing sidecar key {e}") from e
    if (stack.K, *stack.in_plane) != (geo["K"], geo["H"], geo["W"]):
        raise FormatError(
            f"{nii_path}: stack shape {(stack.K, *stack.in_plane)} does not "
            f"match sidecar {(geo['K'], geo['H'], geo['W'])}")
    return stack, doc


def format_spec() -> str:
    """Human-readable description of the on-disk formats."""
    return (
        "Volume format (.nii): single-file NIfTI-1, little-endian, datatype\n"
        "16 (float32), bitpix 32, no compression, vox_offset 352, sform set\n"
        "to identity scaled by the voxel spacing (srow_* diagonals), payload\n"
        "x-fastest (standard NIfTI order). Stacks are stored the same way\n"
        "with (x, y, z) = (w, h, k) for their natural axis layout; the\n"
        "sidecar JSON written next to a simulated stack records the stack\n"
        "geometry (axis, spacing, slab, K/H/W) and the resolved config.\n"
        "\n"
        "Motion format (.svrm), all little-endian:\n"
        "  bytes 0-3   magic 'SVRM'\n"
        "  bytes 4-7   u32 version = 1\n"
        "  bytes 8-11  u32 K  (slice count)\n"
        "  bytes 12-15 u32 H\n"
        "  bytes 16-19 u32 W\n"
        "  bytes 20-23 u32 axis (0=x, 1=y, 2=z)\n"
        "  bytes 24-27 u32 slab (through-plane PSF support, voxels)\n"
        "  bytes 28-31 f32 slice spacing (reconstruction voxels)\n"
        "  bytes 32-   payload K*3*H*W f32: slice-major, then component-\n"
        "              major in (x, y, z) order, then row-major (h, w);\n"
        "              displacements in reconstruction-grid voxel units.\n"
    )
