"""Independent oracle implementations used across the test suite.

Everything here is written as plain per-element loops so it shares no code
path with the package internals it checks.
"""

import numpy as np

AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


def pixel_coord(k, h, w, axis, spacing):
    """Nominal coordinate of stack pixel (k,h,w) as an (x,y,z) triple."""
    ax = AXIS_INDEX[axis]
    others = [a for a in range(3) if a != ax]
    q = [0.0, 0.0, 0.0]
    q[others[0]] = float(w)
    q[others[1]] = float(h)
    q[ax] = float(k) * spacing
    return np.array(q)


def psf_offsets(width):
    return [t - (width - 1) / 2.0 for t in range(width)]


def explicit_pull_matrix(dims, motion, psf_weights, axis, spacing):
    """Dense (n_pixels, n_voxels) matrix of the pull warp, built corner by
    corner. Voxel columns are x-fastest; pixel rows are (k,h,w) C-order.

    motion: (K, 3, H, W) displacement array.
    """
    nx, ny, nz = dims
    K, _, H, W = motion.shape
    width = len(psf_weights)
    offs = psf_offsets(width)
    ax = AXIS_INDEX[axis]
    M = np.zeros((K * H * W, nx * ny * nz))
    row = 0
    for k in range(K):
        for h in range(H):
            for w in range(W):
                disp = motion[k, :, h, w]
                for t in range(width):
                    q = pixel_coord(k, h, w, axis, spacing) + disp
                    q[ax] += offs[t]
                    i0 = np.floor(q).astype(int)
                    f = q - i0
                    for dx in (0, 1):
                        for dy in (0, 1):
                            for dz in (0, 1):
                                i, j, l = i0[0] + dx, i0[1] + dy, i0[2] + dz
                                if not (0 <= i < nx and 0 <= j < ny and 0 <= l < nz):
                                    continue
                                wgt = ((f[0] if dx else 1 - f[0])
                                       * (f[1] if dy else 1 - f[1])
                                       * (f[2] if dz else 1 - f[2]))
                                col = i + nx * (j + ny * l)
                                M[row, col] += psf_weights[t] * wgt
                row += 1
    return M


def explicit_pull_jacobian(vol, motion, psf_weights, axis, spacing):
    """Per-pixel derivative of the PSF-weighted trilinear pull wrt the
    pixel displacement, (K*H*W, 3), built corner by corner."""
    nx, ny, nz = vol.shape
    K, _, H, W = motion.shape
    offs = psf_offsets(len(psf_weights))
    ax = AXIS_INDEX[axis]
    out = np.zeros((K * H * W, 3))
    row = 0
    for k in range(K):
        for h in range(H):
            for w in range(W):
                disp = motion[k, :, h, w]
                for t, pw in zip(offs, psf_weights):
                    q = pixel_coord(k, h, w, axis, spacing) + disp
                    q[ax] += t
                    i0 = np.floor(q).astype(int)
                    f = q - i0
                    for dx in (0, 1):
                        for dy in (0, 1):
                            for dz in (0, 1):
                                i, j, l = i0[0] + dx, i0[1] + dy, i0[2] + dz
                                if not (0 <= i < nx and 0 <= j < ny and 0 <= l < nz):
                                    continue
                                wx = f[0] if dx else 1 - f[0]
                                wy = f[1] if dy else 1 - f[1]
                                wz = f[2] if dz else 1 - f[2]
                                sx = 1.0 if dx else -1.0
                                sy = 1.0 if dy else -1.0
                                sz = 1.0 if dz else -1.0
                                v = pw * vol[i, j, l]
                                out[row, 0] += v * sx * wy * wz
                                out[row, 1] += v * sy * wx * wz
                                out[row, 2] += v * sz * wx * wy
                row += 1
    return out


def random_motion(rng, K, H, W, amp):
    return rng.uniform(-amp, amp, size=(K, 3, H, W))


def blob_phantom(rng, n, n_blobs=6, sigma_range=(6.0, 12.0)):
    """Smooth random-blob volume in [0, 1] with signal everywhere."""
    x, y, z = np.meshgrid(*(np.arange(n, dtype=float),) * 3, indexing="ij")
    c = (n - 1) / 2.0
    data = 0.5 * np.exp(-((x - c) ** 2 + (y - c) ** 2 + (z - c) ** 2)
                        / (2 * (0.45 * n) ** 2))
    for _ in range(n_blobs):
        cx, cy, cz = rng.uniform(0.2 * n, 0.8 * n, size=3)
        s = rng.uniform(*sigma_range)
        a = rng.uniform(0.3, 1.0)
        data += a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2)
                           / (2 * s**2))
    return data / data.max()
