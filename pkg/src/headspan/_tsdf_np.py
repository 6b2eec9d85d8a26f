"""Pure-numpy lane of projective TSDF integration (vectorized over the
whole voxel grid per view)."""

import numpy as np


def integrate(values, weights, depth, alpha, fx, fy, cx, cy, H, W,
              R, t, ox, oy, oz, voxel, trunc):
    nx, ny, nz = values.shape
    gx, gy, gz = np.meshgrid(
        ox + (np.arange(nx) + 0.5) * voxel,
        oy + (np.arange(ny) + 0.5) * voxel,
        oz + (np.arange(nz) + 0.5) * voxel, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    cam = pts @ R.T + t
    cz = cam[:, 2]
    ok = cz > 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fx * cam[:, 0] / cz + cx
        v = fy * cam[:, 1] / cz + cy
    pu = np.floor(np.where(ok, u, -1)).astype(np.int64)
    pv = np.floor(np.where(ok, v, -1)).astype(np.int64)
    ok &= (pu >= 0) & (pu < W) & (pv >= 0) & (pv < H)
    pu = np.clip(pu, 0, W - 1)
    pv = np.clip(pv, 0, H - 1)
    ok &= alpha[pv, pu] >= 0.5
    d = depth[pv, pu]
    ok &= d > 0.0
    sdf = d - cz
    ok &= sdf >= -trunc
    tsdf = np.minimum(sdf / trunc, 1.0)
    vflat = values.reshape(-1)
    wflat = weights.reshape(-1)
    w = wflat[ok]
    vflat[ok] = (vflat[ok] * w + tsdf[ok]) / (w + 1.0)
    wflat[ok] = w + 1.0
