"""Numba lane of projective TSDF integration."""

import numpy as np
from numba import njit


@njit(cache=True)
def integrate(values, weights, depth, alpha, fx, fy, cx, cy, H, W,
              R, t, ox, oy, oz, voxel, trunc):
    nx, ny, nz = values.shape
    for ix in range(nx):
        wx = ox + (ix + 0.5) * voxel
        for iy in range(ny):
            wy = oy + (iy + 0.5) * voxel
            for iz in range(nz):
                wz = oz + (iz + 0.5) * voxel
                cz = R[2, 0] * wx + R[2, 1] * wy + R[2, 2] * wz + t[2]
                if cz <= 1e-6:
                    continue
                cxp = R[0, 0] * wx + R[0, 1] * wy + R[0, 2] * wz + t[0]
                cyp = R[1, 0] * wx + R[1, 1] * wy + R[1, 2] * wz + t[1]
                u = fx * cxp / cz + cx
                v = fy * cyp / cz + cy
                pu = int(np.floor(u))
                pv = int(np.floor(v))
                if pu < 0 or pu >= W or pv < 0 or pv >= H:
                    continue
                if alpha[pv, pu] < 0.5:
                    continue
                d = depth[pv, pu]
                if d <= 0.0:
                    continue
                sdf = d - cz
                if sdf < -trunc:
                    continue
                tsdf = sdf / trunc
                if tsdf > 1.0:
                    tsdf = 1.0
                w = weights[ix, iy, iz]
                values[ix, iy, iz] = (values[ix, iy, iz] * w + tsdf) / (w + 1.0)
                weights[ix, iy, iz] = w + 1.0
