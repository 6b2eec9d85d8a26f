"""Numba lane of the z-buffer triangle rasterizer."""

import numpy as np
from numba import njit


@njit(cache=True)
def rasterize(px, py, z, tris, H, W, zbuf, face_id):
    """px/py: (V,) screen coords; z: (V,) camera depth; tris: (F, 3).

    Depth is interpolated perspective-correctly (1/z is linear in screen
    space); the winning triangle index lands in ``face_id``. Triangles
    with any vertex at z <= 1e-6 are skipped.
    """
    F = tris.shape[0]
    for f in range(F):
        i0 = tris[f, 0]
        i1 = tris[f, 1]
        i2 = tris[f, 2]
        z0 = z[i0]
        z1 = z[i1]
        z2 = z[i2]
        if z0 <= 1e-6 or z1 <= 1e-6 or z2 <= 1e-6:
            continue
        x0 = px[i0]
        y0 = py[i0]
        x1 = px[i1]
        y1 = py[i1]
        x2 = px[i2]
        y2 = py[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        xmin = max(int(np.floor(min(x0, min(x1, x2)))), 0)
        xmax = min(int(np.ceil(max(x0, max(x1, x2)))) + 1, W)
        ymin = max(int(np.floor(min(y0, min(y1, y2)))), 0)
        ymax = min(int(np.ceil(max(y0, max(y1, y2)))) + 1, H)
        iz0 = 1.0 / z0
        iz1 = 1.0 / z1
        iz2 = 1.0 / z2
        inv_area = 1.0 / area
        for iy in range(ymin, ymax):
            cyp = iy + 0.5
            for ix in range(xmin, xmax):
                cxp = ix + 0.5
                w0 = ((x1 - cxp) * (y2 - cyp) - (x2 - cxp) * (y1 - cyp)) * inv_area
                w1 = ((x2 - cxp) * (y0 - cyp) - (x0 - cxp) * (y2 - cyp)) * inv_area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                iz = w0 * iz0 + w1 * iz1 + w2 * iz2
                d = 1.0 / iz
                if d < zbuf[iy, ix]:
                    zbuf[iy, ix] = d
                    face_id[iy, ix] = f
