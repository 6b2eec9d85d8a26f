"""Pure-numpy lane of the z-buffer triangle rasterizer (loop over
triangles, vectorized over each screen bounding box)."""

import numpy as np


def rasterize(px, py, z, tris, H, W, zbuf, face_id):
    F = tris.shape[0]
    for f in range(F):
        i0, i1, i2 = tris[f]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        if z0 <= 1e-6 or z1 <= 1e-6 or z2 <= 1e-6:
            continue
        x0, y0 = px[i0], py[i0]
        x1, y1 = px[i1], py[i1]
        x2, y2 = px[i2], py[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        xmin = max(int(np.floor(min(x0, x1, x2))), 0)
        xmax = min(int(np.ceil(max(x0, x1, x2))) + 1, W)
        ymin = max(int(np.floor(min(y0, y1, y2))), 0)
        ymax = min(int(np.ceil(max(y0, y1, y2))) + 1, H)
        if xmin >= xmax or ymin >= ymax:
            continue
        cxp = np.arange(xmin, xmax) + 0.5
        cyp = (np.arange(ymin, ymax) + 0.5)[:, None]
        inv_area = 1.0 / area
        w0 = ((x1 - cxp) * (y2 - cyp) - (x2 - cxp) * (y1 - cyp)) * inv_area
        w1 = ((x2 - cxp) * (y0 - cyp) - (x0 - cxp) * (y2 - cyp)) * inv_area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        if not inside.any():
            continue
        d = 1.0 / (w0 / z0 + w1 / z1 + w2 / z2)
        sub = np.s_[ymin:ymax, xmin:xmax]
        win = inside & (d < zbuf[sub])
        zbuf[sub] = np.where(win, d, zbuf[sub])
        face_id[sub] = np.where(win, f, face_id[sub])
