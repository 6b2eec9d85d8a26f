"""Numba lane of the multi-resolution hash-grid lookup."""

import numpy as np
from numba import njit

P1 = np.uint64(2654435761)
P2 = np.uint64(805459861)


@njit(cache=True, inline="always")
def _corner_index(ix, iy, iz, res, dense, mask):
    if dense:
        side = res + 1
        return ix + side * (iy + side * iz)
    h = np.uint64(ix) ^ (np.uint64(iy) * P1) ^ (np.uint64(iz) * P2)
    return np.int64(h & mask)


@njit(cache=True)
def encode_forward(tables, res_levels, dense_levels, positions, out):
    L, T, F = tables.shape
    P = positions.shape[0]
    mask = np.uint64(T - 1)
    for lv in range(L):
        res = res_levels[lv]
        dense = dense_levels[lv]
        base = lv * F
        for p in range(P):
            fx = min(max(positions[p, 0], 0.0), 1.0) * res
            fy = min(max(positions[p, 1], 0.0), 1.0) * res
            fz = min(max(positions[p, 2], 0.0), 1.0) * res
            ix = min(np.int64(fx), res - 1)
            iy = min(np.int64(fy), res - 1)
            iz = min(np.int64(fz), res - 1)
            tx = fx - ix
            ty = fy - iy
            tz = fz - iz
            for cz in range(2):
                wz = tz if cz == 1 else 1.0 - tz
                for cy in range(2):
                    wy = ty if cy == 1 else 1.0 - ty
                    for cx in range(2):
                        wx = tx if cx == 1 else 1.0 - tx
                        w = wx * wy * wz
                        idx = _corner_index(ix + cx, iy + cy, iz + cz,
                                            res, dense, mask)
                        for f in range(F):
                            out[p, base + f] += w * tables[lv, idx, f]


@njit(cache=True)
def encode_backward(tables, res_levels, dense_levels, positions, upstream,
                    d_tables, d_pos):
    L, T, F = tables.shape
    P = positions.shape[0]
    mask = np.uint64(T - 1)
    for lv in range(L):
        res = res_levels[lv]
        dense = dense_levels[lv]
        base = lv * F
        for p in range(P):
            x = positions[p, 0]
            y = positions[p, 1]
            z = positions[p, 2]
            inx = 1.0 if 0.0 <= x <= 1.0 else 0.0
            iny = 1.0 if 0.0 <= y <= 1.0 else 0.0
            inz = 1.0 if 0.0 <= z <= 1.0 else 0.0
            fx = min(max(x, 0.0), 1.0) * res
            fy = min(max(y, 0.0), 1.0) * res
            fz = min(max(z, 0.0), 1.0) * res
            ix = min(np.int64(fx), res - 1)
            iy = min(np.int64(fy), res - 1)
            iz = min(np.int64(fz), res - 1)
            tx = fx - ix
            ty = fy - iy
            tz = fz - iz
            for cz in range(2):
                wz = tz if cz == 1 else 1.0 - tz
                sz = 1.0 if cz == 1 else -1.0
                for cy in range(2):
                    wy = ty if cy == 1 else 1.0 - ty
                    sy = 1.0 if cy == 1 else -1.0
                    for cx in range(2):
                        wx = tx if cx == 1 else 1.0 - tx
                        sx = 1.0 if cx == 1 else -1.0
                        w = wx * wy * wz
                        idx = _corner_index(ix + cx, iy + cy, iz + cz,
                                            res, dense, mask)
                        dot = 0.0
                        for f in range(F):
                            g = upstream[p, base + f]
                            d_tables[lv, idx, f] += w * g
                            dot += g * tables[lv, idx, f]
                        d_pos[p, 0] += dot * sx * wy * wz * res * inx
                        d_pos[p, 1] += dot * wx * sy * wz * res * iny
                        d_pos[p, 2] += dot * wx * wy * sz * res * inz
