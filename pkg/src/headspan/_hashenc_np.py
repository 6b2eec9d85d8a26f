"""Pure-numpy lane of the multi-resolution hash-grid lookup."""

import numpy as np

P1 = np.uint64(2654435761)
P2 = np.uint64(805459861)

_CORNERS = np.array(
    [[cx, cy, cz] for cz in (0, 1) for cy in (0, 1) for cx in (0, 1)],
    dtype=np.int64,
)


def _level_setup(positions, res):
    f = np.clip(positions, 0.0, 1.0) * res
    i0 = np.minimum(f.astype(np.int64), res - 1)
    t = f - i0
    corners = i0[:, None, :] + _CORNERS[None, :, :]       # (P, 8, 3)
    w3 = np.where(_CORNERS[None, :, :] == 1, t[:, None, :],
                  1.0 - t[:, None, :])                    # (P, 8, 3)
    return corners, w3, t


def _corner_hash(corners, res, dense, table_size):
    if dense:
        side = res + 1
        return (corners[..., 0] + side * (corners[..., 1] + side * corners[..., 2]))
    c = corners.astype(np.uint64)
    h = c[..., 0] ^ (c[..., 1] * P1) ^ (c[..., 2] * P2)
    return (h & np.uint64(table_size - 1)).astype(np.int64)


def encode_forward(tables, res_levels, dense_levels, positions, out):
    L, T, F = tables.shape
    for lv in range(L):
        res = int(res_levels[lv])
        corners, w3, _ = _level_setup(positions, res)
        idx = _corner_hash(corners, res, bool(dense_levels[lv]), T)
        feats = tables[lv][idx]                           # (P, 8, F)
        w = w3.prod(axis=-1)                              # (P, 8)
        out[:, lv * F:(lv + 1) * F] += np.einsum("pc,pcf->pf", w, feats)


def encode_backward(tables, res_levels, dense_levels, positions, upstream,
                    d_tables, d_pos):
    L, T, F = tables.shape
    inside = ((positions >= 0.0) & (positions <= 1.0)).astype(np.float64)
    signs = np.where(_CORNERS == 1, 1.0, -1.0)            # (8, 3)
    for lv in range(L):
        res = int(res_levels[lv])
        corners, w3, _ = _level_setup(positions, res)
        idx = _corner_hash(corners, res, bool(dense_levels[lv]), T)
        feats = tables[lv][idx]                           # (P, 8, F)
        w = w3.prod(axis=-1)
        g = upstream[:, lv * F:(lv + 1) * F]              # (P, F)
        np.add.at(d_tables[lv], idx.ravel(),
                  (w[..., None] * g[:, None, :]).reshape(-1, F))
        dot = np.einsum("pcf,pf->pc", feats, g)           # (P, 8)
        # d w / d t_axis = sign_axis * product of the other two axis weights
        other = np.empty_like(w3)
        other[..., 0] = w3[..., 1] * w3[..., 2]
        other[..., 1] = w3[..., 0] * w3[..., 2]
        other[..., 2] = w3[..., 0] * w3[..., 1]
        dt = np.einsum("pc,pcx->px", dot, signs[None, :, :] * other)
        d_pos += dt * res * inside
