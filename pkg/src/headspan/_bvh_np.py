"""Pure-python/numpy lane of the nearest-triangle BVH query.

Same traversal as the numba lane, with the leaf distance evaluation
vectorized per leaf.
"""

import numpy as np


def point_triangle_d2(points: np.ndarray, a, b, c) -> np.ndarray:
    """Squared distances from (P, 3) points to triangles (broadcastable).

    Uses plane projection when the foot lies inside the triangle and the
    minimum over the three clamped edge segments otherwise; robust to
    degenerate triangles.
    """
    ab = b - a
    ac = c - a
    n = np.cross(ab, ac)
    nn = np.sum(n * n, axis=-1)
    ap = points - a

    def seg_d2(p0, d):
        dd = np.sum(d * d, axis=-1)
        t = np.sum((points - p0) * d, axis=-1) / np.where(dd > 0, dd, 1.0)
        t = np.clip(np.where(dd > 0, t, 0.0), 0.0, 1.0)
        q = p0 + t[..., None] * d - points
        return np.sum(q * q, axis=-1)

    edge_min = np.minimum(
        seg_d2(a, ab), np.minimum(seg_d2(a, ac), seg_d2(b, c - b)))

    with np.errstate(divide="ignore", invalid="ignore"):
        # barycentric coordinates of the plane projection
        d00 = np.sum(ab * ab, axis=-1)
        d01 = np.sum(ab * ac, axis=-1)
        d11 = np.sum(ac * ac, axis=-1)
        d20 = np.sum(ap * ab, axis=-1)
        d21 = np.sum(ap * ac, axis=-1)
        denom = d00 * d11 - d01 * d01
        v = (d11 * d20 - d01 * d21) / denom
        w = (d00 * d21 - d01 * d20) / denom
        inside = (nn > 0) & (v >= 0) & (w >= 0) & (v + w <= 1)
        plane_d2 = np.sum(ap * n, axis=-1) ** 2 / np.where(nn > 0, nn, 1.0)
    return np.where(inside, plane_d2, edge_min)


def query_nearest(node_min, node_max, left, right, start, count, tri_order,
                  v0, v1, v2, points) -> np.ndarray:
    P = len(points)
    out = np.empty(P, dtype=np.int64)
    for p in range(P):
        pt = points[p]
        best = np.inf
        best_tri = -1
        stack = [0]
        while stack:
            node = stack.pop()
            dmin = np.maximum(node_min[node] - pt, 0.0)
            dmax = np.maximum(pt - node_max[node], 0.0)
            tol = 1e-10 * best + 1e-24
            if float(dmin @ dmin + dmax @ dmax) > best + tol:
                continue
            if left[node] < 0:
                s = start[node]
                tris = tri_order[s:s + count[node]]
                d2 = point_triangle_d2(pt, v0[tris], v1[tris], v2[tris])
                for k in range(len(tris)):
                    tri = int(tris[k])
                    tol = 1e-10 * best + 1e-24
                    # lowest index wins ties within a small relative band
                    if d2[k] < best - tol:
                        best = float(d2[k])
                        best_tri = tri
                    elif d2[k] <= best + tol:
                        if d2[k] < best:
                            best = float(d2[k])
                        if tri < best_tri or best_tri < 0:
                            best_tri = tri
            else:
                l, r = int(left[node]), int(right[node])
                # pop order: nearer child first
                dl = np.maximum(node_min[l] - pt, 0.0) @ np.maximum(
                    node_min[l] - pt, 0.0) + np.maximum(
                    pt - node_max[l], 0.0) @ np.maximum(pt - node_max[l], 0.0)
                dr = np.maximum(node_min[r] - pt, 0.0) @ np.maximum(
                    node_min[r] - pt, 0.0) + np.maximum(
                    pt - node_max[r], 0.0) @ np.maximum(pt - node_max[r], 0.0)
                if dl <= dr:
                    stack.append(r)
                    stack.append(l)
                else:
                    stack.append(l)
                    stack.append(r)
        out[p] = best_tri
    return out
