"""Numba lane of the nearest-triangle BVH query."""

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _tri_d2(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Squared distance from a point to a triangle (Ericson, RTCD)."""
    abx = bx - ax
    aby = by - ay
    abz = bz - az
    acx = cx - ax
    acy = cy - ay
    acz = cz - az
    apx = px - ax
    apy = py - ay
    apz = pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz
    bpx = px - bx
    bpy = py - by
    bpz = pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        qx = apx - t * abx
        qy = apy - t * aby
        qz = apz - t * abz
        return qx * qx + qy * qy + qz * qz
    cpx = px - cx
    cpy = py - cy
    cpz = pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cpx * cpx + cpy * cpy + cpz * cpz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        qx = apx - t * acx
        qy = apy - t * acy
        qz = apz - t * acz
        return qx * qx + qy * qy + qz * qz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and d4 - d3 >= 0.0 and d5 - d6 >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        qx = px - (bx + t * (cx - bx))
        qy = py - (by + t * (cy - by))
        qz = pz - (bz + t * (cz - bz))
        return qx * qx + qy * qy + qz * qz
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    qx = px - (ax + abx * v + acx * w)
    qy = py - (ay + aby * v + acy * w)
    qz = pz - (az + abz * v + acz * w)
    return qx * qx + qy * qy + qz * qz


@njit(cache=True, inline="always")
def _aabb_d2(px, py, pz, mn, mx, node):
    d = 0.0
    t = mn[node, 0] - px
    if t > 0.0:
        d += t * t
    t = px - mx[node, 0]
    if t > 0.0:
        d += t * t
    t = mn[node, 1] - py
    if t > 0.0:
        d += t * t
    t = py - mx[node, 1]
    if t > 0.0:
        d += t * t
    t = mn[node, 2] - pz
    if t > 0.0:
        d += t * t
    t = pz - mx[node, 2]
    if t > 0.0:
        d += t * t
    return d


@njit(cache=True)
def query_nearest(node_min, node_max, left, right, start, count, tri_order,
                  v0, v1, v2, points):
    P = points.shape[0]
    out = np.empty(P, dtype=np.int64)
    stack = np.empty(128, dtype=np.int64)
    for p in range(P):
        px = points[p, 0]
        py = points[p, 1]
        pz = points[p, 2]
        best = np.inf
        best_tri = -1
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            tol = 1e-10 * best + 1e-24
            if _aabb_d2(px, py, pz, node_min, node_max, node) > best + tol:
                continue
            if left[node] < 0:  # leaf
                s = start[node]
                for k in range(s, s + count[node]):
                    tri = tri_order[k]
                    d2 = _tri_d2(
                        px, py, pz,
                        v0[tri, 0], v0[tri, 1], v0[tri, 2],
                        v1[tri, 0], v1[tri, 1], v1[tri, 2],
                        v2[tri, 0], v2[tri, 1], v2[tri, 2])
                    # ties within a small relative band go to the lowest
                    # triangle index, robust to last-ulp formula noise
                    tol = 1e-10 * best + 1e-24
                    if d2 < best - tol:
                        best = d2
                        best_tri = tri
                    elif d2 <= best + tol:
                        if d2 < best:
                            best = d2
                        if tri < best_tri or best_tri < 0:
                            best_tri = tri
            else:
                l = left[node]
                r = right[node]
                dl = _aabb_d2(px, py, pz, node_min, node_max, l)
                dr = _aabb_d2(px, py, pz, node_min, node_max, r)
                # push the farther child first so the nearer is popped first
                if dl <= dr:
                    stack[top] = r
                    top += 1
                    stack[top] = l
                    top += 1
                else:
                    stack[top] = l
                    top += 1
                    stack[top] = r
                    top += 1
        out[p] = best_tri
    return out
