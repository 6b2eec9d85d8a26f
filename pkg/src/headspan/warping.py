"""Triangle-frame motion warping.

Each tracked frame deforms the template mesh; every surfel is assigned
its nearest canonical-template triangle and mapped by that triangle's
deformation gradient F = L_def . Lambda^-1 . L_canon^-1, a homogeneous
transform built from the per-triangle orthonormal frames and the
sqrt-area scale ratio. Orientations rotate by F's rotation block.
"""

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import InvalidParameterError
from .geometry import normalize, quat_from_rotmat, quat_mul
from .meshes import TriangleMesh
from .surfels import SurfelSet

MAX_AREA_SCALE = 100.0


def _query_kernel():
    if backend.active_backend() == "numba":
        from . import _bvh_nb as k
    else:
        from . import _bvh_np as k
    return k


@dataclass
class TriangleFrame:
    origin: np.ndarray   # anchor vertex v0
    axes: np.ndarray     # columns: tangent, bitangent, normal
    area: float
    degenerate: bool = False


def triangle_frame(v0, v1, v2) -> TriangleFrame:
    """Orthonormal frame anchored at v0: tangent along v1-v0, normal from
    the cross product, bitangent = normal x tangent."""
    v0 = np.asarray(v0, dtype=np.float64)
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    e0 = v1 - v0
    n = np.cross(e0, v2 - v0)
    nlen = np.linalg.norm(n)
    area = 0.5 * nlen
    if nlen < 1e-12:
        t = e0 / np.linalg.norm(e0) if np.linalg.norm(e0) > 1e-12 else np.array([1.0, 0.0, 0.0])
        nf = np.array([0.0, 0.0, 1.0])
        if abs(t @ nf) > 0.9:
            nf = np.array([0.0, 1.0, 0.0])
        nf = normalize(nf - t * (t @ nf))
        b = np.cross(nf, t)
        return TriangleFrame(v0, np.stack([t, b, nf], axis=-1), 0.0, True)
    t = e0 / np.linalg.norm(e0)
    nhat = n / nlen
    b = np.cross(nhat, t)
    return TriangleFrame(v0, np.stack([t, b, nhat], axis=-1), float(area))


def deformation_gradient(canon: TriangleFrame, deformed: TriangleFrame,
                         max_scale: float = MAX_AREA_SCALE) -> np.ndarray:
    """Homogeneous transform mapping canonical-frame points into the
    deformed frame, with isotropic sqrt-area scaling.

    s = sqrt(canon.area / deformed.area) is clamped to ``max_scale`` when
    the deformed triangle degenerates.
    """
    if canon.area <= 0:
        raise InvalidParameterError("canonical triangle must have area > 0")
    if deformed.area > 0:
        s = np.sqrt(canon.area / deformed.area)
        s = min(s, max_scale)
    else:
        s = max_scale
    M = (deformed.axes @ canon.axes.T) / s
    F = np.eye(4)
    F[:3, :3] = M
    F[:3, 3] = deformed.origin - M @ canon.origin
    return F


def _mesh_frames(mesh: TriangleMesh):
    """Vectorized per-triangle frames: origins, axes (F,3,3), areas."""
    v0, v1, v2 = mesh.corners()
    e0 = v1 - v0
    n = np.cross(e0, v2 - v0)
    nlen = np.linalg.norm(n, axis=-1)
    areas = 0.5 * nlen
    bad = nlen < 1e-12
    t = np.where(
        np.linalg.norm(e0, axis=-1, keepdims=True) > 1e-12,
        e0 / np.maximum(np.linalg.norm(e0, axis=-1, keepdims=True), 1e-300),
        [1.0, 0.0, 0.0])
    nhat = np.where(bad[:, None], [0.0, 0.0, 1.0],
                    n / np.maximum(nlen[:, None], 1e-300))
    b = np.cross(nhat, t)
    axes = np.stack([t, b, nhat], axis=-1)
    return v0, axes, areas, bad


def mesh_deformation(canon_mesh: TriangleMesh, def_mesh: TriangleMesh,
                     max_scale: float = MAX_AREA_SCALE):
    """Per-triangle F decomposed as (linear (F,3,3), translation (F,3),
    rotation quaternions (F,4))."""
    if canon_mesh.triangles.shape != def_mesh.triangles.shape or not np.array_equal(
            canon_mesh.triangles, def_mesh.triangles):
        raise InvalidParameterError("meshes must share topology")
    o_c, A_c, area_c, bad_c = _mesh_frames(canon_mesh)
    o_d, A_d, area_d, _ = _mesh_frames(def_mesh)
    if np.any(bad_c):
        raise InvalidParameterError(
            "canonical mesh has zero-area triangles; frames are undefined")
    with np.errstate(divide="ignore"):
        s = np.sqrt(area_c / np.maximum(area_d, 1e-300))
    s = np.minimum(np.where(area_d > 0, s, max_scale), max_scale)
    R = np.einsum("fij,fkj->fik", A_d, A_c)  # A_d @ A_c^T
    M = R / s[:, None, None]
    trans = o_d - np.einsum("fij,fj->fi", M, o_c)
    quats = quat_from_rotmat(R)
    return M, trans, quats


class NearestTriangleIndex:
    """Median-split BVH over a mesh, queried for nearest triangles.

    Built once per canonical mesh and shared read-only; ties break to the
    lowest triangle index.
    """

    LEAF_SIZE = 4

    def __init__(self, mesh: TriangleMesh):
        if mesh.num_faces == 0:
            raise InvalidParameterError("cannot index an empty mesh")
        self.mesh = mesh
        v0, v1, v2 = mesh.corners()
        self._v0, self._v1, self._v2 = v0, v1, v2
        tmin = np.minimum(np.minimum(v0, v1), v2)
        tmax = np.maximum(np.maximum(v0, v1), v2)
        centroids = mesh.face_centroids()

        node_min, node_max = [], []
        left, right, start, count = [], [], [], []
        order = np.arange(mesh.num_faces, dtype=np.int64)
        # (node_id, lo, hi) ranges over `order`
        node_min.append(None)
        node_max.append(None)
        left.append(0)
        right.append(0)
        start.append(0)
        count.append(0)
        stack = [(0, 0, mesh.num_faces)]
        while stack:
            node, lo, hi = stack.pop()
            tris = order[lo:hi]
            node_min[node] = tmin[tris].min(axis=0)
            node_max[node] = tmax[tris].max(axis=0)
            if hi - lo <= self.LEAF_SIZE:
                left[node] = -1
                right[node] = -1
                start[node] = lo
                count[node] = hi - lo
                continue
            cen = centroids[tris]
            axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
            key = np.argsort(cen[:, axis], kind="stable")
            order[lo:hi] = tris[key]
            mid = lo + (hi - lo) // 2
            for lo2, hi2, side in ((lo, mid, "l"), (mid, hi, "r")):
                node_min.append(None)
                node_max.append(None)
                left.append(0)
                right.append(0)
                start.append(0)
                count.append(0)
                child = len(left) - 1
                if side == "l":
                    left[node] = child
                else:
                    right[node] = child
                stack.append((child, lo2, hi2))
        self.node_min = np.ascontiguousarray(np.stack(node_min))
        self.node_max = np.ascontiguousarray(np.stack(node_max))
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.start = np.asarray(start, dtype=np.int64)
        self.count = np.asarray(count, dtype=np.int64)
        self.tri_order = order

    def query(self, points: np.ndarray) -> np.ndarray:
        points = np.ascontiguousarray(points, dtype=np.float64)
        return _query_kernel().query_nearest(
            self.node_min, self.node_max, self.left, self.right,
            self.start, self.count, self.tri_order,
            self._v0, self._v1, self._v2, points)


def nearest_triangle_brute(points: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Exhaustive nearest-triangle scan (test oracle); the lowest index
    within a small relative band of the minimum wins, matching the BVH
    tie rule."""
    from ._bvh_np import point_triangle_d2

    points = np.asarray(points, dtype=np.float64)
    v0, v1, v2 = mesh.corners()
    d2 = point_triangle_d2(points[:, None, :], v0[None], v1[None], v2[None])
    dmin = d2.min(axis=1, keepdims=True)
    tie = d2 <= dmin + (1e-10 * dmin + 1e-24)
    return np.argmax(tie, axis=1)


def warp_points(points, canon_mesh: TriangleMesh, def_mesh: TriangleMesh,
                index: NearestTriangleIndex = None):
    """Map points by the deformation gradient of their nearest canonical
    triangle. Returns (warped points, triangle indices)."""
    points = np.asarray(points, dtype=np.float64)
    if canon_mesh.num_faces == 0:
        raise InvalidParameterError("empty canonical mesh")
    M, trans, _ = mesh_deformation(canon_mesh, def_mesh)
    if index is None:
        index = NearestTriangleIndex(canon_mesh)
    tri = index.query(points)
    warped = np.einsum("pij,pj->pi", M[tri], points) + trans[tri]
    return warped, tri


def warp_surfels(surfels: SurfelSet, canon_mesh: TriangleMesh,
                 def_mesh: TriangleMesh, index: NearestTriangleIndex = None):
    """Warp a surfel set into motion space: centers through F, orientations
    through F's rotation block. Returns (warped set, triangle indices,
    cache for warp_surfels_backward)."""
    if index is None:
        index = NearestTriangleIndex(canon_mesh)
    M, trans, quats = mesh_deformation(canon_mesh, def_mesh)
    tri = index.query(surfels.centers)
    Mp = M[tri]
    warped_centers = np.einsum("pij,pj->pi", Mp, surfels.centers) + trans[tri]
    qF = quats[tri]
    warped_q = quat_mul(qF, surfels.orientations)
    out = SurfelSet(
        warped_centers, warped_q, surfels.log_scales.copy(),
        surfels.opacity_logits.copy(), surfels.color_coeffs.copy(),
    )
    cache = {"M": Mp, "qF": qF, "tri": tri}
    return out, tri, cache


def warp_surfels_backward(cache, d_warped):
    """Pull a GradientBuffer on the warped set back to the moment set.

    The triangle assignment is treated as locally constant (it is
    piecewise constant in the centers)."""
    from .rendering import GradientBuffer

    M = cache["M"]
    qF = cache["qF"]
    d_centers = np.einsum("pji,pj->pi", M, d_warped.centers)  # M^T g
    w, x, y, z = qF[:, 0], qF[:, 1], qF[:, 2], qF[:, 3]
    # left-multiplication matrix of qF (warped_q = QL(qF) @ q)
    QL = np.empty((len(qF), 4, 4))
    QL[:, 0] = np.stack([w, -x, -y, -z], axis=-1)
    QL[:, 1] = np.stack([x, w, -z, y], axis=-1)
    QL[:, 2] = np.stack([y, z, w, -x], axis=-1)
    QL[:, 3] = np.stack([z, -y, x, w], axis=-1)
    d_q = np.einsum("pji,pj->pi", QL, d_warped.orientations)
    return GradientBuffer(
        centers=d_centers,
        orientations=d_q,
        log_scales=d_warped.log_scales.copy(),
        opacity_logits=d_warped.opacity_logits.copy(),
        color_coeffs=d_warped.color_coeffs.copy(),
    )
