"""Mesh depth/region rasterization (z-buffer)."""

import numpy as np

from . import backend
from .cameras import Camera
from .errors import InvalidParameterError
from .meshes import TriangleMesh


def _kernel():
    if backend.active_backend() == "numba":
        from . import _meshrast_nb as k
    else:
        from . import _meshrast_np as k
    return k


def rasterize_mesh_depth(mesh: TriangleMesh, camera: Camera,
                         region_labels: np.ndarray = None,
                         far: float = 0.0,
                         return_face_ids: bool = False):
    """Standard z-buffer rasterization of a triangle mesh.

    Returns (depth (H, W) in camera-space z, region (H, W) int32 with the
    front triangle's label). Background pixels carry ``far`` and label 0.
    With ``return_face_ids`` a third (H, W) array holds the front
    triangle index (-1 on background).
    """
    H, W = camera.height, camera.width
    if region_labels is None:
        region_labels = np.ones(mesh.num_faces, dtype=np.int32)
    region_labels = np.ascontiguousarray(region_labels, dtype=np.int32)
    if region_labels.shape != (mesh.num_faces,):
        raise InvalidParameterError("need one region label per triangle")
    cam_pts = camera.to_camera(mesh.vertices)
    z = np.ascontiguousarray(cam_pts[:, 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.fx * cam_pts[:, 0] / z + camera.cx
        py = camera.fy * cam_pts[:, 1] / z + camera.cy
    px = np.ascontiguousarray(np.where(z > 1e-6, px, 0.0))
    py = np.ascontiguousarray(np.where(z > 1e-6, py, 0.0))
    zbuf = np.full((H, W), np.inf)
    face_id = np.full((H, W), -1, dtype=np.int32)
    _kernel().rasterize(px, py, z, mesh.triangles, H, W, zbuf, face_id)
    depth = np.where(np.isinf(zbuf), far, zbuf)
    region = np.where(face_id >= 0, region_labels[face_id], 0).astype(np.int32)
    if return_face_ids:
        return depth, region, face_id
    return depth, region
