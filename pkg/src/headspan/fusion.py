"""Defer-warp surface extraction.

The static moment-specific model is rendered from orbit cameras, the
depth maps are fused into a truncated signed-distance grid, and marching
cubes extracts the surface -- all before any motion is applied. Animated
mesh sequences then reuse that single extraction and only warp vertices.
"""

from dataclasses import dataclass

import numpy as np

from . import backend
from .cameras import Camera
from .errors import InvalidParameterError, NoSurfaceError
from .geometry import fibonacci_sphere, look_at
from .meshes import TriangleMesh, save_obj, save_ply
from .meshrast import rasterize_mesh_depth  # noqa: F401 (re-export for callers)
from .rendering import render
from .surfels import SurfelSet
from .template import TemplateModel, TrackedFrame, evaluate_template
from .warping import warp_points

TRUNC_VOXELS = 3.0


def _kernel():
    if backend.active_backend() == "numba":
        from . import _tsdf_nb as k
    else:
        from . import _tsdf_np as k
    return k


@dataclass
class FusionGrid:
    resolution: tuple          # (nx, ny, nz)
    origin: np.ndarray         # world position of the grid corner
    voxel_size: float
    values: np.ndarray         # normalized truncated signed distance [-1, 1]
    weights: np.ndarray

    @classmethod
    def around(cls, center, radius: float, resolution: int) -> "FusionGrid":
        center = np.asarray(center, dtype=np.float64)
        size = 2.0 * radius
        voxel = size / resolution
        origin = center - radius
        shape = (resolution, resolution, resolution)
        return cls((resolution,) * 3, origin, float(voxel),
                   np.zeros(shape), np.zeros(shape))

    @property
    def truncation(self) -> float:
        return TRUNC_VOXELS * self.voxel_size

    def integrate(self, depth: np.ndarray, alpha: np.ndarray,
                  camera: Camera):
        """Projective TSDF update from one alpha-masked depth map."""
        _kernel().integrate(
            self.values, self.weights,
            np.ascontiguousarray(depth, dtype=np.float64),
            np.ascontiguousarray(alpha, dtype=np.float64),
            camera.fx, camera.fy, camera.cx, camera.cy,
            camera.height, camera.width,
            np.ascontiguousarray(camera.rotation),
            np.ascontiguousarray(camera.translation),
            self.origin[0], self.origin[1], self.origin[2],
            self.voxel_size, self.truncation)

    def extract_surface(self) -> TriangleMesh:
        """Marching cubes at the zero level set over observed voxels."""
        from skimage import measure

        mask = self.weights > 0
        try:
            verts, faces, _, _ = measure.marching_cubes(
                self.values, level=0.0,
                spacing=(self.voxel_size,) * 3, mask=mask)
        except (ValueError, RuntimeError) as e:
            raise NoSurfaceError(f"no surface found in the fused grid: {e}")
        if len(faces) == 0:
            raise NoSurfaceError("no surface found in the fused grid")
        verts = verts + self.origin + 0.5 * self.voxel_size
        return TriangleMesh(verts, faces.astype(np.int32))


def largest_component(mesh: TriangleMesh) -> TriangleMesh:
    """Keep the faces of the largest vertex-connected component."""
    n = len(mesh.vertices)
    parent = np.arange(n)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for tri in mesh.triangles:
        a = find(tri[0])
        for other in (tri[1], tri[2]):
            b = find(other)
            if a != b:
                parent[b] = a
    roots = np.array([find(v) for v in range(n)])
    face_roots = roots[mesh.triangles[:, 0]]
    best = np.bincount(face_roots, minlength=n).argmax()
    keep = face_roots == best
    faces = mesh.triangles[keep]
    used = np.unique(faces)
    remap = np.full(n, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(mesh.vertices[used], remap[faces].astype(np.int32))


def orbit_cameras(center, radius: float, n_views: int, image_size: int = 128,
                  distance_factor: float = 2.5, fov_y_deg: float = 50.0):
    """Deterministic Fibonacci-sphere cameras looking at the head."""
    if n_views < 1:
        raise InvalidParameterError("need at least one view")
    center = np.asarray(center, dtype=np.float64)
    dirs = fibonacci_sphere(n_views)
    fy = 0.5 * image_size / np.tan(0.5 * np.deg2rad(fov_y_deg))
    cams = []
    for d in dirs:
        eye = center + distance_factor * radius * d
        cams.append(Camera(
            fx=fy, fy=fy, cx=image_size / 2.0, cy=image_size / 2.0,
            width=image_size, height=image_size,
            world_to_camera=look_at(eye, center)))
    return cams


def extract_static_mesh(model, lifestage=0, n_views: int = 32,
                        grid_resolution: int = 96, image_size: int = 128,
                        radius_margin: float = 1.25) -> TriangleMesh:
    """Fuse depth renders of the motion-free moment-specific model into a
    TSDF grid and extract the largest surface component.

    ``model`` is a PersonalizedModel (composed for ``lifestage``) or a
    plain SurfelSet.
    """
    if n_views < 1:
        raise InvalidParameterError("need at least one view")
    if isinstance(model, SurfelSet):
        surfels = model
    else:
        surfels, _, _ = model.moment_forward(lifestage)
    center = surfels.centers.mean(axis=0)
    radius = float(np.linalg.norm(surfels.centers - center, axis=1).max())
    radius = radius_margin * max(radius, 1e-6)
    grid = FusionGrid.around(center, radius, grid_resolution)
    for cam in orbit_cameras(center, radius, n_views, image_size):
        out = render(surfels, cam, background=(0, 0, 0), far=0.0,
                     build_tape=False)
        grid.integrate(out.depth, out.alpha, cam)
    return largest_component(grid.extract_surface())


def defer_warp_mesh(mesh: TriangleMesh, canon_mesh: TriangleMesh,
                    tracked: TrackedFrame,
                    template: TemplateModel) -> TriangleMesh:
    """Animate an extracted mesh by warping its vertices with the tracked
    frame's deformation field; topology is unchanged."""
    def_mesh = evaluate_template(template, tracked.shape_coeffs,
                                 tracked.expression_coeffs,
                                 tracked.head_pose)
    warped, _ = warp_points(mesh.vertices, canon_mesh, def_mesh)
    return TriangleMesh(warped, mesh.triangles.copy())


def mesh_sequence(model, lifestage, tracked_frames, n_views: int = 32,
                  grid_resolution: int = 96, image_size: int = 128):
    """One static extraction, then one cheap vertex warp per frame."""
    static = extract_static_mesh(model, lifestage, n_views=n_views,
                                 grid_resolution=grid_resolution,
                                 image_size=image_size)
    canon = model.canonical_mesh()
    return static, [
        defer_warp_mesh(static, canon, tf, model.template)
        for tf in tracked_frames
    ]


def export_mesh(mesh: TriangleMesh, path, fmt: str = None):
    """Write OBJ (ASCII) or PLY (binary little-endian)."""
    if fmt is None:
        fmt = "ply" if str(path).lower().endswith(".ply") else "obj"
    fmt = fmt.lower()
    if fmt == "obj":
        save_obj(mesh, path)
    elif fmt == "ply":
        save_ply(mesh, path)
    else:
        raise InvalidParameterError(f"unknown mesh format {fmt!r}")
