"""Indexed triangle meshes, derived per-face quantities, OBJ/PLY I/O."""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (F, 3) int32 vertex indices

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int32)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise InvalidParameterError("vertices must be (V, 3)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise InvalidParameterError("triangles must be (F, 3)")
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise InvalidParameterError("triangle indices out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise InvalidParameterError("vertices must be finite")

    @property
    def num_faces(self) -> int:
        return len(self.triangles)

    def corners(self):
        """(F, 3) arrays v0, v1, v2."""
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def face_centroids(self) -> np.ndarray:
        v0, v1, v2 = self.corners()
        return (v0 + v1 + v2) / 3.0

    def face_normals(self, eps: float = 1e-12) -> np.ndarray:
        """Unit normals; zero-area faces get (0, 0, 1)."""
        v0, v1, v2 = self.corners()
        n = np.cross(v1 - v0, v2 - v0)
        ln = np.linalg.norm(n, axis=-1, keepdims=True)
        out = np.where(ln > eps, n / np.maximum(ln, eps), [0.0, 0.0, 1.0])
        return out

    def face_areas(self) -> np.ndarray:
        v0, v1, v2 = self.corners()
        return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=-1)

    def transformed(self, T: np.ndarray) -> "TriangleMesh":
        """Apply a 4x4 homogeneous transform to the vertices."""
        T = np.asarray(T, dtype=np.float64)
        v = self.vertices @ T[:3, :3].T + T[:3, 3]
        return TriangleMesh(v, self.triangles.copy())

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def save_obj(mesh: TriangleMesh, path):
    """ASCII OBJ; face indices are 1-based per the format."""
    with open(path, "w") as f:
        f.write("# headspan mesh export\n")
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def load_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(idx) - 1):  # fan-triangulate
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        raise InvalidParameterError(f"no vertices in OBJ file {path}")
    return TriangleMesh(np.asarray(verts), np.asarray(faces, dtype=np.int32))


def save_ply(mesh: TriangleMesh, path):
    """Binary little-endian PLY with float32 vertices."""
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(mesh.vertices.astype("<f4").tobytes())
        for t in mesh.triangles:
            f.write(struct.pack("<Biii", 3, int(t[0]), int(t[1]), int(t[2])))


def load_ply(path) -> TriangleMesh:
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if end < 0:
        raise InvalidParameterError(f"{path} is not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    nv = nf = 0
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
    body = data[end + len(b"end_header\n"):]
    verts = np.frombuffer(body, dtype="<f4", count=nv * 3).reshape(nv, 3)
    faces = np.empty((nf, 3), dtype=np.int32)
    off = nv * 12
    for i in range(nf):
        cnt = body[off]
        if cnt != 3:
            raise InvalidParameterError("only triangle PLY faces supported")
        faces[i] = struct.unpack_from("<iii", body, off + 1)
        off += 1 + 12
    return TriangleMesh(verts.astype(np.float64), faces)
