"""Blendshape head template and tracked per-frame parameters.

The template is a mean mesh plus linear shape and expression offset
bases. A procedural build (deformed icosphere with bump blendshapes and
mouth/eye triangle labels) stands in for licensed morphable-model
assets; externally supplied templates with the same structure load from
the same files.
"""

import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .cameras import Camera
from .errors import InvalidParameterError
from .geometry import is_rigid
from .meshes import TriangleMesh, load_obj, save_obj

REGION_BACKGROUND = 0
REGION_SKIN = 1
REGION_MOUTH = 2
REGION_EYES = 3


@dataclass
class TemplateModel:
    mean_vertices: np.ndarray       # (V, 3)
    triangles: np.ndarray           # (F, 3) int32
    shape_basis: np.ndarray         # (N_s, V, 3)
    expression_basis: np.ndarray    # (N_e, V, 3)
    region_labels: np.ndarray       # (F,) int32, 1 skin / 2 mouth / 3 eyes

    def __post_init__(self):
        self.mean_vertices = np.ascontiguousarray(self.mean_vertices,
                                                  dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int32)
        self.shape_basis = np.ascontiguousarray(self.shape_basis,
                                                dtype=np.float64)
        self.expression_basis = np.ascontiguousarray(self.expression_basis,
                                                     dtype=np.float64)
        self.region_labels = np.ascontiguousarray(self.region_labels,
                                                  dtype=np.int32)
        v = len(self.mean_vertices)
        if self.shape_basis.shape[1:] != (v, 3):
            raise InvalidParameterError("shape basis topology mismatch")
        if self.expression_basis.shape[1:] != (v, 3):
            raise InvalidParameterError("expression basis topology mismatch")
        if self.region_labels.shape != (len(self.triangles),):
            raise InvalidParameterError("one region label per triangle needed")

    @property
    def num_shape(self) -> int:
        return len(self.shape_basis)

    @property
    def num_expression(self) -> int:
        return len(self.expression_basis)

    def mean_mesh(self) -> TriangleMesh:
        return TriangleMesh(self.mean_vertices.copy(), self.triangles.copy())

    def copy(self) -> "TemplateModel":
        return TemplateModel(
            self.mean_vertices.copy(), self.triangles.copy(),
            self.shape_basis.copy(), self.expression_basis.copy(),
            self.region_labels.copy(),
        )

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        save_obj(self.mean_mesh(), os.path.join(directory, "template_mean.obj"))
        spec = {
            "mean_mesh_obj": "template_mean.obj",
            "shape_basis": self.shape_basis.tolist(),
            "expression_basis": self.expression_basis.tolist(),
            "region_labels": self.region_labels.tolist(),
        }
        with open(os.path.join(directory, "template.json"), "w") as f:
            json.dump(spec, f)

    @classmethod
    def load(cls, directory) -> "TemplateModel":
        with open(os.path.join(directory, "template.json")) as f:
            spec = json.load(f)
        mesh = load_obj(os.path.join(directory, spec["mean_mesh_obj"]))
        return cls(
            mean_vertices=mesh.vertices,
            triangles=mesh.triangles,
            shape_basis=np.asarray(spec["shape_basis"]),
            expression_basis=np.asarray(spec["expression_basis"]),
            region_labels=np.asarray(spec["region_labels"], dtype=np.int32),
        )


@dataclass
class TrackedFrame:
    shape_coeffs: np.ndarray
    expression_coeffs: np.ndarray
    head_pose: np.ndarray  # 4x4 rigid
    camera: Optional[Camera] = None
    lifestage: int = 0

    def __post_init__(self):
        self.shape_coeffs = np.asarray(self.shape_coeffs, dtype=np.float64)
        self.expression_coeffs = np.asarray(self.expression_coeffs,
                                            dtype=np.float64)
        self.head_pose = np.asarray(self.head_pose, dtype=np.float64)
        if not is_rigid(self.head_pose):
            raise InvalidParameterError("head_pose must be rigid within 1e-6")

    def to_dict(self) -> dict:
        d = {
            "shape_coeffs": self.shape_coeffs.tolist(),
            "expression_coeffs": self.expression_coeffs.tolist(),
            "head_pose": self.head_pose.tolist(),
            "lifestage": int(self.lifestage),
        }
        if self.camera is not None:
            d["camera"] = self.camera.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrackedFrame":
        cam = Camera.from_dict(d["camera"]) if "camera" in d else None
        return cls(
            shape_coeffs=np.asarray(d["shape_coeffs"], dtype=np.float64),
            expression_coeffs=np.asarray(d["expression_coeffs"],
                                         dtype=np.float64),
            head_pose=np.asarray(d["head_pose"], dtype=np.float64),
            camera=cam,
            lifestage=int(d.get("lifestage", 0)),
        )


def save_tracked_frames(frames: List[TrackedFrame], path):
    with open(path, "w") as f:
        json.dump([fr.to_dict() for fr in frames], f)


def load_tracked_frames(path) -> List[TrackedFrame]:
    with open(path) as f:
        return [TrackedFrame.from_dict(d) for d in json.load(f)]


def evaluate_template(model: TemplateModel, shape: np.ndarray,
                      expression: np.ndarray, pose: np.ndarray) -> TriangleMesh:
    """vertices = pose o (mean + sum a_i shape_i + sum g_j expr_j)."""
    shape = np.asarray(shape, dtype=np.float64)
    expression = np.asarray(expression, dtype=np.float64)
    if shape.shape != (model.num_shape,):
        raise InvalidParameterError(
            f"expected {model.num_shape} shape coefficients, got {shape.shape}")
    if expression.shape != (model.num_expression,):
        raise InvalidParameterError(
            f"expected {model.num_expression} expression coefficients, "
            f"got {expression.shape}")
    pose = np.asarray(pose, dtype=np.float64)
    if not is_rigid(pose):
        raise InvalidParameterError("pose must be rigid within 1e-6")
    v = model.mean_vertices.copy()
    if model.num_shape:
        v = v + np.tensordot(shape, model.shape_basis, axes=1)
    if model.num_expression:
        v = v + np.tensordot(expression, model.expression_basis, axes=1)
    v = v @ pose[:3, :3].T + pose[:3, 3]
    return TriangleMesh(v, model.triangles.copy())


# --- procedural head template ------------------------------------------------

def build_icosphere(subdivisions: int = 3) -> TriangleMesh:
    """Unit icosphere; 20 * 4^n faces, deterministic vertex order."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=-1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}
        new_faces = []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = np.add(verts[a], verts[b]) / 2.0
                m = tuple(m / np.linalg.norm(m))
                verts.append(m)
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriangleMesh(np.asarray(verts), np.asarray(faces, dtype=np.int32))


def _angular_bump(dirs: np.ndarray, center, width: float) -> np.ndarray:
    """exp(-(angle/width)^2) per unit direction."""
    c = np.asarray(center, dtype=np.float64)
    c = c / np.linalg.norm(c)
    ang = np.arccos(np.clip(dirs @ c, -1.0, 1.0))
    return np.exp(-((ang / width) ** 2))

_EYE_L = (0.35, 0.25, 0.9)
_EYE_R = (-0.35, 0.25, 0.9)
_MOUTH = (0.0, -0.45, 0.89)


def build_procedural_template(subdivisions: int = 3) -> TemplateModel:
    """Deterministic head-ish template facing +z with 4 shape and 6
    expression blendshapes and mouth/eye triangle labels."""
    sphere = build_icosphere(subdivisions)
    dirs = sphere.vertices
    # squash to a head-like ellipsoid with a nose bump and flat back
    scale = np.array([0.78, 1.0, 0.85])
    mean = dirs * scale
    nose = _angular_bump(dirs, (0.0, -0.08, 1.0), 0.18)
    mean = mean + dirs * 0.10 * nose[:, None]
    chin = _angular_bump(dirs, (0.0, -0.85, 0.45), 0.30)
    mean = mean + dirs * 0.05 * chin[:, None]

    def bump_field(center, width, direction=None, amp=1.0):
        w = _angular_bump(dirs, center, width)[:, None]
        d = dirs if direction is None else np.broadcast_to(
            np.asarray(direction, dtype=np.float64), dirs.shape)
        return amp * w * d

    shape_basis = np.stack([
        bump_field((1.0, 0.25, 0.0), 0.5, amp=0.06)
        + bump_field((-1.0, 0.25, 0.0), 0.5, amp=0.06),      # cranium width
        bump_field((0.0, -0.9, 0.3), 0.4, amp=0.09),          # jaw length
        bump_field((0.0, -0.08, 1.0), 0.16, amp=0.08),        # nose size
        bump_field((0.0, 0.4, 0.92), 0.35, amp=0.05),         # brow ridge
    ])
    expression_basis = np.stack([
        bump_field(_MOUTH, 0.28, direction=(0.0, -0.9, -0.45), amp=0.10),  # jaw open
        bump_field((0.30, -0.42, 0.85), 0.22, direction=(0.6, 0.35, 0.0), amp=0.07)
        + bump_field((-0.30, -0.42, 0.85), 0.22, direction=(-0.6, 0.35, 0.0), amp=0.07),  # smile
        bump_field(_EYE_L, 0.16, amp=-0.05),                  # blink left
        bump_field(_EYE_R, 0.16, amp=-0.05),                  # blink right
        bump_field((0.0, 0.42, 0.9), 0.3, direction=(0.0, 1.0, 0.1), amp=0.06),  # brow raise
        bump_field((0.55, -0.2, 0.75), 0.25, amp=0.06)
        + bump_field((-0.55, -0.2, 0.75), 0.25, amp=0.06),    # cheek puff
    ])

    centroids = sphere.face_centroids()
    cdirs = centroids / np.linalg.norm(centroids, axis=-1, keepdims=True)
    labels = np.full(sphere.num_faces, REGION_SKIN, dtype=np.int32)
    for eye in (_EYE_L, _EYE_R):
        labels[_angular_bump(cdirs, eye, 1.0) > np.exp(-(0.20) ** 2)] = REGION_EYES
    labels[_angular_bump(cdirs, _MOUTH, 1.0) > np.exp(-(0.24) ** 2)] = REGION_MOUTH

    return TemplateModel(
        mean_vertices=mean,
        triangles=sphere.triangles,
        shape_basis=shape_basis,
        expression_basis=expression_basis,
        region_labels=labels,
    )
