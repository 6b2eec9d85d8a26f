"""2D Gaussian surfels: flat elliptical Gaussian primitives in 3D.

A surfel is a disk-like Gaussian with two in-plane extents and a zero
third extent; its normal is the third column of the orientation's
rotation matrix. Scales are stored as logs and opacity as a logit so the
optimizer works on unconstrained values.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError
from .geometry import quat_from_rotmat, quat_to_rotmat
from .meshes import TriangleMesh

MIN_SCALE = 1e-6
SH_C0 = 0.28209479177387814


def activate_scales(log_scales: np.ndarray) -> np.ndarray:
    return np.exp(log_scales)


def deactivate_scales(scales: np.ndarray) -> np.ndarray:
    return np.log(scales)


def activate_opacity(logits: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-logits))


def deactivate_opacity(opacity: np.ndarray) -> np.ndarray:
    opacity = np.asarray(opacity, dtype=np.float64)
    return np.log(opacity / (1.0 - opacity))


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class Surfel:
    center: np.ndarray          # (3,)
    orientation: np.ndarray     # (4,) unit quaternion, scalar first
    log_scale: np.ndarray       # (2,) log of in-plane extents
    opacity_logit: float
    color_coeffs: np.ndarray    # (K, 3) SH coefficients per channel

    def validate(self):
        if not (
            np.all(np.isfinite(self.center))
            and np.all(np.isfinite(self.orientation))
            and np.all(np.isfinite(self.log_scale))
            and np.isfinite(self.opacity_logit)
            and np.all(np.isfinite(self.color_coeffs))
        ):
            raise InvalidParameterError("surfel has non-finite fields")
        if abs(np.linalg.norm(self.orientation) - 1.0) > 1e-6:
            raise InvalidParameterError("orientation must be unit norm")


class SurfelSet:
    """Struct-of-arrays surfel container (float64)."""

    def __init__(self, centers, orientations, log_scales, opacity_logits,
                 color_coeffs):
        self.centers = np.ascontiguousarray(centers, dtype=np.float64)
        self.orientations = np.ascontiguousarray(orientations, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(log_scales, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(
            opacity_logits, dtype=np.float64)
        self.color_coeffs = np.ascontiguousarray(color_coeffs, dtype=np.float64)
        n = len(self.centers)
        if (
            self.centers.shape != (n, 3)
            or self.orientations.shape != (n, 4)
            or self.log_scales.shape != (n, 2)
            or self.opacity_logits.shape != (n,)
            or self.color_coeffs.shape[0] != n
            or self.color_coeffs.ndim != 3
            or self.color_coeffs.shape[2] != 3
        ):
            raise InvalidParameterError("surfel arrays have mismatched shapes")

    @property
    def count(self) -> int:
        return len(self.centers)

    @property
    def sh_coeffs_per_channel(self) -> int:
        return self.color_coeffs.shape[1]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> Surfel:
        return Surfel(
            center=self.centers[i],
            orientation=self.orientations[i],
            log_scale=self.log_scales[i],
            opacity_logit=float(self.opacity_logits[i]),
            color_coeffs=self.color_coeffs[i],
        )

    def copy(self) -> "SurfelSet":
        return SurfelSet(
            self.centers.copy(), self.orientations.copy(),
            self.log_scales.copy(), self.opacity_logits.copy(),
            self.color_coeffs.copy(),
        )

    def normalize_orientations(self):
        self.orientations /= np.linalg.norm(
            self.orientations, axis=-1, keepdims=True)

    def validate(self):
        for arr in (self.centers, self.orientations, self.log_scales,
                    self.opacity_logits, self.color_coeffs):
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError("surfel set has non-finite entries")
        norms = np.linalg.norm(self.orientations, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise InvalidParameterError("orientations must be unit norm")

    @classmethod
    def empty(cls, sh_degree: int = 1) -> "SurfelSet":
        k = num_sh_coeffs(sh_degree)
        return cls(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)),
            np.zeros((0,)), np.zeros((0, k, 3)),
        )


def build_covariance(orientation: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """R * Diag[s_x^2, s_y^2, 0] * R^T for one surfel.

    Symmetric, positive semidefinite, rank <= 2; its null space is the
    surfel normal.
    """
    orientation = np.asarray(orientation, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    if not (np.all(np.isfinite(orientation)) and np.all(np.isfinite(scales))):
        raise InvalidParameterError("non-finite covariance parameters")
    if np.any(scales <= 0):
        raise InvalidParameterError("scales must be positive")
    R = quat_to_rotmat(orientation)
    d = np.array([scales[0] ** 2, scales[1] ** 2, 0.0])
    return (R * d) @ R.T


def surfel_normal(orientation: np.ndarray) -> np.ndarray:
    """Third column of the orientation's rotation matrix."""
    orientation = np.asarray(orientation, dtype=np.float64)
    if not np.all(np.isfinite(orientation)):
        raise InvalidParameterError("non-finite orientation")
    return quat_to_rotmat(orientation)[..., :, 2]


def init_from_template(
    mesh: TriangleMesh,
    init_opacity: float = 0.1,
    scale_factor: float = 1.0,
    sh_degree: int = 1,
    base_color=(0.5, 0.5, 0.5),
) -> SurfelSet:
    """One surfel per triangle: centered at the centroid, normal aligned
    with the face normal, in-plane extent proportional to sqrt(area).

    Zero-area triangles get the minimum scale floor and a (0, 0, 1)
    normal fallback; each one is reported with ``warnings.warn``.
    """
    if mesh.num_faces < 1:
        raise InvalidParameterError("template mesh has no triangles")
    v0, v1, v2 = mesh.corners()
    centroids = mesh.face_centroids()
    areas = mesh.face_areas()
    n_faces = mesh.num_faces

    e0 = v1 - v0
    normals = np.cross(e0, v2 - v0)
    nlen = np.linalg.norm(normals, axis=-1)
    degenerate = nlen < 1e-12

    tangents = np.zeros_like(e0)
    good_t = np.linalg.norm(e0, axis=-1) > 1e-12
    tangents[good_t] = e0[good_t] / np.linalg.norm(
        e0[good_t], axis=-1, keepdims=True)

    quats = np.zeros((n_faces, 4))
    quats[:, 0] = 1.0
    for i in range(n_faces):
        if degenerate[i]:
            warnings.warn(
                f"degenerate (zero-area) triangle {i}: using scale floor "
                "and normal fallback (0, 0, 1)",
                RuntimeWarning,
                stacklevel=2,
            )
            continue
        n = normals[i] / nlen[i]
        t = tangents[i]
        b = np.cross(n, t)
        quats[i] = quat_from_rotmat(np.stack([t, b, n], axis=-1))

    scales = np.maximum(scale_factor * np.sqrt(areas), MIN_SCALE)
    log_scales = np.log(np.stack([scales, scales], axis=-1))

    k = num_sh_coeffs(sh_degree)
    coeffs = np.zeros((n_faces, k, 3))
    coeffs[:, 0, :] = (np.asarray(base_color, dtype=np.float64) - 0.5) / SH_C0

    logits = np.full(n_faces, float(deactivate_opacity(init_opacity)))
    return SurfelSet(centroids, quats, log_scales, logits, coeffs)
