"""Pinhole camera model.

Camera space is x-right, y-down, z-forward (depth = camera-space z).
Pixel (ix, iy) casts its ray through the pixel center (ix+0.5, iy+0.5).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError
from .geometry import is_rigid, look_at


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(
        default_factory=lambda: np.eye(4, dtype=np.float64)
    )

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image size must be at least 1x1")
        if not is_rigid(self.world_to_camera):
            raise InvalidParameterError(
                "world_to_camera must be a rigid 4x4 transform"
            )

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def origin(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in world space, shape (H, W, 3)."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        gx, gy = np.meshgrid(xs, ys)
        d = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.rotation  # row-vector form of R^T @ d

    def pixel_dirs_cam(self) -> np.ndarray:
        """Per-pixel camera-space (x/z, y/z, 1) directions (not unit)."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy, np.ones_like(gx)], axis=-1)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "world_to_camera": self.world_to_camera.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]),
            cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64),
        )


def orbit_camera(
    target,
    azimuth_deg: float,
    elevation_deg: float,
    distance: float,
    width: int,
    height: int,
    fov_y_deg: float = 40.0,
) -> Camera:
    """Camera on a sphere around ``target``. Azimuth 0 looks down -z at
    the +z side of the target (the face of the procedural head)."""
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    target = np.asarray(target, dtype=np.float64)
    offset = distance * np.array(
        [np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)]
    )
    w2c = look_at(target + offset, target, up=(0.0, 1.0, 0.0))
    fy = 0.5 * height / np.tan(0.5 * np.deg2rad(fov_y_deg))
    return Camera(
        fx=fy, fy=fy, cx=width / 2.0, cy=height / 2.0,
        width=width, height=height, world_to_camera=w2c,
    )
