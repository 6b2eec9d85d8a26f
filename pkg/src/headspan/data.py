"""Synthetic multi-lifestage dataset generation and ingestion.

Each lifestage gets a distinct appearance (albedo palette + a fixed
shape offset); frames sample a frontal-arc camera and expression
coefficients. Ground truth (flat-shaded image, foreground mask, region
labels, face-normal map) is rasterized from the template mesh, so the
normal maps are exactly consistent with the depth the mesh produces.
"""

import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .cameras import Camera, orbit_camera
from .errors import InvalidParameterError
from .geometry import quat_from_axis_angle, quat_to_rotmat
from .imgio import (decode_normal_map, encode_normal_map, load_png,
                    load_png16_rgb, save_png16_rgb, save_png_u8)
from .meshrast import rasterize_mesh_depth
from .template import (REGION_EYES, REGION_MOUTH, REGION_SKIN, TemplateModel,
                       TrackedFrame, build_procedural_template,
                       evaluate_template)

LIGHT_DIR = np.array([0.35, 0.45, 0.82])
AMBIENT = 0.35
DIFFUSE = 0.65

# per-variation skin tones; mouth/eye colors are shared
SKIN_TONES = [
    (0.85, 0.64, 0.52), (0.55, 0.38, 0.28), (0.93, 0.78, 0.67),
    (0.70, 0.52, 0.38), (0.45, 0.30, 0.22), (0.80, 0.70, 0.60),
]
MOUTH_COLOR = (0.62, 0.27, 0.25)
EYE_COLOR = (0.16, 0.16, 0.22)


@dataclass
class FrameRecord:
    frame_id: str
    image: str
    mask: str
    region_mask: str
    normal_map: str
    camera: Camera
    shape_coeffs: np.ndarray
    expression_coeffs: np.ndarray
    head_pose: np.ndarray
    lifestage: int
    split: str = "train"

    def to_dict(self) -> dict:
        return {
            "frame_id": self.frame_id, "image": self.image,
            "mask": self.mask, "region_mask": self.region_mask,
            "normal_map": self.normal_map, "camera": self.camera.to_dict(),
            "shape_coeffs": np.asarray(self.shape_coeffs).tolist(),
            "expression_coeffs": np.asarray(self.expression_coeffs).tolist(),
            "head_pose": np.asarray(self.head_pose).tolist(),
            "lifestage": int(self.lifestage), "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrameRecord":
        return cls(
            frame_id=d["frame_id"], image=d["image"], mask=d["mask"],
            region_mask=d["region_mask"], normal_map=d["normal_map"],
            camera=Camera.from_dict(d["camera"]),
            shape_coeffs=np.asarray(d["shape_coeffs"], dtype=np.float64),
            expression_coeffs=np.asarray(d["expression_coeffs"],
                                         dtype=np.float64),
            head_pose=np.asarray(d["head_pose"], dtype=np.float64),
            lifestage=int(d["lifestage"]), split=d.get("split", "train"),
        )

    def tracked(self) -> TrackedFrame:
        return TrackedFrame(
            shape_coeffs=self.shape_coeffs,
            expression_coeffs=self.expression_coeffs,
            head_pose=self.head_pose, camera=self.camera,
            lifestage=self.lifestage,
        )


@dataclass
class DatasetManifest:
    root: str
    template_dir: str
    lifestages: List[dict]              # {"id", "name", "variation"}
    frames: List[FrameRecord]
    seed: int = 0

    def save(self, path=None):
        path = path or os.path.join(self.root, "manifest.json")
        doc = {
            "template_dir": self.template_dir,
            "seed": int(self.seed),
            "lifestages": self.lifestages,
            "frames": [f.to_dict() for f in self.frames],
        }
        with open(path, "w") as f:
            json.dump(doc, f)
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as f:
            doc = json.load(f)
        return cls(
            root=os.path.dirname(os.path.abspath(path)),
            template_dir=doc["template_dir"],
            lifestages=doc["lifestages"],
            frames=[FrameRecord.from_dict(d) for d in doc["frames"]],
            seed=int(doc.get("seed", 0)),
        )


def _shade_colors(variation: int, labels, normals):
    """Flat lambertian shading per face label/normal."""
    palette = {
        REGION_SKIN: SKIN_TONES[variation % len(SKIN_TONES)],
        REGION_MOUTH: MOUTH_COLOR,
        REGION_EYES: EYE_COLOR,
    }
    light = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
    shade = AMBIENT + DIFFUSE * np.maximum(normals @ light, 0.0)
    albedo = np.zeros(normals.shape[:-1] + (3,))
    for lab, col in palette.items():
        albedo[labels == lab] = col
    return albedo * shade[..., None]


def generate_synthetic(
    output_dir,
    num_lifestages: int = 3,
    frames_per_lifestage: int = 50,
    image_size: int = 64,
    seed: int = 0,
    num_variations: Optional[int] = None,
    template_subdivisions: int = 3,
    holdout_fraction: float = 0.1,
) -> DatasetManifest:
    """Write a fully deterministic synthetic dataset and its manifest."""
    if num_lifestages < 1 or frames_per_lifestage < 1:
        raise InvalidParameterError("need at least one lifestage and frame")
    rng = np.random.default_rng(seed)
    os.makedirs(output_dir, exist_ok=True)
    template = build_procedural_template(template_subdivisions)
    template.save(os.path.join(output_dir, "template"))

    v = num_variations or num_lifestages
    variation_shapes = rng.normal(0.0, 0.6, (v, template.num_shape))

    head_radius = np.linalg.norm(template.mean_vertices, axis=1).max()
    lifestages = []
    frames: List[FrameRecord] = []
    n_hold = max(1, int(round(holdout_fraction * frames_per_lifestage)))

    for k in range(num_lifestages):
        var = k % v
        lifestages.append({"id": k, "name": f"stage{k:02d}", "variation": var})
        shape = variation_shapes[var]
        for j in range(frames_per_lifestage):
            az = rng.uniform(-50.0, 50.0)
            el = rng.uniform(-12.0, 25.0)
            dist = rng.uniform(2.4, 2.9) * head_radius
            cam = orbit_camera((0.0, 0.0, 0.0), az, el, dist,
                               image_size, image_size)
            expr = np.clip(rng.normal(0.0, 0.4, template.num_expression),
                           -0.9, 0.9)
            axis = rng.normal(0, 1, 3)
            angle = rng.normal(0.0, np.deg2rad(4.0))
            pose = np.eye(4)
            pose[:3, :3] = quat_to_rotmat(quat_from_axis_angle(axis, angle))
            pose[:3, 3] = rng.normal(0.0, 0.01 * head_radius, 3)

            mesh = evaluate_template(template, shape, expr, pose)
            depth, region, tri = rasterize_mesh_depth(
                mesh, cam, template.region_labels, far=0.0,
                return_face_ids=True)
            fnorm = mesh.face_normals()
            covered = tri >= 0
            normals = np.where(covered[..., None], fnorm[tri], 0.0)
            face_colors = _shade_colors(var, template.region_labels[tri],
                                        fnorm[tri])
            image = np.where(covered[..., None], face_colors, 0.0)

            fid = f"ls{k:02d}_f{j:04d}"
            rel_img = f"frames/{fid}_rgb.png"
            rel_mask = f"frames/{fid}_mask.png"
            rel_region = f"frames/{fid}_region.png"
            rel_normal = f"frames/{fid}_normal.png"
            os.makedirs(os.path.join(output_dir, "frames"), exist_ok=True)
            save_png_u8(os.path.join(output_dir, rel_img), image)
            save_png_u8(os.path.join(output_dir, rel_mask),
                        covered.astype(np.float64))
            save_png_u8(os.path.join(output_dir, rel_region), region / 255.0)
            save_png16_rgb(os.path.join(output_dir, rel_normal),
                           encode_normal_map(normals))
            frames.append(FrameRecord(
                frame_id=fid, image=rel_img, mask=rel_mask,
                region_mask=rel_region, normal_map=rel_normal, camera=cam,
                shape_coeffs=shape.copy(), expression_coeffs=expr,
                head_pose=pose, lifestage=k,
                split="holdout" if j >= frames_per_lifestage - n_hold
                else "train",
            ))

    manifest = DatasetManifest(
        root=os.path.abspath(output_dir), template_dir="template",
        lifestages=lifestages, frames=frames, seed=seed)
    manifest.save()
    return manifest


class LoadedDataset:
    """Validated in-memory view of a dataset; images load lazily."""

    def __init__(self, manifest: DatasetManifest, template: TemplateModel):
        self.manifest = manifest
        self.template = template
        self._cache: Dict[str, dict] = {}
        self.lifestage_ids = [int(d["id"]) for d in manifest.lifestages]
        self.lifestage_names = [str(d["name"]) for d in manifest.lifestages]

    @property
    def frames(self) -> List[FrameRecord]:
        return self.manifest.frames

    def train_frames(self) -> List[int]:
        return [i for i, f in enumerate(self.frames) if f.split == "train"]

    def holdout_frames(self) -> List[int]:
        return [i for i, f in enumerate(self.frames) if f.split == "holdout"]

    def frames_of(self, lifestage: int) -> List[int]:
        return [i for i, f in enumerate(self.frames)
                if f.lifestage == lifestage]

    def sample_uniform(self, rng: np.random.Generator,
                       pool: Optional[List[int]] = None) -> int:
        pool = pool if pool is not None else list(range(len(self.frames)))
        return pool[int(rng.integers(0, len(pool)))]

    def arrays(self, index: int) -> dict:
        """Image/mask/region/normal arrays for one frame (cached)."""
        rec = self.frames[index]
        if rec.frame_id not in self._cache:
            root = self.manifest.root
            image = load_png(os.path.join(root, rec.image))
            mask = load_png(os.path.join(root, rec.mask)) > 0.5
            region = np.round(
                load_png(os.path.join(root, rec.region_mask)) * 255.0
            ).astype(np.int32)
            normal = decode_normal_map(
                load_png16_rgb(os.path.join(root, rec.normal_map)))
            normal = np.where(mask[..., None], normal, 0.0)
            self._cache[rec.frame_id] = {
                "image": image, "mask": mask, "region": region,
                "normal": normal,
            }
        return self._cache[rec.frame_id]


def load_dataset(manifest_path) -> LoadedDataset:
    """Load + validate a dataset; errors name the offending frame."""
    manifest = DatasetManifest.load(manifest_path)
    root = manifest.root
    tdir = os.path.join(root, manifest.template_dir)
    if not os.path.isfile(os.path.join(tdir, "template.json")):
        raise InvalidParameterError(f"missing template at {tdir}")
    template = TemplateModel.load(tdir)
    ids = {int(d["id"]) for d in manifest.lifestages}
    for rec in manifest.frames:
        for kind, rel in (("image", rec.image), ("mask", rec.mask),
                          ("region mask", rec.region_mask),
                          ("normal map", rec.normal_map)):
            p = os.path.join(root, rel)
            if not os.path.isfile(p):
                raise InvalidParameterError(
                    f"frame {rec.frame_id}: missing {kind} file {p}")
        if rec.lifestage not in ids:
            raise InvalidParameterError(
                f"frame {rec.frame_id}: unknown lifestage id {rec.lifestage}")
        if len(rec.shape_coeffs) != template.num_shape:
            raise InvalidParameterError(
                f"frame {rec.frame_id}: expected {template.num_shape} shape "
                f"coefficients")
        if len(rec.expression_coeffs) != template.num_expression:
            raise InvalidParameterError(
                f"frame {rec.frame_id}: expected {template.num_expression} "
                f"expression coefficients")
        from PIL import Image

        with Image.open(os.path.join(root, rec.image)) as im:
            w, h = im.size
        if w != rec.camera.width or h != rec.camera.height:
            raise InvalidParameterError(
                f"frame {rec.frame_id}: image is {w}x{h} but camera says "
                f"{rec.camera.width}x{rec.camera.height}")
    return LoadedDataset(manifest, template)
