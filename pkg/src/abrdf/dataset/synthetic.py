"""Analytic sphere-plus-occluder scenes with exact ground truth.

The main sphere is Lambertian and is the only surface seen by camera rays;
the occluder sphere only blocks light, so masks and normal maps are exactly
those of the main sphere while cast shadows still appear on it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from abrdf.camera import CameraModel, SceneTransform, camera_rays
from abrdf.dataset.io import write_normal_png, write_png, write_sidecar
from abrdf.dataset.scene import image_path, view_dir
from abrdf.errors import ConfigurationError
from abrdf.renderer import tonemap

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True)
class SyntheticScene:
    sphere_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sphere_radius: float = 0.5
    albedo: tuple[float, float, float] = (0.8, 0.6, 0.5)
    occluder_center: tuple[float, float, float] = (0.5, 0.5, 0.0)
    occluder_radius: float = 0.15
    camera_radius: float = 1.5
    focal: float = 70.0
    light_cone_deg: float = 45.0
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        c0, c1 = np.array(self.sphere_center), np.array(self.occluder_center)
        if np.linalg.norm(c0 - c1) <= self.sphere_radius + self.occluder_radius:
            raise ConfigurationError("main sphere and occluder intersect")
        if self.camera_radius <= np.linalg.norm(c1) + self.occluder_radius:
            raise ConfigurationError("camera ring passes through the occluder")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def camera_ring(scene: SyntheticScene, n_views: int, resolution: int) -> list[CameraModel]:
    """Cameras evenly spaced on the equator, looking at the origin."""
    cams = []
    for k in range(n_views):
        phi = 2.0 * np.pi * k / n_views
        eye = scene.camera_radius * np.array([np.cos(phi), np.sin(phi), 0.0])
        cams.append(CameraModel.look_at(eye, (0, 0, 0), scene.up, scene.focal, resolution, resolution))
    return cams


def cone_directions(axis, n: int, max_angle_deg: float, phase: float = 0.0) -> np.ndarray:
    """``n`` unit vectors spread over the cone of half-angle ``max_angle_deg`` around ``axis``.

    Sunflower layout: polar angle grows like ``sqrt(k)``, azimuth by the
    golden angle; ``phase`` shifts the whole pattern.
    """
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    k = np.arange(n) + 0.5 + phase
    theta = np.radians(max_angle_deg) * np.sqrt(np.clip(k / n, 0.0, 1.0))
    phi = GOLDEN_ANGLE * k + phase * np.pi
    d = (np.cos(theta)[:, None] * axis + np.sin(theta)[:, None]
         * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2))
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def view_lights(scene: SyntheticScene, camera: CameraModel, n_lights: int, phase: float = 0.0) -> np.ndarray:
    return cone_directions(-camera.forward, n_lights, scene.light_cone_deg, phase)


def ray_sphere(origins, directions, center, radius) -> np.ndarray:
    """Nearest positive hit distance per ray, ``inf`` on a miss. Directions are unit."""
    oc = origins - np.asarray(center, dtype=np.float64)
    b = np.sum(oc * directions, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    return np.where(hit, t, np.inf)


@dataclass
class ViewTruth:
    mask: np.ndarray         # (H, W) bool
    normals: np.ndarray      # (H, W, 3), zero outside the mask
    points: np.ndarray       # (H, W, 3)
    depth: np.ndarray        # (H, W), inf outside the mask


@dataclass
class LightTruth:
    linear: np.ndarray       # (H, W, 3)
    visibility: np.ndarray   # (H, W) 1 lit, 0 self- or cast-shadowed
    cast: np.ndarray         # (H, W) bool, occluder blocks an otherwise lit point
    lit: np.ndarray          # (H, W) bool, facing the light and unoccluded
    attached: np.ndarray     # (H, W) bool, n.s <= 0 inside the mask


def view_truth(scene: SyntheticScene, camera: CameraModel,
               transform: SceneTransform = SceneTransform()) -> ViewTruth:
    o, d = camera_rays(camera, transform)
    t = ray_sphere(o, d, scene.sphere_center, scene.sphere_radius)
    mask = np.isfinite(t)
    pts = o + np.where(mask, t, 0.0)[:, None] * d
    n = (pts - np.asarray(scene.sphere_center)) / scene.sphere_radius
    n = np.where(mask[:, None], n / np.linalg.norm(n, axis=-1, keepdims=True), 0.0)
    H, W = camera.height, camera.width
    return ViewTruth(mask.reshape(H, W), n.reshape(H, W, 3), pts.reshape(H, W, 3), t.reshape(H, W))


def light_truth(scene: SyntheticScene, vt: ViewTruth, light) -> LightTruth:
    s = np.asarray(light, dtype=np.float64)
    s = s / np.linalg.norm(s)
    n = vt.normals.reshape(-1, 3)
    mask = vt.mask.reshape(-1)
    cos = n @ s
    facing = mask & (cos > 0.0)
    pts = vt.points.reshape(-1, 3) + 1e-6 * n
    blocked = np.isfinite(ray_sphere(pts, np.broadcast_to(s, pts.shape), scene.occluder_center,
                                     scene.occluder_radius))
    cast = facing & blocked
    lit = facing & ~blocked
    lin = (np.asarray(scene.albedo) / np.pi)[None, :] * np.where(lit, cos, 0.0)[:, None]
    shape = vt.mask.shape
    return LightTruth(lin.reshape(shape + (3,)), lit.astype(np.float64).reshape(shape),
                      cast.reshape(shape), lit.reshape(shape), (mask & ~facing).reshape(shape))


def generate_synthetic(root, scene: SyntheticScene = SyntheticScene(), n_views: int = 16,
                       n_lights: int = 16, resolution: int = 64) -> Path:
    """Write a complete dataset (images, masks, metadata, ground truth) under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cams = camera_ring(scene, n_views, resolution)
    all_lights = []
    for v, cam in enumerate(cams):
        lights = view_lights(scene, cam, n_lights)
        all_lights.append(lights)
        vt = view_truth(scene, cam)
        vdir = view_dir(root, v)
        write_png(vdir / "mask.png", vt.mask.astype(np.float64))
        write_sidecar(vdir / "normals.bin", vt.normals)
        write_normal_png(vdir / "normals.png", vt.normals)
        vis = []
        for k, s in enumerate(lights):
            lt = light_truth(scene, vt, s)
            write_png(image_path(root, v, k), tonemap(lt.linear))
            vis.append(lt.visibility)
        write_sidecar(vdir / "shadows.bin", np.stack(vis))
    (root / "cameras.json").write_text(json.dumps({
        "cameras": [c.to_dict() for c in cams],
        "metadata": {"synthetic_scene": scene.to_dict()},
    }, indent=1))
    (root / "lights.json").write_text(json.dumps({"lights": [l.tolist() for l in all_lights]}, indent=1))
    return root


def scene_from_dataset(dataset) -> SyntheticScene:
    d = dataset.metadata.get("synthetic_scene")
    if d is None:
        raise ConfigurationError("dataset carries no synthetic scene description")
    return SyntheticScene.from_dict(d)
