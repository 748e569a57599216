"""Multiview photometric-stereo datasets on disk and ray batching.

Directory layout::

    root/cameras.json          {"cameras": [camera, ...], "transform": {...}?}
    root/lights.json           {"lights": [[[x, y, z], ...] per view]}  (world frame, unit)
    root/view_01/mask.png
    root/view_01/image_001.png ...

Camera records hold ``fx fy cx cy width height R t`` with ``R, t`` mapping
world to camera. Optional ground truth per view: ``normals.bin`` (world-frame
unit normals, float sidecar) and ``shadows.bin`` (``(L, H, W)`` visibility).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from abrdf.camera import (CAMERA_RADIUS, CameraModel, SceneTransform, camera_rays,
                          ray_bounds, transform_light)
from abrdf.dataset.io import read_image, read_mask, read_sidecar
from abrdf.errors import DatasetError

log = logging.getLogger(__name__)

EAGER_LIMIT_BYTES = 512 * 1024 * 1024


def view_dir(root: Path, v: int) -> Path:
    return Path(root) / f"view_{v + 1:02d}"


def image_path(root: Path, v: int, light: int) -> Path:
    return view_dir(root, v) / f"image_{light + 1:03d}.png"


@dataclass
class ViewData:
    camera: CameraModel
    mask: np.ndarray                  # (H, W) bool
    lights: np.ndarray                # (L, 3) unit, normalized frame
    image_paths: list[Path]
    images: np.ndarray | None = None  # (L, H, W, 3) when loaded eagerly

    @property
    def resolution(self) -> tuple[int, int]:
        return self.camera.width, self.camera.height


@dataclass
class SceneDataset:
    root: Path
    views: list[ViewData]
    transform: SceneTransform
    metadata: dict = field(default_factory=dict)
    _rays: dict = field(default_factory=dict, repr=False)

    @property
    def num_views(self) -> int:
        return len(self.views)

    @property
    def cameras(self) -> list[CameraModel]:
        return [v.camera for v in self.views]

    @property
    def lights(self) -> list[np.ndarray]:
        return [v.lights for v in self.views]

    def image(self, view: int, light: int) -> np.ndarray:
        vd = self.views[view]
        if vd.images is not None:
            return vd.images[light]
        return read_image(vd.image_paths[light])

    def view_rays(self, view: int):
        """Cached ``(origins, directions, near, far)`` for every pixel of a view."""
        if view not in self._rays:
            o, d = camera_rays(self.views[view].camera, self.transform)
            near, far = ray_bounds(o, d)
            self._rays[view] = (o, d, near, far)
        return self._rays[view]

    def ground_truth_normals(self, view: int) -> np.ndarray:
        path = view_dir(self.root, view) / "normals.bin"
        if not path.exists():
            raise DatasetError(f"no ground-truth normals at {path}")
        return read_sidecar(path).astype(np.float64)

    def ground_truth_shadows(self, view: int) -> np.ndarray:
        path = view_dir(self.root, view) / "shadows.bin"
        if not path.exists():
            raise DatasetError(f"no ground-truth shadows at {path}")
        return read_sidecar(path).astype(np.float64)


def _load_json(path: Path):
    if not path.exists():
        raise DatasetError(f"missing {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from None


def load_dataset(root, eager: bool | None = None) -> SceneDataset:
    """Read a dataset directory; ``eager=None`` loads pixels only if they fit in memory comfortably."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    cam_doc = _load_json(root / "cameras.json")
    light_doc = _load_json(root / "lights.json")
    cam_records = cam_doc["cameras"] if isinstance(cam_doc, dict) else cam_doc
    light_records = light_doc["lights"] if isinstance(light_doc, dict) else light_doc
    if not cam_records:
        raise DatasetError(f"{root / 'cameras.json'} lists no cameras")
    if len(light_records) != len(cam_records):
        raise DatasetError(
            f"{root / 'lights.json'} has {len(light_records)} views, cameras.json has {len(cam_records)}"
        )
    cameras = [CameraModel.from_dict(c) for c in cam_records]
    if isinstance(cam_doc, dict) and cam_doc.get("transform"):
        transform = SceneTransform.from_dict(cam_doc["transform"])
    else:
        transform = SceneTransform.from_cameras(cameras)
    dist = max(np.linalg.norm(transform.apply(c.center)) for c in cameras)
    if dist > CAMERA_RADIUS + 1e-6:
        raise DatasetError(f"normalized camera centres reach radius {dist:.3f} > {CAMERA_RADIUS}")

    total_px = 0
    views = []
    for v, (cam, lights) in enumerate(zip(cameras, light_records)):
        vdir = view_dir(root, v)
        mask_path = vdir / "mask.png"
        if not mask_path.exists():
            raise DatasetError(f"missing mask {mask_path}")
        lights = np.asarray(lights, dtype=np.float64).reshape(-1, 3)
        norms = np.linalg.norm(lights, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            log.warning("view %d: %d non-unit light directions renormalized", v + 1,
                        int(np.sum(np.abs(norms - 1.0) > 1e-6)))
        # exactly unit rows pass through untouched so files round-trip bit for bit
        lights = np.where(np.abs(norms - 1.0)[:, None] > 1e-12, transform_light(lights, transform), lights)
        paths = [image_path(root, v, k) for k in range(len(lights))]
        for p in paths:
            if not p.exists():
                raise DatasetError(f"missing image {p}")
            with Image.open(p) as im:
                if im.size != (cam.width, cam.height):
                    raise DatasetError(f"{p} is {im.size[0]}x{im.size[1]}, camera expects "
                                       f"{cam.width}x{cam.height}")
        mask = read_mask(mask_path)
        if mask.shape != (cam.height, cam.width):
            raise DatasetError(f"{mask_path} has shape {mask.shape[::-1]}, expected "
                               f"{cam.width}x{cam.height}")
        extra = sorted(set(vdir.glob("image_*.png")) - set(paths))
        if extra:
            raise DatasetError(f"image without light direction: {extra[0]}")
        total_px += len(paths) * cam.width * cam.height
        views.append(ViewData(cam, mask, lights, paths))

    if eager is None:
        eager = total_px * 3 * 8 <= EAGER_LIMIT_BYTES
    if eager:
        for vd in views:
            vd.images = np.stack([read_image(p) for p in vd.image_paths])
    meta = {
        "num_views": len(views),
        "lights_per_view": [len(vd.lights) for vd in views],
        "resolution": [list(vd.resolution) for vd in views],
    }
    meta.update(cam_doc.get("metadata", {}) if isinstance(cam_doc, dict) else {})
    return SceneDataset(root, views, transform, meta)


@dataclass
class RayBatch:
    origins: np.ndarray        # (B, 3)
    directions: np.ndarray     # (B, 3)
    t_near: np.ndarray         # (B,)
    t_far: np.ndarray          # (B,)
    gt_rgb: np.ndarray         # (B, 3) LDR in [0, 1]
    is_foreground: np.ndarray  # (B,) bool
    light_dir: np.ndarray      # (B, 3)
    view: np.ndarray           # (B,) int
    light: np.ndarray          # (B,) int
    pixel: np.ndarray          # (B,) flat pixel index

    def __len__(self) -> int:
        return len(self.origins)

    def subset(self, idx) -> "RayBatch":
        return RayBatch(**{k: v[idx] for k, v in vars(self).items()})

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in vars(self).items()}


def _pixel_pools(dataset: SceneDataset):
    pools = dataset._rays.get("pools")
    if pools is None:
        pools = []
        for vd in dataset.views:
            m = vd.mask.reshape(-1)
            pools.append((np.flatnonzero(m), np.flatnonzero(~m)))
        dataset._rays["pools"] = pools
    return pools


def sample_ray_batch(dataset: SceneDataset, batch_size: int, fg_fraction: float = 0.5,
                     rng: np.random.Generator | None = None) -> RayBatch:
    """Draw rays over (view, light, pixel); foreground count is ``round(batch * fg_fraction)``."""
    rng = np.random.default_rng() if rng is None else rng
    pools = _pixel_pools(dataset)
    n_fg = int(round(batch_size * fg_fraction))
    want_fg = np.arange(batch_size) < n_fg
    views = rng.integers(0, dataset.num_views, size=batch_size)
    lights = np.array([rng.integers(0, len(dataset.views[v].lights)) for v in views], dtype=np.int64)
    u = rng.uniform(size=batch_size)
    pixels = np.empty(batch_size, dtype=np.int64)
    is_fg = np.empty(batch_size, dtype=bool)
    for i, v in enumerate(views):
        fg, bg = pools[v]
        pool, flag = (fg, True) if (want_fg[i] and len(fg)) or not len(bg) else (bg, False)
        pixels[i] = pool[min(int(u[i] * len(pool)), len(pool) - 1)]
        is_fg[i] = flag

    out = {k: [] for k in ("o", "d", "n", "f", "c", "s")}
    for i, (v, l, px) in enumerate(zip(views, lights, pixels)):
        o, d, near, far = dataset.view_rays(v)
        out["o"].append(o[px])
        out["d"].append(d[px])
        out["n"].append(near[px])
        out["f"].append(far[px])
        img = dataset.image(v, l)
        out["c"].append(img.reshape(-1, 3)[px])
        out["s"].append(dataset.views[v].lights[l])
    return RayBatch(np.array(out["o"]), np.array(out["d"]), np.array(out["n"]), np.array(out["f"]),
                    np.array(out["c"]), is_fg, np.array(out["s"]), views, lights, pixels)
