"""Pinhole cameras, ray generation and the normalized scene frame.

Conventions: right-handed world; camera frame has +x right, +y down and
looks along +z. ``R`` and ``t`` map world to camera, ``x_cam = R x + t``.
Pixel ``(u, v)`` is column/row with integer pixel ``(i, j)`` centred at
``(i + 0.5, j + 0.5)``. Light directions point from the surface toward the
light; view directions point toward the camera.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from abrdf.errors import ConfigurationError, DomainError

T_NEAR = 0.1
T_FAR = 4.0
SCENE_BOX = 2.0          # rays are clipped to [-SCENE_BOX, SCENE_BOX]^3
CAMERA_RADIUS = 1.5      # normalized camera distance bound


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray      # world -> camera
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or not np.isclose(np.linalg.det(R), 1.0, atol=1e-9):
            raise ConfigurationError("camera rotation must be orthonormal with det +1")
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise ConfigurationError("camera intrinsics must be positive")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2].copy()

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, x_world) -> np.ndarray:
        """World points ``(..., 3)`` to pixel coordinates ``(..., 2)``."""
        xc = np.asarray(x_world, dtype=np.float64) @ self.rotation.T + self.translation
        return np.stack([self.fx * xc[..., 0] / xc[..., 2] + self.cx,
                         self.fy * xc[..., 1] / xc[..., 2] + self.cy], axis=-1)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "R": self.rotation.tolist(), "t": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), np.array(d["R"], dtype=np.float64),
                   np.array(d["t"], dtype=np.float64))

    @classmethod
    def look_at(cls, eye, target, up, focal: float, width: int, height: int) -> "CameraModel":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z = z / np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            raise ConfigurationError("up vector parallel to the viewing direction")
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(focal, focal, width / 2.0, height / 2.0, width, height, R, -R @ eye)


@dataclass(frozen=True)
class SceneTransform:
    """Uniform scale then translate: ``x_norm = scale * x_world + translation``."""

    scale: float = 1.0
    translation: np.ndarray = np.zeros(3)

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigurationError("scene scale must be positive")
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, x) -> np.ndarray:
        return self.scale * np.asarray(x, dtype=np.float64) + self.translation

    def invert(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.translation) / self.scale

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict | None) -> "SceneTransform":
        if not d:
            return cls()
        return cls(float(d["scale"]), np.array(d["translation"], dtype=np.float64))

    @classmethod
    def from_cameras(cls, cameras, radius: float = CAMERA_RADIUS) -> "SceneTransform":
        """Centre on the point closest to all optical axes; cameras end up at most ``radius`` away."""
        centers = np.array([c.center for c in cameras])
        A = np.zeros((3, 3))
        b = np.zeros(3)
        for c in cameras:
            P = np.eye(3) - np.outer(c.forward, c.forward)
            A += P
            b += P @ c.center
        if np.linalg.cond(A) < 1e8:
            focus = np.linalg.solve(A, b)
        else:
            focus = centers.mean(axis=0)
        dist = np.linalg.norm(centers - focus, axis=1).max()
        scale = radius / dist if dist > 0 else 1.0
        return cls(scale, -scale * focus)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = T_NEAR
    t_far: float = T_FAR


def box_exit(origins: np.ndarray, directions: np.ndarray, half: float = SCENE_BOX) -> np.ndarray:
    """Distance at which rays starting inside the box leave it."""
    with np.errstate(divide="ignore"):
        inv = 1.0 / directions
    t1 = (half - origins) * inv
    t2 = (-half - origins) * inv
    return np.nan_to_num(np.maximum(t1, t2), nan=np.inf, posinf=np.inf).min(axis=-1)


def pixel_to_ray(camera: CameraModel, pixel, transform: SceneTransform = SceneTransform(),
                 t_near: float = T_NEAR, t_far: float = T_FAR) -> Ray:
    u, v = (float(p) for p in pixel)
    if not (0.0 <= u <= camera.width and 0.0 <= v <= camera.height):
        raise DomainError(f"pixel {(u, v)} outside the {camera.width}x{camera.height} image")
    o, d = camera_rays(camera, transform, np.array([[u, v]]))
    far = min(t_far, float(box_exit(o, d)[0]))
    return Ray(o[0], d[0], t_near, max(far, t_near + 1e-6))


def pixel_grid(camera: CameraModel) -> np.ndarray:
    """Pixel-centre coordinates ``(H*W, 2)`` in row-major order."""
    jj, ii = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    return np.stack([ii.ravel() + 0.5, jj.ravel() + 0.5], axis=-1).astype(np.float64)


def camera_rays(camera: CameraModel, transform: SceneTransform = SceneTransform(),
                pixels=None) -> tuple[np.ndarray, np.ndarray]:
    """Normalized-frame origins and unit directions for ``pixels`` (default: all centres)."""
    px = pixel_grid(camera) if pixels is None else np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d_cam = np.stack([(px[:, 0] - camera.cx) / camera.fx,
                      (px[:, 1] - camera.cy) / camera.fy,
                      np.ones(len(px))], axis=-1)
    d = d_cam @ camera.rotation          # rows: R^T d_cam
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(transform.apply(camera.center), d.shape).copy()
    return o, d


def ray_bounds(origins: np.ndarray, directions: np.ndarray, t_near: float = T_NEAR,
               t_far: float = T_FAR) -> tuple[np.ndarray, np.ndarray]:
    far = np.minimum(t_far, box_exit(origins, directions))
    far = np.maximum(far, t_near + 1e-6)
    return np.full(len(origins), t_near), far


def transform_light(s_world, transform: SceneTransform = SceneTransform()) -> np.ndarray:
    """Light directions in the normalized frame (scale/translation leave them unchanged)."""
    s = np.asarray(s_world, dtype=np.float64)
    norm = np.linalg.norm(s, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DomainError("zero-length light direction")
    return s / norm


def normal_world_to_camera(n, camera: CameraModel) -> np.ndarray:
    """Rotate world normals ``(..., 3)`` into the camera frame."""
    out = np.asarray(n, dtype=np.float64) @ camera.rotation.T
    norm = np.linalg.norm(out, axis=-1, keepdims=True)
    return out / np.where(norm > 0, norm, 1.0)


def max_view_light_angle(camera: CameraModel, lights) -> float:
    """Largest angle in degrees between any light and the camera's view vector."""
    view = -camera.forward
    s = transform_light(lights)
    return float(np.degrees(np.arccos(np.clip(s @ view, -1.0, 1.0))).max())
