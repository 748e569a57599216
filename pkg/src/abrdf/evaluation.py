"""Normal-map scoring, whole-image rendering and the pose report."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from abrdf.camera import CameraModel, SceneTransform, camera_rays, normal_world_to_camera, ray_bounds
from abrdf.diffcore import tape as T
from abrdf.diffcore.params import ParameterBlock
from abrdf.errors import DomainError
from abrdf.fields import ModelConfig
from abrdf.renderer import RenderConfig, render_pass, render_rays, stratified_samples, hierarchical_samples, tonemap


def mean_angular_error(est_normals, gt_normals, mask) -> float:
    """Mean angle in degrees between renormalized estimates and ground truth over ``mask``.

    The angle comes from ``atan2(|e x g|, e . g)``: equal to the clamped
    arccos of the dot product but exact at 0 and 180 degrees.
    """
    est = np.asarray(est_normals, dtype=np.float64)
    gt = np.asarray(gt_normals, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if est.shape != gt.shape or est.shape[:-1] != mask.shape:
        raise DomainError(f"shape mismatch: est {est.shape}, gt {gt.shape}, mask {mask.shape}")
    if not mask.any():
        raise DomainError("empty mask")
    e = _unit(est[mask])
    g = _unit(gt[mask])
    sin = np.linalg.norm(np.cross(e, g), axis=-1)
    cos = np.sum(e * g, axis=-1)
    return float(np.degrees(np.arctan2(sin, cos)).mean())


def _unit(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norm > 0, norm, 1.0)


@dataclass
class ViewRender:
    rgb_linear: np.ndarray     # (H, W, 3)
    rgb: np.ndarray            # tonemapped
    normal_world: np.ndarray   # renormalized, zero where alpha == 0
    shadow: np.ndarray         # (H, W)
    albedo: np.ndarray | None
    alpha: np.ndarray
    depth: np.ndarray

    def normal_camera(self, camera: CameraModel) -> np.ndarray:
        return normal_world_to_camera(self.normal_world, camera)

    def buffer(self, name: str) -> np.ndarray:
        return {"rgb": self.rgb, "normal": self.normal_world, "shadow": self.shadow,
                "albedo": self.albedo, "depth": self.depth, "alpha": self.alpha}[name]


def render_view(params: ParameterBlock, cfg: ModelConfig, camera: CameraModel, light,
                transform: SceneTransform = SceneTransform(),
                rcfg: RenderConfig = RenderConfig.desk(perturb=False)) -> ViewRender:
    o, d = camera_rays(camera, transform)
    near, far = ray_bounds(o, d)
    s = np.asarray(light, dtype=np.float64)
    s = s / np.linalg.norm(s)
    res = render_rays(params, cfg, o, d, s, rcfg, near, far)
    H, W = camera.height, camera.width
    n = res.normal_buffer
    nn = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.where(nn > 0, n / np.where(nn > 0, nn, 1.0), 0.0)
    lin = res.rgb_linear.reshape(H, W, 3)
    return ViewRender(
        rgb_linear=lin,
        rgb=tonemap(np.maximum(lin, 0.0), rcfg.gamma),
        normal_world=n.reshape(H, W, 3),
        shadow=res.shadow_buffer.reshape(H, W),
        albedo=None if res.albedo_buffer is None else res.albedo_buffer.reshape(H, W, 3),
        alpha=res.alpha.reshape(H, W),
        depth=res.depth.reshape(H, W),
    )


def mean_background_density(params: ParameterBlock, cfg: ModelConfig, dataset,
                            rcfg: RenderConfig = RenderConfig.desk(perturb=False)) -> float:
    """Mean density over coarse and fine samples of every background ray in the dataset."""
    total = 0.0
    count = 0
    for v, vd in enumerate(dataset.views):
        o, d, near, far = dataset.view_rays(v)
        bg = ~vd.mask.reshape(-1)
        if not bg.any():
            continue
        o, d, near, far = o[bg], d[bg], near[bg], far[bg]
        for lo in range(0, len(o), rcfg.chunk):
            sl = slice(lo, lo + rcfg.chunk)
            tape = T.Tape(record=False)
            p = tape.watch(params)
            coarse = stratified_samples(near[sl], far[sl], rcfg.n_coarse, None, rcfg.last_delta)
            no_shade = np.zeros(len(o[sl]), dtype=bool)
            dummy = np.zeros_like(o[sl])
            c = render_pass(p, cfg, "coarse", o[sl], d[sl], coarse, dummy, shade_mask=no_shade)
            fine = hierarchical_samples(c.weights.value, coarse.edges, rcfg.n_fine, None, coarse_t=coarse.t,
                                         t_far=far[sl], last_delta=rcfg.last_delta)
            f = render_pass(p, cfg, "fine", o[sl], d[sl], fine, dummy, shade_mask=no_shade)
            total += float(c.sigma.value.sum() + f.sigma.value.sum())
            count += c.sigma.value.size + f.sigma.value.size
    return total / max(count, 1)


@dataclass
class EvalReport:
    """Per-object, per-pose mean angular errors in degrees."""

    rows: dict[str, list[float]] = field(default_factory=dict)

    def add(self, obj: str, errors) -> None:
        errs = [float(e) for e in errors]
        if any(not 0.0 <= e <= 180.0 for e in errs):
            raise DomainError("angular errors must lie in [0, 180]")
        self.rows[obj] = errs

    def mean(self, obj: str) -> float:
        return float(np.mean(self.rows[obj]))

    @property
    def num_poses(self) -> int:
        return max((len(r) for r in self.rows.values()), default=0)

    def header(self) -> list[str]:
        return ["object"] + [f"pose_{k + 1:02d}" for k in range(self.num_poses)] + ["mean"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for obj, errs in self.rows.items():
            w.writerow([obj] + [f"{e:.4f}" for e in errs] + [""] * (self.num_poses - len(errs))
                       + [f"{self.mean(obj):.4f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        """Aligned table with pose columns ``01..NN`` and ``Mean``, one decimal."""
        n = self.num_poses
        width = max([len(o) for o in self.rows] + [6])
        head = " " * width + "".join(f"{k + 1:02d}".rjust(6) for k in range(n)) + f"{'Mean':>7}"
        lines = [head]
        for obj, errs in self.rows.items():
            cells = "".join(f"{e:>6.1f}" for e in errs) + " " * 6 * (n - len(errs))
            lines.append(f"{obj:<{width}}{cells}{self.mean(obj):>7.1f}")
        return "\n".join(lines) + "\n"
