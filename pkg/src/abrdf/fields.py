"""Geometry, BRDF and shadow networks and the pointwise shading model.

Each model instance holds two copies of every network, ``coarse.*`` and
``fine.*``, in one :class:`ParameterBlock`. The functions suffixed
``_apply`` work on tape variables and are what rendering and training use;
the plain versions wrap them for numpy inputs.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from abrdf.diffcore import tape as T
from abrdf.diffcore.mlp import MlpArchitecture, glorot_init, mlp_apply
from abrdf.diffcore.params import ParameterBlock
from abrdf.encoding import EncodingConfig, positional_encode
from abrdf.errors import ConfigurationError

VARIANTS = ("neural_brdf", "lambertian")
NETS = ("coarse", "fine")
NORMAL_EPS = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "neural_brdf"
    num_frequencies: int = 10
    geo_depth: int = 8
    geo_width: int = 256
    geo_skips: tuple[int, ...] = (4,)
    latent_dim: int = 256
    brdf_depth: int = 2
    brdf_width: int = 128
    shadow_depth: int = 2
    shadow_width: int = 128
    albedo_scale: float = 1.0 / np.pi   # Lambertian BRDF = albedo_scale * sigmoid head

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        object.__setattr__(self, "geo_skips", tuple(int(s) for s in self.geo_skips))

    @classmethod
    def desk(cls, variant: str = "lambertian") -> "ModelConfig":
        """Reduced networks for CPU-scale runs."""
        return cls(variant=variant, geo_depth=4, geo_width=64, geo_skips=(), latent_dim=64,
                   brdf_width=64, shadow_width=64, num_frequencies=6)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geo_skips"] = list(self.geo_skips)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "geo_skips": tuple(d.get("geo_skips", ()))})

    @property
    def encoding(self) -> EncodingConfig:
        return EncodingConfig(self.num_frequencies, include_input=True)

    # architectures -----------------------------------------------------
    @property
    def trunk(self) -> MlpArchitecture:
        return MlpArchitecture.simple(self.encoding.output_dim(3), self.geo_width, self.geo_depth - 1,
                                      self.geo_width, out_act="relu", skips=self.geo_skips)

    @property
    def sigma_head(self) -> MlpArchitecture:
        return MlpArchitecture((self.geo_width, 1), ("softplus",))

    @property
    def normal_head(self) -> MlpArchitecture:
        return MlpArchitecture((self.geo_width, 3), ("linear",))

    @property
    def latent_head(self) -> MlpArchitecture:
        return MlpArchitecture((self.geo_width, self.latent_dim), ("linear",))

    @property
    def brdf(self) -> MlpArchitecture:
        return MlpArchitecture.simple(2 + self.latent_dim, self.brdf_width, self.brdf_depth, 3,
                                      out_act="softplus")

    @property
    def albedo(self) -> MlpArchitecture:
        return MlpArchitecture((self.latent_dim, 3), ("sigmoid",))

    @property
    def shadow(self) -> MlpArchitecture:
        return MlpArchitecture.simple(3 + self.latent_dim, self.shadow_width, self.shadow_depth, 1,
                                      out_act="sigmoid")

    def networks(self, net: str) -> list[tuple[str, MlpArchitecture]]:
        out = [
            (f"{net}.geo.trunk", self.trunk),
            (f"{net}.geo.sigma", self.sigma_head),
            (f"{net}.geo.normal", self.normal_head),
            (f"{net}.geo.latent", self.latent_head),
        ]
        if self.variant == "neural_brdf":
            out.append((f"{net}.brdf", self.brdf))
        else:
            out.append((f"{net}.albedo", self.albedo))
        out.append((f"{net}.shadow", self.shadow))
        return out

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [entry for net in NETS for prefix, arch in self.networks(net)
                for entry in arch.layout(prefix)]

    def init_params(self, seed: int | np.random.Generator = 0) -> ParameterBlock:
        rng = np.random.default_rng(seed)
        params = ParameterBlock.zeros(self.layout())
        for net in NETS:
            for prefix, arch in self.networks(net):
                glorot_init(params, arch, prefix, rng)
        return params


@dataclass
class FieldOutput:
    latent: np.ndarray
    normal: np.ndarray
    sigma: np.ndarray


@dataclass
class BrdfAngles:
    theta_i: np.ndarray
    theta_h: np.ndarray
    degenerate: np.ndarray


# ---------------------------------------------------------------------------
# tape-level building blocks


def geometry_apply(p: Mapping[str, T.Var], cfg: ModelConfig, x: np.ndarray, net: str = "fine",
                   sigma_noise: np.ndarray | None = None):
    """Positions ``(P, 3)`` -> ``(latent, unit normal, sigma)`` tape variables.

    ``sigma_noise`` (``(P,)``) is added to the density pre-activation.
    """
    enc = p[f"{net}.geo.trunk.layer0.weight"].tape.constant(positional_encode(x, cfg.encoding))
    h = mlp_apply(p, cfg.trunk, enc, f"{net}.geo.trunk")
    if sigma_noise is None:
        sigma = mlp_apply(p, cfg.sigma_head, h, f"{net}.geo.sigma")[:, 0]
    else:
        raw = mlp_apply(p, MlpArchitecture(cfg.sigma_head.layer_widths, ("linear",)), h, f"{net}.geo.sigma")
        sigma = T.softplus(raw[:, 0] + sigma_noise)
    raw = mlp_apply(p, cfg.normal_head, h, f"{net}.geo.normal")
    latent = mlp_apply(p, cfg.latent_head, h, f"{net}.geo.latent")
    return latent, normalize_apply(raw), sigma


def normalize_apply(raw: T.Var) -> T.Var:
    """Unit-length rows; rows shorter than 1e-8 are nudged along +z first."""
    short = np.linalg.norm(raw.value, axis=-1) < NORMAL_EPS
    if short.any():
        bump = np.zeros(raw.shape)
        bump[short, 2] = NORMAL_EPS
        raw = raw + bump
    return raw / T.sqrt((raw * raw).sum(axis=-1, keepdims=True))


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)


def half_vector(s: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit half vectors and a mask of the degenerate ``s = -v`` rows."""
    hsum = s + v
    norm = np.linalg.norm(hsum, axis=-1, keepdims=True)
    degenerate = norm[..., 0] < 1e-12
    return hsum / np.where(norm < 1e-12, 1.0, norm), degenerate


def brdf_angles_apply(n: T.Var, s: np.ndarray, v: np.ndarray) -> tuple[T.Var, T.Var]:
    """Reciprocal angle pair on the tape; see :func:`brdf_angles`."""
    h, degenerate = half_vector(s, v)
    cos_s = T.clip((n * s).sum(axis=-1), -1.0, 1.0)
    cos_v = T.clip((n * v).sum(axis=-1), -1.0, 1.0)
    theta_i = T.arccos(T.minimum(cos_s, cos_v))
    theta_h = T.arccos(T.clip((n * h).sum(axis=-1), -1.0, 1.0))
    if degenerate.any():
        theta_h = T.where_const(~degenerate, theta_h, np.pi / 2)
    return theta_i, theta_h


def brdf_apply(p, cfg: ModelConfig, theta_i: T.Var, theta_h: T.Var, z: T.Var, net: str = "fine") -> T.Var:
    inp = T.concat([theta_i.reshape(-1, 1), theta_h.reshape(-1, 1), z], axis=-1)
    return mlp_apply(p, cfg.brdf, inp, f"{net}.brdf")


def albedo_apply(p, cfg: ModelConfig, z: T.Var, net: str = "fine") -> T.Var:
    return mlp_apply(p, cfg.albedo, z, f"{net}.albedo")


def shadow_apply(p, cfg: ModelConfig, s: np.ndarray, z: T.Var, net: str = "fine") -> T.Var:
    inp = T.concat([z.tape.constant(np.broadcast_to(s, z.shape[:-1] + (3,))), z], axis=-1)
    return mlp_apply(p, cfg.shadow, inp, f"{net}.shadow")[:, 0]


def shade_apply(p, cfg: ModelConfig, z: T.Var, n: T.Var, s: np.ndarray, v: np.ndarray,
                net: str = "fine", hold_appearance: bool = False):
    """Reflected radiance ``f_r * shadow * max(0, n.s)`` per point.

    With ``hold_appearance`` the BRDF and shadow outputs enter as constants,
    so the loss only reaches density, normals and the trunk through ``n``.
    Returns ``(radiance (P,3), shadow (P,), albedo (P,3) or None)``.
    """
    cos_i = T.maximum((n * s).sum(axis=-1), 0.0)
    shadow = shadow_apply(p, cfg, s, z, net)
    albedo = None
    if cfg.variant == "lambertian":
        albedo = albedo_apply(p, cfg, z, net)
        rho = albedo * cfg.albedo_scale
    else:
        theta_i, theta_h = brdf_angles_apply(n, s, v)
        rho = brdf_apply(p, cfg, theta_i, theta_h, z, net)
    if hold_appearance:
        rho = rho.tape.constant(rho.value)
        shadow = shadow.tape.constant(shadow.value)
    radiance = rho * (shadow * cos_i).reshape(-1, 1)
    return radiance, shadow, albedo


# ---------------------------------------------------------------------------
# numpy-facing wrappers


def _points(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 1 else (x, False)


def _inference(params: ParameterBlock):
    tape = T.Tape(record=False)
    return tape, tape.watch(params)


def geometry_eval(params: ParameterBlock, cfg: ModelConfig, x, net: str = "fine") -> FieldOutput:
    x, single = _points(x)
    _, p = _inference(params)
    z, n, sigma = geometry_apply(p, cfg, x, net)
    out = FieldOutput(z.value, n.value, sigma.value)
    if single:
        out = FieldOutput(out.latent[0], out.normal[0], out.sigma[0])
    return out


def brdf_angles(n, s, v) -> BrdfAngles:
    """Reciprocal ``(theta_i, theta_h)`` for unit ``n, s, v`` (any leading shape).

    ``theta_h`` is the angle between ``n`` and the half vector; ``theta_i`` is
    the larger of the light and view polar angles, ``arccos(min(n.s, n.v))``,
    which equals ``arccos(n.s)`` whenever the light is the more oblique
    direction and keeps the pair symmetric under ``s <-> v``. When
    ``s = -v`` the half vector is undefined: ``theta_h = pi/2`` and the
    ``degenerate`` flag is set.
    """
    n, s, v = (np.asarray(a, dtype=np.float64) for a in (n, s, v))
    h, degenerate = half_vector(s, v)
    theta_i = np.arccos(np.minimum(_dot(n, s), _dot(n, v)))
    theta_h = np.where(degenerate, np.pi / 2, np.arccos(_dot(n, h)))
    return BrdfAngles(theta_i, theta_h, degenerate)


def brdf_eval(params: ParameterBlock, cfg: ModelConfig, angles: BrdfAngles, z, net: str = "fine") -> np.ndarray:
    z, single = _points(z)
    tape, p = _inference(params)
    ti = tape.constant(np.atleast_1d(angles.theta_i))
    th = tape.constant(np.atleast_1d(angles.theta_h))
    out = brdf_apply(p, cfg, ti, th, tape.constant(z), net).value
    return out[0] if single else out


def lambertian_albedo(params: ParameterBlock, cfg: ModelConfig, z, net: str = "fine") -> np.ndarray:
    z, single = _points(z)
    tape, p = _inference(params)
    out = albedo_apply(p, cfg, tape.constant(z), net).value
    return out[0] if single else out


def shadow_eval(params: ParameterBlock, cfg: ModelConfig, s, z, net: str = "fine"):
    z, single = _points(z)
    tape, p = _inference(params)
    out = shadow_apply(p, cfg, np.asarray(s, dtype=np.float64), tape.constant(z), net).value
    return float(out[0]) if single else out


def point_radiance(params: ParameterBlock, cfg: ModelConfig, x, s, v, net: str = "fine") -> np.ndarray:
    """Linear RGB leaving ``x`` toward ``v`` under a unit white light from ``s``."""
    x, single = _points(x)
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), x.shape)
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape)
    _, p = _inference(params)
    z, n, _ = geometry_apply(p, cfg, x, net)
    rad, _, _ = shade_apply(p, cfg, z, n, s, v, net)
    return rad.value[0] if single else rad.value
