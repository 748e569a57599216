"""Ray sampling, emission-absorption compositing and tonemapping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from abrdf.camera import Ray
from abrdf.diffcore import tape as T
from abrdf.diffcore.params import ParameterBlock
from abrdf.errors import DomainError, NumericError
from abrdf.fields import ModelConfig, geometry_apply, shade_apply

LAST_DELTA = 1e10


@dataclass
class RaySamples:
    """Per-ray sample depths ``t`` and segment lengths ``deltas``, shape ``(R, N)``.

    ``edges`` (``(R, N+1)``) are the stratification bin boundaries when the
    samples came from :func:`stratified_samples`.
    """

    t: np.ndarray
    deltas: np.ndarray
    edges: np.ndarray | None = None

    @classmethod
    def from_t(cls, t, t_far=None, last_delta: float | None = LAST_DELTA, edges=None) -> "RaySamples":
        """Build from sorted depths. ``last_delta=None`` closes the final segment at ``t_far``."""
        t = np.atleast_2d(np.asarray(t, dtype=np.float64))
        deltas = np.empty_like(t)
        deltas[:, :-1] = np.diff(t, axis=-1)
        if last_delta is None:
            deltas[:, -1] = np.asarray(t_far, dtype=np.float64) - t[:, -1]
        else:
            deltas[:, -1] = last_delta
        return cls(t, deltas, edges)

    @property
    def num_rays(self) -> int:
        return self.t.shape[0]


@dataclass(frozen=True)
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 128
    gamma: float = 2.2
    deterministic_seed: int = 0
    perturb: bool = True
    last_delta: float | None = LAST_DELTA   # None closes the last segment at t_far
    density_noise: float = 0.0   # std of noise on the density pre-activation while training
    chunk: int = 1024

    @classmethod
    def desk(cls, **kw) -> "RenderConfig":
        return cls(**{"n_coarse": 32, "n_fine": 32, "last_delta": None, **kw})


@dataclass
class RenderResult:
    """Composited buffers. Batched renders carry a leading ray axis."""

    rgb_linear: np.ndarray
    alpha: np.ndarray
    normal_buffer: np.ndarray
    shadow_buffer: np.ndarray
    albedo_buffer: np.ndarray | None
    depth: np.ndarray
    coarse_weights: np.ndarray
    fine_weights: np.ndarray = field(default=None)
    coarse_rgb_linear: np.ndarray = field(default=None)


# ---------------------------------------------------------------------------
# sampling


def _uniforms(rng, shape) -> np.ndarray:
    """``rng`` may be a Generator, ``None`` (bin centres) or a pinned float."""
    if rng is None:
        return np.full(shape, 0.5)
    if isinstance(rng, (int, float)):
        return np.full(shape, float(rng))
    return rng.uniform(size=shape)


def stratified_samples(t_near, t_far, n: int, rng=None, last_delta: float | None = LAST_DELTA) -> RaySamples:
    """One uniform draw per evenly spaced bin of ``[t_near, t_far]``.

    ``t_near``/``t_far`` may be scalars or per-ray arrays.
    """
    near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    near, far = np.broadcast_arrays(near, far)
    if n < 1 or np.any(near >= far):
        raise DomainError("stratified sampling needs n >= 1 and t_near < t_far")
    frac = np.linspace(0.0, 1.0, n + 1)
    edges = near[:, None] + (far - near)[:, None] * frac
    u = _uniforms(rng, (len(near), n))
    t = edges[:, :-1] + (edges[:, 1:] - edges[:, :-1]) * u
    return RaySamples.from_t(t, far, last_delta, edges)


def sample_pdf(weights, edges, n: int, rng=None) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant pdf ``weights`` over ``edges``.

    Rows whose weights are all zero use a uniform pdf. Deterministic
    ``rng=None`` uses the quantiles ``(k + 0.5) / n``.
    """
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    e = np.atleast_2d(np.asarray(edges, dtype=np.float64))
    if np.any(w < 0):
        raise DomainError("sampling weights must be non-negative")
    total = w.sum(axis=-1, keepdims=True)
    pdf = np.where(total > 0, w / np.where(total > 0, total, 1.0), 1.0 / w.shape[-1])
    cdf = np.concatenate([np.zeros((len(w), 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (len(w), n)).copy()
    else:
        u = _uniforms(rng, (len(w), n))
    # bin index = number of interior cdf knots <= u
    idx = (u[:, :, None] >= cdf[:, None, 1:-1]).sum(axis=-1)
    lo = np.take_along_axis(cdf, idx, axis=-1)
    hi = np.take_along_axis(cdf, idx + 1, axis=-1)
    width = hi - lo
    frac = np.where(width > 0, (u - lo) / np.where(width > 0, width, 1.0), 0.0)
    e_lo = np.take_along_axis(e, idx, axis=-1)
    e_hi = np.take_along_axis(e, idx + 1, axis=-1)
    return e_lo + frac * (e_hi - e_lo)


def hierarchical_samples(coarse_weights, coarse_bins, n_fine: int, rng=None,
                         coarse_t=None, t_far=None, last_delta: float | None = LAST_DELTA) -> RaySamples:
    """Fine depths drawn from the coarse weights, merged with ``coarse_t`` if given."""
    fine = sample_pdf(coarse_weights, coarse_bins, n_fine, rng)
    if coarse_t is not None:
        fine = np.concatenate([np.atleast_2d(coarse_t), fine], axis=-1)
    fine = np.sort(fine, axis=-1)
    return RaySamples.from_t(fine, t_far, last_delta)


# ---------------------------------------------------------------------------
# compositing


def composite_weights(sigma, deltas):
    """Tape-aware weights ``w_i = T_i (1 - exp(-sigma_i delta_i))``."""
    if isinstance(sigma, T.Var):
        sd = sigma * deltas
        alpha = 1.0 - T.exp(-sd)
        trans = T.exp(-T.cumsum_exclusive(sd, axis=-1))
        return trans * alpha
    sd = np.asarray(sigma, dtype=np.float64) * deltas
    alpha = 1.0 - np.exp(-sd)
    excl = np.zeros_like(sd)
    excl[..., 1:] = np.cumsum(sd[..., :-1], axis=-1)
    trans = np.exp(-excl)
    return trans * alpha


def composite(samples: RaySamples, sigmas, values):
    """Composite per-sample ``values`` (``(R, N)`` or ``(R, N, C)``) along each ray.

    Returns ``(output, weights, alpha)``. Works on tape variables as well as
    plain arrays.
    """
    w = composite_weights(sigmas, samples.deltas)
    vals = values
    vshape = vals.shape
    if len(vshape) == len(w.shape):
        out = (w * vals).sum(axis=-1)
    else:
        out = (w.reshape(w.shape + (1,)) * vals).sum(axis=-2)
    alpha = w.sum(axis=-1)
    return out, w, alpha


# ---------------------------------------------------------------------------
# full ray rendering


@dataclass
class PassOutput:
    sigma: T.Var            # (R, N)
    weights: T.Var          # (R, N)
    alpha: T.Var            # (R,)
    rgb: T.Var | None       # (R_shade, 3)
    normal: T.Var | None
    shadow: T.Var | None
    albedo: T.Var | None
    depth: T.Var | None


def _check_finite(name: str, arr: np.ndarray, n_samples: int, ray_ids) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        flat = int(np.flatnonzero(bad.reshape(len(arr), -1).any(axis=-1))[0])
        ray, sample = divmod(flat, n_samples)
        rid = ray_ids[ray] if ray_ids is not None else ray
        raise NumericError(f"non-finite {name} at ray {rid}, sample {sample}")


def render_pass(p, cfg: ModelConfig, net: str, origins: np.ndarray, directions: np.ndarray,
                samples: RaySamples, lights: np.ndarray, shade_mask: np.ndarray | None = None,
                buffers: bool = False, ray_ids=None, sigma_noise: np.ndarray | None = None,
                hold_appearance: bool = False) -> PassOutput:
    """Evaluate one network along the given samples and composite.

    Only rays in ``shade_mask`` (default: all) are shaded; density is
    evaluated everywhere.
    """
    R, N = samples.t.shape
    pts = origins[:, None, :] + samples.t[..., None] * directions[:, None, :]
    z, n, sigma = geometry_apply(p, cfg, pts.reshape(-1, 3), net,
                                 None if sigma_noise is None else sigma_noise.reshape(-1))
    _check_finite("density", sigma.value, N, ray_ids)
    sigma = sigma.reshape(R, N)
    weights = composite_weights(sigma, samples.deltas)
    alpha = weights.sum(axis=-1)
    if shade_mask is None:
        shade_mask = np.ones(R, dtype=bool)
    n_shade = int(shade_mask.sum())
    rgb = normal = shadow = albedo = depth = None
    if n_shade:
        point_mask = np.repeat(shade_mask, N)
        all_shaded = n_shade == R
        zs = z if all_shaded else z[point_mask]
        ns = n if all_shaded else n[point_mask]
        s = np.repeat(lights[shade_mask], N, axis=0)
        v = -np.repeat(directions[shade_mask], N, axis=0)
        radiance, shad, alb = shade_apply(p, cfg, zs, ns, s, v, net, hold_appearance)
        _check_finite("radiance", radiance.value, N, None if ray_ids is None else np.asarray(ray_ids)[shade_mask])
        w = weights if all_shaded else weights[shade_mask]
        w3 = w.reshape(n_shade, N, 1)
        rgb = (w3 * radiance.reshape(n_shade, N, 3)).sum(axis=1)
        if buffers:
            normal = (w3 * ns.reshape(n_shade, N, 3)).sum(axis=1)
            shadow = (w * shad.reshape(n_shade, N)).sum(axis=-1)
            if alb is not None:
                albedo = (w3 * alb.reshape(n_shade, N, 3)).sum(axis=1)
            depth = (w * samples.t[shade_mask]).sum(axis=-1)
    return PassOutput(sigma, weights, alpha, rgb, normal, shadow, albedo, depth)


def plan_samples(origins, directions, t_near, t_far, config: RenderConfig, coarse_weights_fn, rng):
    """Coarse stratified samples, then fine samples from ``coarse_weights_fn(coarse)``."""
    coarse = stratified_samples(t_near, t_far, config.n_coarse, rng if config.perturb else None,
                                config.last_delta)
    if config.n_fine <= 0:
        return coarse, coarse, None
    w = coarse_weights_fn(coarse)
    fine = hierarchical_samples(w, coarse.edges, config.n_fine, rng if config.perturb else None,
                                coarse_t=coarse.t, t_far=t_far, last_delta=config.last_delta)
    return coarse, fine, w


def render_rays(params: ParameterBlock, cfg: ModelConfig, origins, directions, lights,
                config: RenderConfig = RenderConfig(), t_near=None, t_far=None,
                rng=None) -> RenderResult:
    """Render a batch of rays (no gradients). Buffers come from the fine pass."""
    from abrdf.camera import ray_bounds

    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    lights = np.broadcast_to(np.asarray(lights, dtype=np.float64), origins.shape)
    if t_near is None or t_far is None:
        t_near, t_far = ray_bounds(origins, directions)
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (len(origins),))
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (len(origins),))
    if rng is None and config.perturb:
        rng = np.random.default_rng(config.deterministic_seed)

    parts = []
    for lo in range(0, len(origins), config.chunk):
        sl = slice(lo, lo + config.chunk)
        tape = T.Tape(record=False)
        p = tape.watch(params)
        o, d, s = origins[sl], directions[sl], lights[sl]
        ids = np.arange(len(origins))[sl]

        def coarse_fn(samples):
            out = render_pass(p, cfg, "coarse", o, d, samples, s, buffers=True, ray_ids=ids)
            coarse_fn.out = out
            return out.weights.value

        coarse_s, fine_s, cw = plan_samples(o, d, t_near[sl], t_far[sl], config, coarse_fn, rng)
        if config.n_fine <= 0:
            cw = coarse_fn(coarse_s)
            fine_out = coarse_fn.out
        else:
            fine_out = render_pass(p, cfg, "fine", o, d, fine_s, s, buffers=True, ray_ids=ids)
        c_out = coarse_fn.out
        parts.append(RenderResult(
            rgb_linear=fine_out.rgb.value,
            alpha=np.clip(fine_out.alpha.value, 0.0, 1.0),   # sum of weights can exceed 1 by an ulp
            normal_buffer=fine_out.normal.value,
            shadow_buffer=fine_out.shadow.value,
            albedo_buffer=None if fine_out.albedo is None else fine_out.albedo.value,
            depth=fine_out.depth.value,
            coarse_weights=cw,
            fine_weights=fine_out.weights.value,
            coarse_rgb_linear=c_out.rgb.value,
        ))
    return _concat_results(parts)


def _concat_results(parts: list[RenderResult]) -> RenderResult:
    if len(parts) == 1:
        return parts[0]
    kw = {}
    for name in RenderResult.__dataclass_fields__:
        vals = [getattr(r, name) for r in parts]
        kw[name] = None if vals[0] is None else np.concatenate(vals, axis=0)
    return RenderResult(**kw)


def render_ray(ray: Ray, light_dir, params: ParameterBlock, cfg: ModelConfig,
               config: RenderConfig = RenderConfig(), rng=None) -> RenderResult:
    """Render one ray; the result carries no leading batch axis."""
    res = render_rays(params, cfg, ray.origin, ray.direction, light_dir, config,
                      t_near=ray.t_near, t_far=ray.t_far, rng=rng)
    kw = {k: (None if v is None else v[0]) for k, v in vars(res).items()}
    return RenderResult(**kw)


def tonemap(rgb_linear, gamma: float = 2.2) -> np.ndarray:
    """``c^(1/gamma)`` clamped to ``[0, 1]``."""
    c = np.asarray(rgb_linear, dtype=np.float64)
    if np.any(c < 0):
        raise DomainError("tonemap of negative radiance")
    return np.clip(c ** (1.0 / gamma), 0.0, 1.0)


def tonemap_apply(c: T.Var, gamma: float = 2.2) -> T.Var:
    """Unclamped ``c^(1/gamma)`` on the tape, so HDR overshoot is still penalised."""
    return T.gamma_encode(c, gamma)
