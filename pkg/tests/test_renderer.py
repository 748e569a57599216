import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from abrdf.camera import Ray, camera_rays, ray_bounds
from abrdf.dataset.synthetic import SyntheticScene, camera_ring, light_truth, view_truth
from abrdf.errors import DomainError, NumericError
from abrdf.fields import ModelConfig
from abrdf.renderer import (RaySamples, RenderConfig, composite, composite_weights,
                            hierarchical_samples, render_ray, render_rays, sample_pdf,
                            stratified_samples, tonemap)


def tiny(variant="lambertian"):
    return ModelConfig(variant=variant, num_frequencies=4, geo_depth=2, geo_width=16, geo_skips=(),
                       latent_dim=8, brdf_width=16, shadow_width=16)


# sampling

def test_single_stratified_sample_in_bounds():
    s = stratified_samples(0.5, 2.0, 1, np.random.default_rng(0))
    assert s.t.shape == (1, 1) and 0.5 <= s.t[0, 0] <= 2.0


def test_pinned_half_gives_midpoints():
    s = stratified_samples(0.0, 1.0, 4, 0.5)
    np.testing.assert_allclose(s.t[0], [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(s.edges[0], [0, 0.25, 0.5, 0.75, 1.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.0, 3.0), st.floats(0.01, 3.0), st.integers(1, 64))
def test_stratified_sorted_and_bounded(seed, near, width, n):
    s = stratified_samples(near, near + width, n, np.random.default_rng(seed))
    assert np.all(np.diff(s.t) >= 0)
    assert np.all((s.t >= near) & (s.t <= near + width))
    assert np.all(s.deltas > 0)


def test_stratified_rejects_empty_interval():
    with pytest.raises(DomainError):
        stratified_samples(1.0, 1.0, 4)


def test_degenerate_pdf_stays_in_bin():
    t = sample_pdf([0.0, 1.0, 0.0], [0.0, 1.0, 2.0, 3.0], 1000, np.random.default_rng(0))
    assert np.all((t >= 1.0) & (t <= 2.0))


@pytest.mark.parametrize("u", [0.1, 0.5, 0.9])
def test_uniform_pdf_quantile(u):
    t = sample_pdf(np.ones(5), np.linspace(2.0, 4.0, 6), 3, u)
    np.testing.assert_allclose(t, 2.0 + 2.0 * u)


def test_zero_weights_fall_back_to_uniform():
    t = sample_pdf(np.zeros(4), np.linspace(0, 1, 5), 8, None)
    np.testing.assert_allclose(t[0], (np.arange(8) + 0.5) / 8)


def test_negative_weights_rejected():
    with pytest.raises(DomainError):
        sample_pdf([1.0, -0.1], [0, 1, 2], 3)


def test_hierarchical_merges_and_sorts():
    coarse = stratified_samples(0.0, 1.0, 8, np.random.default_rng(1))
    w = np.zeros((1, 8))
    w[0, 3] = 1.0
    fine = hierarchical_samples(w, coarse.edges, 16, np.random.default_rng(2), coarse_t=coarse.t)
    assert fine.t.shape == (1, 24)
    assert np.all(np.diff(fine.t) >= 0)
    inside = (fine.t >= coarse.edges[0, 3]) & (fine.t <= coarse.edges[0, 4])
    assert inside.sum() >= 16
    assert fine.deltas[0, -1] == 1e10


# compositing

def test_zero_density_is_transparent():
    s = stratified_samples(0.0, 1.0, 16, None)
    out, w, alpha = composite(s, np.zeros((1, 16)), np.ones((1, 16, 3)))
    assert np.all(out == 0) and alpha[0] == 0


def test_opaque_first_sample():
    s = stratified_samples(0.0, 1.0, 4, None)
    sig = np.array([[1e6, 3.0, 3.0, 3.0]])
    vals = np.arange(12.0).reshape(1, 4, 3)
    out, _, alpha = composite(s, sig, vals)
    np.testing.assert_allclose(out[0], vals[0, 0])
    assert alpha[0] == pytest.approx(1.0)


def test_two_sample_constant_density():
    s = RaySamples.from_t([0.0, 0.5], 1.0, None)
    _, _, alpha = composite(s, np.ones((1, 2)), np.ones((1, 2, 3)))
    assert alpha[0] == pytest.approx(1 - np.exp(-1), abs=1e-15)
    assert alpha[0] == pytest.approx(0.63212, abs=1e-5)


def test_long_last_delta_keeps_earlier_weights():
    # regression: a 1e10 final segment must not swamp the transmittance of earlier samples
    s = RaySamples.from_t([[0.1, 0.2, 0.3]])
    w = composite_weights(np.array([[0.5, 0.5, 0.5]]), s.deltas)
    np.testing.assert_allclose(w[0, :2], [1 - np.exp(-0.05), np.exp(-0.05) * (1 - np.exp(-0.05))], rtol=1e-14)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(0, 50)), st.floats(-3, 3), st.floats(-3, 3),
       st.integers(0, 1000))
def test_compositing_properties(sigma, a, b, seed):
    rng = np.random.default_rng(seed)
    s = stratified_samples(0.1, 4.0, 12, rng)
    sig = sigma[None]
    u, v = rng.normal(size=(1, 12, 3)), rng.normal(size=(1, 12, 3))
    out_uv, w, alpha = composite(s, sig, a * u + b * v)
    lin = a * composite(s, sig, u)[0] + b * composite(s, sig, v)[0]
    np.testing.assert_allclose(out_uv, lin, atol=1e-12)
    assert np.all(w >= 0) and 0 <= alpha[0] <= 1 + 1e-12
    assert alpha[0] == pytest.approx(w.sum(), abs=1e-12)
    trans = np.exp(-np.concatenate([[0.0], np.cumsum(sig[0, :-1] * s.deltas[0, :-1])]))
    assert np.all(np.diff(trans) <= 0)


def test_quadrature_converges():
    for sigma in (0.5, 1.0, 2.0):
        errs = []
        for n in (64, 128, 256):
            s = stratified_samples(0.0, 1.0, n, None)
            s = RaySamples.from_t(s.t, 1.0, None)
            _, _, alpha = composite(s, np.full((1, n), sigma), np.ones((1, n, 3)))
            errs.append(abs(alpha[0] - (1 - np.exp(-sigma))))
        assert errs[2] < 1e-3 and errs[0] > errs[1] > errs[2]


# analytic sphere oracle field rendered through the sampling and compositing pipeline

def _oracle_render(o, d, s, scene, n_coarse=64, n_fine=128):
    c = np.asarray(scene.sphere_center)
    near, far = ray_bounds(o, d)

    def field(t):
        x = o[:, None, :] + t[..., None] * d[:, None, :]
        r = np.linalg.norm(x - c, axis=-1)
        sigma = np.where(r < scene.sphere_radius, 1e3, 0.0)
        n = (x - c) / r[..., None]
        rad = np.asarray(scene.albedo) / np.pi * np.maximum(0.0, n @ s)[..., None]
        return sigma, n, rad

    coarse = stratified_samples(near, far, n_coarse, None)
    sig, _, _ = field(coarse.t)
    w = composite_weights(sig, coarse.deltas)
    fine = hierarchical_samples(w, coarse.edges, n_fine, None, coarse_t=coarse.t)
    sig, n, rad = field(fine.t)
    rgb, _, alpha = composite(fine, sig, rad)
    normal, _, _ = composite(fine, sig, n)
    return rgb, normal, alpha


def test_oracle_sphere_shading_and_normals():
    scene = SyntheticScene()
    cam = camera_ring(scene, 4, 64)[1]
    s = -cam.forward * 0.8 + np.array([0.0, 0.0, 0.6])
    s /= np.linalg.norm(s)
    o, d = camera_rays(cam)
    # 128 coarse bins: with 64 the coarse spacing alone tilts grazing-pixel normals by up to ~2.4 degrees
    rgb, normal, alpha = _oracle_render(o, d, s, scene, n_coarse=128)
    vt = view_truth(scene, cam)
    lt = light_truth(SyntheticScene(occluder_center=(0.0, 0.0, 1.2)), vt, s)
    solid = alpha > 0.95
    assert solid.sum() > 0.9 * vt.mask.sum() and not np.any(solid & ~vt.mask.reshape(-1))
    assert np.abs(rgb[solid] - lt.linear.reshape(-1, 3)[solid]).max() < 2e-2
    est = normal[solid] / np.linalg.norm(normal[solid], axis=1, keepdims=True)
    cos = np.clip(np.sum(est * vt.normals.reshape(-1, 3)[solid], axis=1), -1, 1)
    assert np.degrees(np.arccos(cos)).max() < 2.0


# network rendering

def test_zero_density_network_renders_black():
    cfg = tiny()
    p = cfg.init_params(0)
    for net in ("coarse", "fine"):
        p.set(f"{net}.geo.sigma.layer0.weight", 0.0)
        p.set(f"{net}.geo.sigma.layer0.bias", -800.0)
    ray = Ray(np.array([0.0, 0.0, -1.5]), np.array([0.0, 0.0, 1.0]), 0.1, 3.5)
    r = render_ray(ray, [0.0, 0.0, -1.0], p, cfg, RenderConfig.desk())
    assert r.alpha == 0 and np.all(r.rgb_linear == 0) and np.all(r.normal_buffer == 0)
    assert r.shadow_buffer == 0 and np.all(r.albedo_buffer == 0)


@pytest.mark.parametrize("variant", ["lambertian", "neural_brdf"])
def test_weights_sum_to_alpha(variant):
    cfg = tiny(variant)
    p = cfg.init_params(2)
    cam = camera_ring(SyntheticScene(), 3, 8)[0]
    o, d = camera_rays(cam)
    res = render_rays(p, cfg, o, d, -cam.forward, RenderConfig.desk(chunk=20))
    np.testing.assert_allclose(res.fine_weights.sum(-1), res.alpha, atol=1e-9)
    assert np.all((res.alpha >= 0) & (res.alpha <= 1))
    assert res.rgb_linear.shape == (64, 3) and res.depth.shape == (64,)
    assert (res.albedo_buffer is None) == (variant == "neural_brdf")


def test_render_chunking_and_seed_are_deterministic():
    cfg = tiny()
    p = cfg.init_params(3)
    cam = camera_ring(SyntheticScene(), 3, 8)[2]
    o, d = camera_rays(cam)
    a = render_rays(p, cfg, o, d, -cam.forward, RenderConfig.desk(perturb=False, chunk=7))
    b = render_rays(p, cfg, o, d, -cam.forward, RenderConfig.desk(perturb=False, chunk=64))
    np.testing.assert_allclose(a.rgb_linear, b.rgb_linear, atol=1e-14)
    c = render_rays(p, cfg, o, d, -cam.forward, RenderConfig.desk())
    e = render_rays(p, cfg, o, d, -cam.forward, RenderConfig.desk())
    assert np.array_equal(c.rgb_linear, e.rgb_linear)


def test_nonfinite_network_output_names_ray():
    cfg = tiny()
    p = cfg.init_params(4)
    p.set("coarse.geo.sigma.layer0.weight", 1e308)
    ray = Ray(np.array([0.0, 0.0, -1.5]), np.array([0.0, 0.0, 1.0]), 0.1, 3.5)
    with np.errstate(over="ignore"), pytest.raises(NumericError, match="ray 0, sample"):
        render_ray(ray, [0.0, 0.0, -1.0], p, cfg, RenderConfig.desk())


# tonemap

def test_tonemap_values():
    np.testing.assert_array_equal(tonemap([0.0, 1.0]), [0.0, 1.0])
    assert tonemap(0.5) == pytest.approx(0.72974, abs=1e-5)
    assert tonemap(4.0) == 1.0
    with pytest.raises(DomainError):
        tonemap([-0.1])


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_tonemap_monotone(a, b):
    if a < b:
        assert tonemap(a) < tonemap(b)
