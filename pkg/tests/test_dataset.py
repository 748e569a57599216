import json
import shutil

import cv2
import numpy as np
import pytest

from abrdf.camera import CameraModel, max_view_light_angle
from abrdf.dataset import (SyntheticScene, generate_synthetic, light_truth, load_dataset,
                           sample_ray_batch, view_truth)
from abrdf.dataset.io import read_image, read_mask, read_sidecar, write_png, write_sidecar
from abrdf.dataset.synthetic import camera_ring, cone_directions, ray_sphere, scene_from_dataset
from abrdf.errors import ConfigurationError, DatasetError
from abrdf.renderer import tonemap


def _copy(src, dst):
    shutil.copytree(src, dst)
    return dst


# image I/O

def test_ldr_round_trip_within_quantization(tmp_path):
    x = np.random.default_rng(0).uniform(size=(9, 11, 3))
    write_png(tmp_path / "a.png", x)
    assert np.abs(read_image(tmp_path / "a.png") - x).max() <= 0.5 / 255 + 1e-12


def test_sixteen_bit_input_is_tonemapped(tmp_path):
    lin = np.full((4, 4, 3), 0.25)
    write_png(tmp_path / "hdr.png", lin, bits=16)
    np.testing.assert_allclose(read_image(tmp_path / "hdr.png"), 0.25 ** (1 / 2.2), atol=1e-4)


def test_channel_order_preserved(tmp_path):
    x = np.zeros((2, 2, 3))
    x[..., 0] = 1.0
    write_png(tmp_path / "r.png", x)
    assert cv2.imread(str(tmp_path / "r.png"))[0, 0].tolist() == [0, 0, 255]   # BGR on disk
    assert read_image(tmp_path / "r.png")[0, 0].tolist() == [1.0, 0.0, 0.0]


def test_mask_binarized_at_half(tmp_path):
    m = np.array([[0.0, 0.49], [0.51, 1.0]])
    write_png(tmp_path / "m.png", m)
    assert read_mask(tmp_path / "m.png").tolist() == [[False, False], [True, True]]


def test_sidecar_round_trip(tmp_path):
    a = np.random.default_rng(1).normal(size=(3, 4, 3))
    write_sidecar(tmp_path / "a.bin", a, dtype="<f8")
    assert np.array_equal(read_sidecar(tmp_path / "a.bin"), a)
    (tmp_path / "b.bin").write_bytes(b"garbage")
    with pytest.raises(DatasetError):
        read_sidecar(tmp_path / "b.bin")


# synthetic oracle

def test_scene_validation():
    with pytest.raises(ConfigurationError):
        SyntheticScene(occluder_center=(0.45, 0.45, 0.0))   # touches the main sphere
    with pytest.raises(ConfigurationError):
        SyntheticScene(camera_radius=0.6)


def test_ray_sphere():
    t = ray_sphere(np.array([[0.0, 0, -2], [0.0, 2, -2]]), np.array([[0.0, 0, 1], [0.0, 0, 1]]),
                   (0, 0, 0), 0.5)
    assert t[0] == pytest.approx(1.5) and np.isinf(t[1])


def test_mask_is_exact_primary_hit_set():
    scene = SyntheticScene()
    cam = camera_ring(scene, 16, 64)[3]
    vt = view_truth(scene, cam)
    from abrdf.camera import camera_rays
    o, d = camera_rays(cam)
    # closest approach of each ray to the centre decides the hit
    b = np.sum(o * d, 1)
    closest = np.linalg.norm(o - b[:, None] * d, axis=1)
    clear = np.abs(closest - 0.5) > 1e-9     # exact tangents are a coin flip in floating point
    assert np.array_equal(vt.mask.reshape(-1)[clear], closest[clear] < 0.5)
    np.testing.assert_allclose(np.linalg.norm(vt.normals[vt.mask], axis=1), 1.0, atol=1e-12)
    assert np.all(vt.normals[~vt.mask] == 0)


def test_pole_pixel_shading():
    scene = SyntheticScene()
    cam = CameraModel.look_at([0, 0, 1.5], [0, 0, 0], [1, 0, 0], 70.0, 64, 64)
    vt = view_truth(scene, cam)
    lt = light_truth(scene, vt, [0.0, 0.0, 1.0])
    centre = vt.mask.shape[0] // 2
    # pixel centres sit half a pixel off the axis, so the normal is almost exactly +z
    n = vt.normals[centre, centre]
    np.testing.assert_allclose(lt.linear[centre, centre], np.array(scene.albedo) / np.pi * n[2], rtol=1e-12)
    assert n[2] > 0.9995
    np.testing.assert_allclose(tonemap(lt.linear[centre, centre]), tonemap(np.array(scene.albedo) / np.pi),
                               atol=1e-3)


def test_self_shadow_is_black():
    scene = SyntheticScene()
    cam = camera_ring(scene, 4, 32)[0]
    vt = view_truth(scene, cam)
    lt = light_truth(scene, vt, -cam.forward @ np.diag([1, 1, 1]) * -1)   # light from behind
    back = vt.mask & lt.attached
    assert back.any()
    assert np.all(lt.linear[back] == 0) and np.all(lt.visibility[back] == 0)


def test_cast_shadow_from_occluder():
    scene = SyntheticScene()
    c = np.array(scene.occluder_center)
    s = c / np.linalg.norm(c)          # light straight through the occluder
    eye = 1.5 * s + np.array([0.0, 0.0, 0.2])
    cam = CameraModel.look_at(eye, [0, 0, 0], [0, 0, 1], 70.0, 64, 64)
    vt = view_truth(scene, cam)
    lt = light_truth(scene, vt, s)
    assert lt.cast.sum() > 10 and lt.lit.sum() > 10
    assert np.all(lt.linear[lt.cast] == 0) and np.all(lt.visibility[lt.cast] == 0)
    assert np.all(lt.linear[lt.lit] > 0)
    # the point facing the light head-on lies in the shadow, its lit neighbours do not
    p = vt.points[lt.cast]
    assert np.all(np.isfinite(ray_sphere(p + 1e-6 * s, np.broadcast_to(s, p.shape), c, 0.15)))


def test_cone_directions():
    d = cone_directions([0, 1, 0], 64, 45.0)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    ang = np.degrees(np.arccos(d @ [0, 1, 0]))
    assert ang.max() <= 45.0 + 1e-9 and ang.max() > 40.0
    assert not np.allclose(cone_directions([0, 1, 0], 8, 45.0, 0.5), cone_directions([0, 1, 0], 8, 45.0))


def test_generated_layout(small_synth):
    root = small_synth
    assert (root / "view_01" / "image_001.png").exists() and (root / "view_04" / "image_004.png").exists()
    cams = json.loads((root / "cameras.json").read_text())
    assert len(cams["cameras"]) == 4 and "synthetic_scene" in cams["metadata"]
    assert read_sidecar(root / "view_02" / "shadows.bin").shape == (4, 24, 24)


def test_round_trip_is_bit_identical(small_synth, small_dataset):
    scene = scene_from_dataset(small_dataset)
    cams = camera_ring(scene, 4, 24)
    ds = small_dataset
    lights = json.loads((small_synth / "lights.json").read_text())["lights"]
    for v, vd in enumerate(ds.views):
        assert np.array_equal(vd.camera.rotation, cams[v].rotation)
        assert np.array_equal(vd.camera.translation, cams[v].translation)
        assert np.array_equal(vd.lights, np.array(lights[v]))
        assert np.array_equal(vd.mask, view_truth(scene, cams[v]).mask)


def test_dataset_images_match_oracle(small_dataset):
    scene = scene_from_dataset(small_dataset)
    vt = view_truth(scene, small_dataset.views[1].camera)
    lt = light_truth(scene, vt, small_dataset.views[1].lights[2])
    assert np.abs(small_dataset.image(1, 2) - tonemap(lt.linear)).max() <= 0.5 / 255 + 1e-12


def test_lazy_and_eager_agree(small_synth):
    a, b = load_dataset(small_synth, eager=True), load_dataset(small_synth, eager=False)
    assert b.views[0].images is None
    assert np.array_equal(a.image(2, 3), b.image(2, 3))


def test_empty_directory_fails(tmp_path):
    with pytest.raises(DatasetError, match="cameras.json"):
        load_dataset(tmp_path)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "missing")


def test_missing_image_named(small_synth, tmp_path):
    root = _copy(small_synth, tmp_path / "d")
    (root / "view_03" / "image_002.png").unlink()
    with pytest.raises(DatasetError, match="view_03/image_002.png"):
        load_dataset(root)


def test_wrong_size_image_named(small_synth, tmp_path):
    root = _copy(small_synth, tmp_path / "d")
    write_png(root / "view_02" / "image_001.png", np.zeros((10, 10, 3)))
    with pytest.raises(DatasetError, match="view_02/image_001.png"):
        load_dataset(root)


def test_light_count_mismatch(small_synth, tmp_path):
    root = _copy(small_synth, tmp_path / "d")
    doc = json.loads((root / "lights.json").read_text())
    doc["lights"][0] = doc["lights"][0][:3]
    (root / "lights.json").write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match="image_004.png"):
        load_dataset(root)


def test_non_unit_lights_renormalized(small_synth, tmp_path, caplog):
    root = _copy(small_synth, tmp_path / "d")
    doc = json.loads((root / "lights.json").read_text())
    doc["lights"][1][0] = [0.999 * x for x in doc["lights"][1][0]]
    (root / "lights.json").write_text(json.dumps(doc))
    ds = load_dataset(root)
    assert np.linalg.norm(ds.views[1].lights[0]) == pytest.approx(1.0, abs=1e-15)
    assert "renormalized" in caplog.text


def test_diligent_shaped_tree(tmp_path):
    """21 views x 96 lights at 612x512, lights out to 42.9 degrees from the view vector."""
    root = tmp_path / "mv"
    cams, lights = [], []
    blank = np.zeros((512, 612, 3), np.uint8)
    for v in range(21):
        phi = 2 * np.pi * v / 21
        eye = 1500.0 * np.array([np.cos(phi), np.sin(phi), 0.0])   # millimetres
        cam = CameraModel.look_at(eye, [0, 0, 0], [0, 0, 1], 3750.0, 612, 512)
        cams.append(cam.to_dict())
        axis = -cam.forward
        outer = cone_directions(axis, 16, 42.9)
        outer = _push_to_angle(outer, axis, 42.9)
        lights.append(np.vstack([cone_directions(axis, 80, 35.0), outer]).tolist())
        vdir = root / f"view_{v + 1:02d}"
        vdir.mkdir(parents=True)
        cv2.imwrite(str(vdir / "mask.png"), blank[..., 0])
        for k in range(96):
            cv2.imwrite(str(vdir / f"image_{k + 1:03d}.png"), blank)
    (root / "cameras.json").write_text(json.dumps({"cameras": cams}))
    (root / "lights.json").write_text(json.dumps({"lights": lights}))
    ds = load_dataset(root, eager=False)
    assert ds.num_views == 21
    assert all(len(vd.lights) == 96 and vd.resolution == (612, 512) for vd in ds.views)
    assert ds.metadata["lights_per_view"] == [96] * 21
    angles = [max_view_light_angle(vd.camera, vd.lights) for vd in ds.views]
    assert max(angles) == pytest.approx(42.9, abs=0.05)
    cen = np.array([ds.transform.apply(c.center) for c in ds.cameras])
    np.testing.assert_allclose(np.linalg.norm(cen, axis=1), 1.5)


def _push_to_angle(d, axis, deg):
    perp = d - (d @ axis)[:, None] * axis
    perp /= np.linalg.norm(perp, axis=1, keepdims=True)
    a = np.radians(deg)
    return np.cos(a) * axis + np.sin(a) * perp


# batching

def test_batch_labels_and_colors(small_dataset):
    ds = small_dataset
    b = sample_ray_batch(ds, 200, 0.5, np.random.default_rng(0))
    assert b.is_foreground.sum() == 100
    for i in range(0, 200, 17):
        v, l, px = b.view[i], b.light[i], b.pixel[i]
        assert b.is_foreground[i] == ds.views[v].mask.reshape(-1)[px]
        assert np.array_equal(b.gt_rgb[i], ds.image(v, l).reshape(-1, 3)[px])
        assert np.array_equal(b.light_dir[i], ds.views[v].lights[l])
    assert np.all((b.gt_rgb >= 0) & (b.gt_rgb <= 1))
    np.testing.assert_allclose(np.linalg.norm(b.directions, axis=1), 1.0)


def test_batch_deterministic(small_dataset):
    a = sample_ray_batch(small_dataset, 64, 0.5, np.random.default_rng(3))
    b = sample_ray_batch(small_dataset, 64, 0.5, np.random.default_rng(3))
    assert a.to_dict() == b.to_dict()


def test_all_foreground(small_synth, tmp_path):
    root = _copy(small_synth, tmp_path / "d")
    for v in range(4):
        write_png(root / f"view_{v + 1:02d}" / "mask.png", np.ones((24, 24)))
    b = sample_ray_batch(load_dataset(root), 50, 1.0, np.random.default_rng(0))
    assert b.is_foreground.all()


def test_view_marginal_uniform(small_dataset):
    n = 100_000
    b = sample_ray_batch(small_dataset, n, 0.5, np.random.default_rng(11))
    counts = np.bincount(b.view, minlength=4)
    p = 1 / 4
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))
