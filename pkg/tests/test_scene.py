import json
import shutil

import numpy as np
import pytest

from colf.geometry import Camera, look_at, project, rays_for_pixels
from colf.scene import (AnalyticField, DatasetError, Primitive, field_eval, field_eval_batch, load_dataset,
                        make_scene, oracle_render, oracle_render_rays, pixel_grid, read_depth, save_dataset, tri_sphere,
                        write_depth)

IDENTITY = np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)
RED = Primitive("sphere", (0, 0, 0), 1.0, 1.0, (1, 0, 0), shell=0.0)
BLUE = Primitive("sphere", (0.2, 0, 0), 1.0, 3.0, (0, 0, 1), shell=0.0)


def test_field_outside_is_background():
    fld = AnalyticField((RED,), background=(0.1, 0.2, 0.3))
    s, c = field_eval(fld, (5.0, 0, 0))
    assert s == 0 and np.allclose(c, [0.1, 0.2, 0.3])


def test_field_inside_single_sphere():
    fld = AnalyticField((Primitive("sphere", (0, 0, 0), 1.0, 2.0, (1, 0, 0)),))
    s, c = field_eval(fld, (0.0, 0.0, 0.0))
    assert s == 2.0 and np.allclose(c, [1, 0, 0])


def test_field_overlap_weighted_mean_and_order_independent():
    for prims in ((RED, BLUE), (BLUE, RED)):
        s, c = field_eval(AnalyticField(prims), (0.1, 0, 0))
        assert s == 4.0
        np.testing.assert_allclose(c, [0.25, 0, 0.75])


def test_zero_density_primitive_uses_first_hit_color():
    ghost = Primitive("sphere", (0, 0, 0), 1.0, 0.0, (0, 1, 0))
    s, c = field_eval(AnalyticField((ghost, RED)), (0, 0, 0.99))
    assert s == 1.0 and np.allclose(c, [1, 0, 0])
    s, c = field_eval(AnalyticField((ghost,)), (0, 0, 0))
    assert s == 0 and np.allclose(c, [0, 1, 0])


def test_box_primitive():
    box = Primitive("box", (0, 0, 0), (1.0, 0.5, 0.5), 3.0, (0.2, 0.4, 0.6), shell=0.0)
    sig, _ = field_eval_batch(AnalyticField((box,)), np.array([[0.9, 0, 0], [0, 0.6, 0]]))
    assert list(sig) == [3.0, 0.0]


def test_primitive_validation():
    with pytest.raises(ValueError):
        Primitive("sphere", (0, 0, 0), 1.0, -1.0, (1, 0, 0))
    with pytest.raises(ValueError):
        Primitive("sphere", (0, 0, 0), 1.0, 1.0, (1.5, 0, 0))
    with pytest.raises(ValueError):
        Primitive("cone", (0, 0, 0), 1.0, 1.0, (1, 0, 0))


def test_empty_field_renders_background():
    cam = Camera(8, 8, 3.5, 3.5, look_at((0, -4, 0), (0, 0, 0)), 8, 8)
    img, dep = oracle_render(AnalyticField((), background=(0.3, 0.6, 0.9)), cam, 16, 2.0, 6.0)
    np.testing.assert_allclose(img, np.broadcast_to([0.3, 0.6, 0.9], img.shape))
    assert np.all(dep == 0)


def test_unit_segment_opacity():
    # the ray crosses a slab of density 1 for exactly one unit
    slab = Primitive("box", (0, 0, 3.0), (10.0, 10.0, 0.5), 1.0, (1, 1, 1), shell=0.0)
    _, _, op = oracle_render_rays(AnalyticField((slab,)), np.zeros((1, 3)), np.array([[0, 0, 1.0]]), 2.0, 4.0, 4000)
    assert op[0] == pytest.approx(1 - np.exp(-1), abs=1e-6)


def test_opaque_wall_depth():
    n = 256
    wall = Primitive("box", (0, 0, 10.0), (50.0, 50.0, 5.0), 1e4, (1, 1, 1), shell=0.0)
    cam = Camera(4, 4, 1.5, 1.5, IDENTITY, 4, 4)
    _, dep, op = oracle_render(AnalyticField((wall,)), cam, n, 1.0, 9.0, return_opacity=True)
    seg = (9.0 - 1.0) / n
    # wall at camera depth 5, ray length scales with 1/cos
    _, d = rays_for_pixels(cam, pixel_grid(4, 4).reshape(-1, 2))
    expected = (5.0 / d[:, 2]).reshape(4, 4)
    assert np.all(np.abs(dep - expected) <= 2 * seg)
    np.testing.assert_allclose(op, 1.0)


def test_opacity_in_unit_interval():
    fld = tri_sphere()
    ds = make_scene(fld, 2, size=16, seed=0, n_samples=64)
    _, _, op = oracle_render(fld, ds.cameras[0], 64, ds.near, ds.far, return_opacity=True)
    assert op.min() >= 0 and op.max() <= 1 + 1e-12


def test_oracle_converges_at_1024():
    fld = tri_sphere()
    cam = make_scene(fld, 2, size=32, seed=0, n_samples=8).cameras[0]
    i1024, _ = oracle_render(fld, cam, 1024, 2.5, 5.5)
    i512, _ = oracle_render(fld, cam, 512, 2.5, 5.5)
    i256, _ = oracle_render(fld, cam, 256, 2.5, 5.5)
    assert np.abs(i1024 - i512).max() < 1e-3
    assert np.abs(i1024 - i512).max() < np.abs(i512 - i256).max()


def test_oracle_needs_two_samples():
    with pytest.raises(ValueError):
        oracle_render_rays(tri_sphere(), np.zeros((1, 3)), np.array([[0, 0, 1.0]]), 1, 2, 1)


# ----------------------------------------------------------------- datasets
@pytest.fixture(scope="module")
def small_ds():
    return make_scene(tri_sphere(), 5, size=16, seed=3, n_source=2, n_test=1, n_samples=64)


def test_make_scene_counts_and_splits(small_ds):
    assert len(small_ds) == 5 and len(small_ds.images) == 5
    assert small_ds.splits == ["source", "source", "target", "target", "test"]
    for img, cam in zip(small_ds.images, small_ds.cameras):
        assert img.shape == (cam.height, cam.width, 3)
    c = np.array([cam.center for cam in small_ds.cameras])
    d = np.linalg.norm(c[:, None] - c[None], axis=-1)
    assert d[np.triu_indices(5, 1)].min() >= 1e-6


def test_three_view_scene():
    ds = make_scene(tri_sphere(), 3, size=64, seed=0, n_samples=32)
    assert len(ds.images) == 3 and ds.images[0].shape == (64, 64, 3)


def test_make_scene_deterministic(small_ds):
    again = make_scene(tri_sphere(), 5, size=16, seed=3, n_source=2, n_test=1, n_samples=64)
    for a, b in zip(small_ds.images, again.images):
        assert np.array_equal(a, b)
    for a, b in zip(small_ds.cameras, again.cameras):
        assert np.array_equal(a.pose, b.pose)


def test_make_scene_hemisphere_and_errors():
    ds = make_scene(tri_sphere(), 4, size=8, seed=1, layout="hemisphere", n_samples=16)
    assert len(ds) == 4
    with pytest.raises(DatasetError):
        make_scene(tri_sphere(), 1, size=8)
    with pytest.raises(DatasetError):
        make_scene(tri_sphere(), 3, size=8, layout="spiral")


def test_cameras_look_at_centre(small_ds):
    for cam in small_ds.cameras:
        uv, _ = project(cam, np.zeros(3))
        np.testing.assert_allclose(uv, [cam.cx, cam.cy], atol=1e-9)


def test_dataset_round_trip(small_ds, tmp_path):
    save_dataset(small_ds, tmp_path / "s")
    back = load_dataset(tmp_path / "s")
    assert back.splits == small_ds.splits and back.near == small_ds.near and back.far == small_ds.far
    for a, b in zip(small_ds.images, back.images):
        assert np.array_equal(a, b)
    for a, b in zip(small_ds.depths, back.depths):
        assert np.array_equal(a, b)
    for a, b in zip(small_ds.cameras, back.cameras):
        np.testing.assert_allclose(a.pose, b.pose, atol=1e-12)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height)
    manifest = json.loads((tmp_path / "s" / "scene.json").read_text())
    for key in ("format_version", "background", "near", "far", "cameras", "images", "splits"):
        assert key in manifest
    assert len(manifest["cameras"][0]["pose"]) == 12


def test_truncated_image_names_file(small_ds, tmp_path):
    root = save_dataset(small_ds, tmp_path / "s")
    img = root / "view_001.png"
    img.write_bytes(img.read_bytes()[:40])
    with pytest.raises(DatasetError, match="view_001.png"):
        load_dataset(root, verify=False)
    with pytest.raises(DatasetError, match="view_001.png"):
        load_dataset(root)


def test_missing_file_and_version_errors(small_ds, tmp_path):
    root = save_dataset(small_ds, tmp_path / "s")
    (root / "view_002.png").unlink()
    with pytest.raises(DatasetError, match="view_002.png"):
        load_dataset(root)
    root2 = save_dataset(small_ds, tmp_path / "t")
    m = json.loads((root2 / "scene.json").read_text())
    m["format_version"] = 99
    (root2 / "scene.json").write_text(json.dumps(m))
    with pytest.raises(DatasetError, match="unsupported format_version"):
        load_dataset(root2)
    (root2 / "scene.json").write_text("{not json")
    with pytest.raises(DatasetError, match="malformed"):
        load_dataset(root2)
    shutil.rmtree(root2)
    with pytest.raises(DatasetError, match="missing manifest"):
        load_dataset(root2)


def test_depth_sidecar_format(tmp_path):
    d = np.random.default_rng(0).normal(size=(3, 5))
    write_depth(tmp_path / "d", d)
    raw = (tmp_path / "d").read_bytes()
    assert len(raw) == 8 + 8 * 15
    assert np.frombuffer(raw[:8], "<u4").tolist() == [5, 3]
    assert np.array_equal(read_depth(tmp_path / "d"), d)
    (tmp_path / "d").write_bytes(raw[:-3])
    with pytest.raises(DatasetError, match="truncated"):
        read_depth(tmp_path / "d")
