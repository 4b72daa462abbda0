import numpy as np
import pytest

from focalfield.dataset import Dataset, render_dataset
from focalfield.geometry import make_camera
from focalfield.image_io import read_float_image, write_float_image
from focalfield.scene import (
    Blob,
    BlobScene,
    make_two_district_scene,
    march_field,
    oracle_field,
    render_reference,
    two_district_cameras,
)


def one_blob(peak=10.0, radius=0.2, albedo=(0.2, 0.4, 0.6)):
    return BlobScene([Blob((0.0, 0.0, 0.0), radius, peak, albedo)])


def test_truncation_and_peak():
    s = one_blob()
    sig, alb = oracle_field(s, np.array([[0.0, 0.0, 0.0], [0.41, 0.0, 0.0], [0.39, 0.0, 0.0]]))
    assert sig[0] == 10.0
    np.testing.assert_allclose(alb[0], (0.2, 0.4, 0.6))
    assert sig[1] == 0.0
    np.testing.assert_allclose(alb[1], s.background_color)
    assert sig[2] > 0


def test_midpoint_of_two_blobs_by_formula():
    b1 = Blob((-0.1, 0.0, 0.0), 0.15, 12.0, (1.0, 0.0, 0.0))
    b2 = Blob((0.1, 0.0, 0.0), 0.15, 12.0, (0.0, 0.0, 1.0))
    x = np.array([0.0, 0.02, 0.0])
    want = 0.0
    for b in (b1, b2):
        r2 = sum((xi - ci) ** 2 for xi, ci in zip(x, b.center))
        want += b.peak_density * np.exp(-r2 / (2 * (b.radius / 2) ** 2))
    sig, alb = oracle_field(BlobScene([b1, b2]), x)
    assert sig == pytest.approx(want, rel=1e-12)
    np.testing.assert_allclose(alb, [0.5, 0.0, 0.5])


def test_outside_bounds_is_empty():
    s = BlobScene([Blob((0.95, 0.0, 0.0), 0.2, 10.0, (1, 1, 1))])
    sig, _ = oracle_field(s, np.array([1.05, 0.0, 0.0]))
    assert sig == 0.0


def test_scene_validation():
    with pytest.raises(ValueError):
        BlobScene([])
    with pytest.raises(ValueError):
        BlobScene([Blob((2.0, 0.0, 0.0), 0.1, 1.0, (1, 1, 1))])
    with pytest.raises(ValueError):
        BlobScene([Blob((0.0, 0.0, 0.0), 0.1, float("inf"), (1, 1, 1))])


def test_empty_scene_renders_background():
    s = BlobScene([Blob((0.0, 0.0, 0.0), 0.1, 0.0, (0, 0, 0))], background_color=(0.3, 0.6, 0.9))
    img = render_reference(s, make_camera([3, 0, 0], [0, 0, 0], 8, 8), 256)
    np.testing.assert_allclose(img, np.broadcast_to([0.3, 0.6, 0.9], img.shape), atol=1e-15)


def test_slab_opacity_closed_form():
    sigma0, s = 3.0, 0.5

    def slab(x):
        inside = (x[..., 2] >= 0.0) & (x[..., 2] < s)
        sig = np.where(inside, sigma0, 0.0)
        return sig, np.zeros(x.shape)

    o = np.array([[0.0, 0.0, -1.0]])
    d = np.array([[0.0, 0.0, 1.0]])
    _, _, opacity = march_field(slab, o, d, np.array([0.0]), np.array([2.0]), 1024, np.ones(3))
    assert opacity[0] == pytest.approx(1 - np.exp(-sigma0 * s), abs=1e-3)


def test_step_convergence_and_range():
    scene = make_two_district_scene(4, seed=3)
    cam = make_camera([0.5, -2.2, 0.8], [0.3, 0, 0], 12, 12)
    a = render_reference(scene, cam, 512)
    b = render_reference(scene, cam, 1024)
    c = render_reference(scene, cam, 2048)
    assert np.max(np.abs(a - b)) < 1e-3
    assert np.max(np.abs(a - c)) < 2e-3
    assert a.min() >= 0 and a.max() <= 1


def test_denser_blob_never_less_opaque():
    cam = make_camera([0, -3, 0], [0, 0, 0], 6, 6)
    ops = []
    for peak in (1.0, 5.0, 20.0):
        _, op = render_reference(one_blob(peak, 0.3), cam, 256, return_opacity=True)
        ops.append(op)
    assert np.all(ops[1] >= ops[0]) and np.all(ops[2] >= ops[1])


def test_two_district_layout():
    scene = make_two_district_scene(seed=0)
    centers = scene._arrays[0]
    assert np.sum(centers[:, 0] < -0.2) == 12 and np.sum(centers[:, 0] > 0.2) == 12
    cams, boundary = two_district_cameras()
    train = [c for c in cams if c.split == "train"]
    assert len(train) == 40 and len(boundary) == 3
    xs = np.array([c.position[0] for c in train])
    assert np.sum(xs < 0) == 20 and np.sum(xs > 0) == 20
    assert all(cams[i].split == "test" for i in boundary)


def test_scene_json_roundtrip(tmp_path):
    s = make_two_district_scene(3, seed=1)
    s.save(tmp_path / "s.json")
    assert BlobScene.load(tmp_path / "s.json") == s


def test_float_image_format(tmp_path):
    img = np.random.default_rng(0).random((3, 5, 3)).astype(np.float32)
    write_float_image(tmp_path / "a.f32", img)
    raw = (tmp_path / "a.f32").read_bytes()
    header, payload = raw.split(b"\n", 1)
    assert header == b'{"width": 5, "height": 3, "channels": 3}'
    np.testing.assert_array_equal(np.frombuffer(payload, "<f4").reshape(3, 5, 3), img)
    np.testing.assert_array_equal(read_float_image(tmp_path / "a.f32"), img)


def test_dataset_roundtrip(tmp_path):
    scene = make_two_district_scene(2, seed=0)
    cams = [make_camera([0, -3, 0.5], [0, 0, 0], 8, 8), make_camera([3, 0, 0.5], [0, 0, 0], 8, 8, split="test")]
    ds = render_dataset(scene, cams, 256, boundary_ids=(1,))
    ds.save(tmp_path)
    back = Dataset.load(tmp_path)
    assert back.train_ids == [0] and back.test_ids == [1] and back.boundary_ids == (1,)
    for a, b in zip(ds.images, back.images):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(ds.alphas, back.alphas):
        np.testing.assert_array_equal(a, b)
    assert (tmp_path / "images" / "000.png").exists()
    # opacity and color agree: image = premultiplied color + (1 - alpha) * white
    assert np.all((ds.alphas[0] < 1e-9) <= np.all(np.abs(ds.images[0] - 1) < 1e-6, axis=-1))
