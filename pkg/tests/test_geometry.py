import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focalfield.geometry import (
    Camera,
    Ray,
    generate_ray,
    generate_rays,
    load_cameras,
    make_camera,
    ray_aabb_intersect,
    rays_for_pixels,
    save_cameras,
)

UNIT = (-np.ones(3), np.ones(3))


def identity_camera(w=8, h=6, f=4.0):
    return Camera(np.eye(3), np.zeros(3), f, f, w / 2, h / 2, w, h)


def rot_y(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])


def march_oracle(o, d, lo, hi, t_max=20.0, n=10_000):
    """Inside-box interval found by dense stepping along the ray."""
    t = (np.arange(n) + 0.5) * (t_max / n)
    p = o + t[:, None] * d
    inside = np.all((p >= lo) & (p <= hi), axis=1)
    if not inside.any():
        return None
    return t[inside][0], t[inside][-1]


def test_principal_point_ray_is_optical_axis():
    cam = identity_camera()
    r = generate_ray(cam, cam.cx - 0.5, cam.cy - 0.5)
    np.testing.assert_allclose(r.direction, [0, 0, 1], atol=1e-15)


def test_single_pixel_camera():
    cam = Camera(np.eye(3), np.zeros(3), 1.0, 1.0, 0.5, 0.5, 1, 1)
    np.testing.assert_allclose(generate_ray(cam, 0, 0).direction, [0, 0, 1])


def test_rotated_camera_matches_independent_matmul():
    r = rot_y(90)
    cam = Camera(r, np.array([1.0, 2.0, 3.0]), 5.0, 7.0, 4.0, 3.0, 8, 6)
    px, py = 1.0, 4.0
    local = np.array([(px + 0.5 - 4.0) / 5.0, (py + 0.5 - 3.0) / 7.0, 1.0])
    want = np.einsum("ij,j->i", r, local)
    want = want / math.sqrt(sum(v * v for v in want))
    np.testing.assert_allclose(generate_ray(cam, px, py).direction, want, atol=1e-12)


def test_rejects_bad_pixels_and_cameras():
    cam = identity_camera()
    with pytest.raises(ValueError):
        generate_ray(cam, float("nan"), 0)
    with pytest.raises(ValueError):
        generate_ray(cam, cam.width, 0)
    with pytest.raises(ValueError):
        Camera(np.diag([1.0, 1.0, 2.0]), np.zeros(3), 1, 1, 1, 1, 2, 2)
    with pytest.raises(ValueError):
        Camera(np.eye(3), np.zeros(3), -1, 1, 1, 1, 2, 2)
    with pytest.raises(ValueError):
        Camera(np.eye(3), np.zeros(3), 1, 1, 0, 1, 2, 2)


def test_axis_aligned_hit():
    r = Ray(np.array([0, 0, -5.0]), np.array([0, 0, 1.0]), 0, 10)
    assert ray_aabb_intersect(r, *UNIT) == pytest.approx((4.0, 6.0))


def test_parallel_miss():
    r = Ray(np.array([0, 2.0, -5.0]), np.array([0, 0, 1.0]), 0, 10)
    assert ray_aabb_intersect(r, *UNIT) is None


def test_diagonal_against_marching():
    d = np.ones(3) / math.sqrt(3)
    r = Ray(np.full(3, -3.0), d, 0, 10)
    got = ray_aabb_intersect(r, *UNIT)
    want = march_oracle(r.origin, d, *UNIT)
    assert got == pytest.approx(want, abs=2e-3)


def test_random_rays_against_marching():
    rng = np.random.default_rng(0)
    step = 20.0 / 10_000
    for _ in range(1000):
        lo = rng.uniform(-2, 1, 3)
        hi = lo + rng.uniform(0.2, 2, 3)
        o = rng.uniform(-4, 4, 3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        got = ray_aabb_intersect(Ray(o, d, 0, 1), lo, hi)
        want = march_oracle(o, d, lo, hi)
        if want is None:
            # a miss, or a graze thinner than one marching step
            assert got is None or got[1] - got[0] < step
        else:
            assert got is not None
            assert got[0] == pytest.approx(want[0], abs=step)
            assert got[1] == pytest.approx(want[1], abs=step)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0, 359), st.floats(-60, 60), st.floats(0, 31.99), st.floats(0, 23.99), st.floats(0.01, 0.99)
)
def test_unit_direction_and_projection_roundtrip(az, el, px, py, frac):
    a, e = math.radians(az), math.radians(el)
    eye = 3 * np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])
    cam = make_camera(eye, np.zeros(3), 32, 24)
    r = generate_ray(cam, px, py, UNIT)
    assert abs(np.linalg.norm(r.direction) - 1) < 1e-9
    t = r.t_near + frac * (r.t_far - r.t_near) if r.hits else 1.0 + frac
    np.testing.assert_allclose(cam.project(r.at(t)), [px, py], atol=1e-4)


def test_batched_rays_match_single_rays():
    cams = [make_camera([3, 0, 1], [0, 0, 0], 16, 16), make_camera([0, -3, 1], [0, 0, 0], 16, 16)]
    ids = np.array([0, 1, 1])
    px = np.array([0.0, 5.0, 15.0])
    py = np.array([3.0, 8.0, 0.0])
    o, d, tn, tf = rays_for_pixels(cams, ids, px, py, UNIT)
    for k in range(3):
        r = generate_ray(cams[ids[k]], px[k], py[k], UNIT)
        np.testing.assert_allclose(d[k], r.direction, atol=1e-12)
        assert (tn[k], tf[k]) == pytest.approx((r.t_near, r.t_far))
    o2, d2, _, _ = generate_rays(cams[1], px[1:], py[1:], UNIT)
    np.testing.assert_allclose(d2, d[1:], atol=1e-12)


def test_missed_rays_get_empty_interval():
    cam = make_camera([5, 0, 0], [5, 1, 0], 4, 4)  # looks away from the box
    _, _, tn, tf = generate_rays(cam, np.arange(4.0), np.arange(4.0), UNIT)
    assert np.all(tn == 0) and np.all(tf == 0)


def test_downsampled_camera_covers_same_frustum():
    cam = make_camera([3, 1, 1], [0, 0, 0], 16, 8)
    small = cam.downsampled(4)
    assert (small.width, small.height) == (4, 2)
    # the center of a 4x4 superpixel maps to the same ray as the small pixel
    big = generate_ray(cam, 4 * 1 + 1.5, 4 * 1 + 1.5).direction
    np.testing.assert_allclose(generate_ray(small, 1, 1).direction, big, atol=1e-12)
    with pytest.raises(ValueError):
        cam.downsampled(3)


def test_camera_json_roundtrip(tmp_path):
    cams = [make_camera([3, 1, 1], [0, 0, 0], 16, 8, split="test"), identity_camera()]
    save_cameras(tmp_path / "c.json", cams)
    back = load_cameras(tmp_path / "c.json")
    for a, b in zip(cams, back):
        np.testing.assert_array_equal(a.rotation, b.rotation)
        assert (a.fx, a.cx, a.width, a.split) == (b.fx, b.cx, b.width, b.split)
