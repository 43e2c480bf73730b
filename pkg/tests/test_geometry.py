import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octfield.geometry import (
    Aabb,
    Camera,
    Ray,
    generate_rays,
    intersect_boxes,
    load_cameras,
    look_at,
    project,
    project_points,
    ray_aabb_intersect,
    save_cameras,
)

CUBE = Aabb(-np.ones(3), np.ones(3))


def orbit_camera(az=0.3, el=0.4, radius=4.0, size=(9, 7), focal=8.0):
    eye = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return Camera(look_at(eye, np.zeros(3)), focal, *size)


class TestCamera:
    def test_ray_count_and_ids(self):
        cam = Camera(np.eye(4), 1.0, 2, 2)
        rays = generate_rays(cam)
        assert len(rays) == 4
        np.testing.assert_array_equal(rays.ray_ids, [0, 1, 2, 3])

    def test_center_pixel_looks_down_minus_z(self):
        cam = Camera(np.eye(4), 3.0, 5, 5)
        d = cam.pixel_directions([12])[0]
        np.testing.assert_allclose(d, [0.0, 0.0, -1.0], atol=1e-15)

    def test_top_left_pixel_is_up_and_left(self):
        d = Camera(np.eye(4), 3.0, 4, 4).pixel_directions([0])[0]
        assert d[0] < 0 and d[1] > 0

    def test_directions_are_unit(self):
        rays = generate_rays(orbit_camera())
        np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1.0, atol=1e-9)

    def test_rejects_non_rotation(self):
        pose = np.eye(4)
        pose[0, 0] = 2.0
        with pytest.raises(ValueError):
            Camera(pose, 1.0, 2, 2)
        with pytest.raises(ValueError):
            Camera(np.diag([1.0, 1.0, -1.0, 1.0]), 1.0, 2, 2)

    def test_json_round_trip(self, tmp_path):
        cams = [orbit_camera(az) for az in (0.1, 1.2)]
        save_cameras(tmp_path / "c.json", cams)
        back = load_cameras(tmp_path / "c.json")
        for a, b in zip(cams, back):
            np.testing.assert_array_equal(a.pose, b.pose)
            assert (a.focal, a.width, a.height) == (b.focal, b.width, b.height)


class TestSlab:
    def test_hand_computed_interval(self):
        t = ray_aabb_intersect(Ray(np.array([0.0, 0, -2]), np.array([0.0, 0, 1])), CUBE)
        assert t == pytest.approx((1.0, 3.0))

    def test_parallel_outside_misses(self):
        ray = Ray(np.array([2.0, 0, -2]), np.array([0.0, 0, 1]))
        assert ray_aabb_intersect(ray, CUBE) is None

    def test_origin_inside_clips_to_zero(self):
        t = ray_aabb_intersect(Ray(np.zeros(3), np.array([1.0, 0, 0])), CUBE)
        assert t[0] == 0.0 and t[1] == pytest.approx(1.0)

    def test_box_behind_ray_misses(self):
        ray = Ray(np.array([0.0, 0, 3]), np.array([0.0, 0, 1]))
        assert ray_aabb_intersect(ray, CUBE) is None

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0, 2 * np.pi), st.floats(-1.2, 1.2), st.integers(0, 62))
    def test_interval_points_inside_box(self, az, el, pixel):
        cam = orbit_camera(az, el)
        rays = generate_rays(cam)
        t0, t1, hit = intersect_boxes(rays.origins, rays.directions, CUBE.min[None], CUBE.max[None])
        if not hit[pixel, 0]:
            return
        for t in np.linspace(t0[pixel, 0], t1[pixel, 0], 7):
            p = rays.origins[pixel] + t * rays.directions[pixel]
            assert CUBE.contains(p, eps=1e-7)


class TestProjection:
    def test_axis_point(self):
        cam = Camera(np.eye(4), 4.0, 5, 5)
        assert project(cam, [0.0, 0.0, -2.0]) == (2, 2, 2.0)

    def test_behind_camera(self):
        assert project(Camera(np.eye(4), 4.0, 5, 5), [0.0, 0.0, 2.0]) is None

    def test_tie_rounds_to_larger_index(self):
        # even width: the optical axis falls on a pixel boundary (u = 1.5)
        cam = Camera(np.eye(4), 4.0, 4, 4)
        row, col, _ = project(cam, [0.0, 0.0, -1.0])
        assert (row, col) == (2, 2)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0, 2 * np.pi), st.floats(0.1, 8.0))
    def test_project_inverts_ray_points(self, az, depth):
        cam = orbit_camera(az)
        ids = np.arange(cam.n_pixels)
        d = cam.pixel_directions(ids)
        t = depth / (d @ cam.forward)
        p = cam.origin + t[:, None] * d
        row, col, z, valid = project_points(cam, p)
        assert valid.all()
        np.testing.assert_array_equal(row * cam.width + col, ids)
        np.testing.assert_allclose(z, depth, rtol=1e-9)
