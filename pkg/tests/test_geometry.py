import math

import numpy as np
import pytest

from binpick.cloudops import PointCloud
from binpick.errors import DimensionMismatch, NotARotation, ValidationError
from binpick.geometry import (CameraIntrinsics, DepthRaster, RigidTransform,
                              ViewPose, backproject, compose, invert,
                              load_view_file, project, rot_x, rot_z,
                              rotation_about_axis, rotation_angle_deg,
                              save_view_file)


def random_transform(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    return RigidTransform(r, rng.uniform(-1, 1, size=3))


def test_compose_identity():
    rng = np.random.default_rng(0)
    t = random_transform(rng)
    out = compose(RigidTransform.identity(), t)
    np.testing.assert_allclose(out.as_matrix(), t.as_matrix(), atol=1e-12)


def test_compose_inverse_is_identity():
    rng = np.random.default_rng(1)
    t = random_transform(rng)
    out = compose(t, invert(t))
    np.testing.assert_allclose(out.as_matrix(), np.eye(4), atol=1e-9)


def test_compose_rotations_adds_angles():
    # oracle: direct 2-D rotation matrix product
    a = math.radians(30.0)
    b = math.radians(60.0)
    oracle = np.array([
        [math.cos(a + b), -math.sin(a + b), 0.0],
        [math.sin(a + b), math.cos(a + b), 0.0],
        [0.0, 0.0, 1.0],
    ])
    got = compose(RigidTransform(rot_z(30), np.zeros(3)),
                  RigidTransform(rot_z(60), np.zeros(3)))
    np.testing.assert_allclose(got.rotation, oracle, atol=1e-12)


def test_invert_pure_translation():
    t = RigidTransform(np.eye(3), [1.0, 2.0, 3.0])
    np.testing.assert_allclose(invert(t).translation, [-1, -2, -3], atol=1e-15)
    np.testing.assert_allclose(invert(RigidTransform.identity()).as_matrix(),
                               np.eye(4), atol=1e-15)


def test_group_laws_over_random_transforms():
    rng = np.random.default_rng(42)
    ident = RigidTransform.identity()
    for _ in range(1000):
        t = random_transform(rng)
        np.testing.assert_allclose((t @ invert(t)).as_matrix(), np.eye(4), atol=1e-9)
        np.testing.assert_allclose((invert(t) @ t).as_matrix(), np.eye(4), atol=1e-9)
        np.testing.assert_allclose((t @ ident).as_matrix(), t.as_matrix(), atol=1e-12)
    for _ in range(200):
        a, b, c = (random_transform(rng) for _ in range(3))
        left = (a @ b) @ c
        right = a @ (b @ c)
        np.testing.assert_allclose(left.as_matrix(), right.as_matrix(), atol=1e-9)


def test_rejects_non_rotation():
    with pytest.raises(NotARotation):
        RigidTransform(np.eye(3) * 1.01, np.zeros(3))
    with pytest.raises(NotARotation):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))  # det -1


def test_rotation_angle_basics():
    assert rotation_angle_deg(np.eye(3)) == 0.0
    assert abs(rotation_angle_deg(rot_x(90)) - 90.0) < 1e-12
    with pytest.raises(NotARotation):
        rotation_angle_deg(np.eye(3) * 2.0)


def test_rotation_angle_recovers_axis_angle():
    rng = np.random.default_rng(7)
    for _ in range(300):
        axis = rng.normal(size=3)
        theta = rng.uniform(0.0, 180.0)
        r = rotation_about_axis(axis, theta)
        assert abs(rotation_angle_deg(r) - theta) < 1e-7


def test_rotation_angle_of_r_rinv_is_zero():
    rng = np.random.default_rng(3)
    for _ in range(100):
        t = random_transform(rng)
        angle = rotation_angle_deg((t @ invert(t)).rotation)
        assert angle < 1e-6


def test_backproject_principal_point():
    k = CameraIntrinsics(fx=100.0, fy=100.0, cx=3.0, cy=2.0, width=8, height=6)
    depth = np.zeros((6, 8))
    depth[2, 3] = 0.5
    cloud = backproject(DepthRaster(depth), k)
    assert len(cloud) == 1
    np.testing.assert_allclose(cloud.positions[0], [0.0, 0.0, 0.5], atol=1e-15)
    assert tuple(cloud.provenance[0][1:]) == (3, 2)


def test_backproject_empty_raster():
    k = CameraIntrinsics(100.0, 100.0, 4.0, 3.0, 8, 6)
    assert backproject(DepthRaster(np.zeros((6, 8))), k).is_empty


def test_backproject_full_grid_matches_formula():
    # oracle: per-pixel pinhole formula evaluated in a plain double loop
    k = CameraIntrinsics(fx=1.0, fy=1.0, cx=2.0, cy=2.0, width=4, height=4)
    depth = np.ones((4, 4))
    cloud = backproject(DepthRaster(depth), k)
    assert len(cloud) == 16
    expected = {}
    for v in range(4):
        for u in range(4):
            expected[(u, v)] = ((u - 2.0) * 1.0 / 1.0, (v - 2.0) * 1.0 / 1.0, 1.0)
    for pos, prov in zip(cloud.positions, cloud.provenance):
        np.testing.assert_allclose(pos, expected[(prov[1], prov[2])], atol=1e-15)


def test_backproject_dimension_mismatch():
    k = CameraIntrinsics(100.0, 100.0, 4.0, 3.0, 8, 6)
    with pytest.raises(DimensionMismatch):
        backproject(DepthRaster(np.zeros((4, 4))), k)


def test_backproject_project_round_trip():
    rng = np.random.default_rng(11)
    k = CameraIntrinsics(fx=150.0, fy=145.0, cx=79.5, cy=59.5, width=160, height=120)
    depth = np.zeros((120, 160))
    vv = rng.integers(0, 120, size=500)
    uu = rng.integers(0, 160, size=500)
    depth[vv, uu] = rng.uniform(0.2, 1.2, size=500)
    cloud = backproject(DepthRaster(depth), k)
    uv, z = project(cloud.positions, k)
    for (u, v), d, prov in zip(uv, z, cloud.provenance):
        assert abs(u - prov[1]) < 1e-6 and abs(v - prov[2]) < 1e-6
        assert d == depth[prov[2], prov[1]]


def test_depth_raster_validation():
    with pytest.raises(ValidationError):
        DepthRaster(np.full((2, 2), -0.1))
    with pytest.raises(ValidationError):
        DepthRaster(np.full((2, 2), 2.5))


def test_view_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    views = []
    for i in range(4):
        views.append((ViewPose(i, random_transform(rng)),
                      CameraIntrinsics(150.0, 150.0, 79.5, 59.5, 160, 120)))
    path = tmp_path / "views.txt"
    save_view_file(path, views)
    loaded = load_view_file(path)
    assert len(loaded) == 4
    for (p0, k0), (p1, k1) in zip(views, loaded):
        assert p0.view_id == p1.view_id
        np.testing.assert_array_equal(p0.camera_to_world.as_matrix(),
                                      p1.camera_to_world.as_matrix())
        assert (k0.fx, k0.fy, k0.cx, k0.cy, k0.width, k0.height) == \
               (k1.fx, k1.fy, k1.cx, k1.cy, k1.width, k1.height)


def test_view_file_rejects_duplicate_ids(tmp_path):
    path = tmp_path / "views.txt"
    k = CameraIntrinsics(150.0, 150.0, 79.5, 59.5, 160, 120)
    pose = ViewPose(0, RigidTransform.identity())
    save_view_file(path, [(pose, k), (pose, k)])
    with pytest.raises(ValidationError):
        load_view_file(path)
