import numpy as np
import pytest

from binpick.cloudops import AxisAlignedBox, PointCloud
from binpick.errors import (NoViews, TooFewPoints, ValidationError)
from binpick.geometry import (CameraIntrinsics, DepthRaster, RigidTransform,
                              ViewPose)
from binpick.segfuse import (ProbabilityTensor, Scene, SceneView,
                             class_thresholds, fuse_views, kmeans,
                             load_depth_png, load_pten, save_depth_png,
                             save_pten, split_duplicates)


def uniform_tensor(h, w, c, view_id=0):
    return ProbabilityTensor(view_id, np.full((h, w, c), 1.0 / c, dtype=np.float32))


def one_hot_tensor(class_map, num_classes, view_id=0):
    h, w = class_map.shape
    vals = np.zeros((h, w, num_classes), dtype=np.float32)
    vals[np.arange(h)[:, None], np.arange(w)[None, :], class_map] = 1.0
    return ProbabilityTensor(view_id, vals)


def test_thresholds_uniform_maps():
    t = uniform_tensor(10, 10, 40)
    got = class_thresholds([t], [3, 7])
    assert got.keys() == {3, 7}
    for v in got.values():
        assert abs(v - 0.025) < 1e-9


def test_thresholds_two_value_distribution():
    # 10% of pixels at 0.9, the rest 0: mean 0.09, std 0.27, threshold 0.9
    vals = np.zeros((10, 10, 2), dtype=np.float32)
    vals[:, :, 1] = 1.0
    vals[0, :, 0] = 0.9
    vals[0, :, 1] = 0.1
    t = ProbabilityTensor(0, vals)
    got = class_thresholds([t], [0])
    assert abs(got[0] - 0.9) < 1e-6


def test_thresholds_match_flat_loop_oracle():
    rng = np.random.default_rng(0)
    raw = rng.uniform(0.0, 1.0, size=(2, 6, 8, 5))
    raw /= raw.sum(axis=3, keepdims=True)
    tensors = [ProbabilityTensor(i, raw[i].astype(np.float32)) for i in range(2)]
    got = class_thresholds(tensors, [0, 2, 4])
    for c in (0, 2, 4):
        flat = []
        for t in tensors:
            for row in range(6):
                for col in range(8):
                    flat.append(float(t.values[row, col, c]))
        flat = np.array(flat)
        want = flat.mean() + 3 * flat.std()
        assert abs(got[c] - want) < 1e-9


def test_thresholds_require_views_and_classes():
    with pytest.raises(NoViews):
        class_thresholds([], [1])
    with pytest.raises(ValidationError):
        class_thresholds([uniform_tensor(4, 4, 4)], [])


def make_scene(views, expected, volume=None):
    volume = volume or AxisAlignedBox([-1, -1, -1], [1, 1, 1])
    return Scene(container="shelf_bin", volume=volume, expected=tuple(expected),
                 views=tuple(views), background=PointCloud.empty())


def test_fuse_single_pixel_at_principal_point():
    k = CameraIntrinsics(fx=100.0, fy=100.0, cx=4.0, cy=3.0, width=9, height=7)
    depth = np.zeros((7, 9))
    depth[3, 4] = 0.5
    class_map = np.zeros((7, 9), dtype=int)
    class_map[3, 4] = 1
    view = SceneView(ViewPose(0, RigidTransform.identity()), k,
                     DepthRaster(depth), one_hot_tensor(class_map, 3))
    scene = make_scene([view], [(1, 1)])
    clouds, masks = fuse_views(scene, {1: 0.5})
    assert len(clouds[1]) == 1
    np.testing.assert_allclose(clouds[1].positions[0], [0, 0, 0.5], atol=1e-12)
    assert clouds[1].confidence[0] == 1.0
    assert masks[1][0].sum() == 1


def test_fuse_concatenates_views_without_dedup():
    k = CameraIntrinsics(fx=100.0, fy=100.0, cx=4.0, cy=3.0, width=9, height=7)
    depth = np.zeros((7, 9))
    depth[2:5, 2:7] = 0.4
    class_map = np.zeros((7, 9), dtype=int)
    class_map[2:5, 2:7] = 1
    views = [SceneView(ViewPose(i, RigidTransform.identity()), k,
                       DepthRaster(depth), one_hot_tensor(class_map, 3, view_id=i))
             for i in range(2)]
    scene = make_scene(views, [(1, 1)])
    clouds, _ = fuse_views(scene, {1: 0.5})
    assert len(clouds[1]) == 2 * 15


def test_fuse_ignores_missing_depth_but_keeps_mask():
    k = CameraIntrinsics(fx=100.0, fy=100.0, cx=4.0, cy=3.0, width=9, height=7)
    depth = np.zeros((7, 9))          # no depth anywhere
    class_map = np.zeros((7, 9), dtype=int)
    class_map[1:3, 1:4] = 1
    view = SceneView(ViewPose(0, RigidTransform.identity()), k,
                     DepthRaster(depth), one_hot_tensor(class_map, 3))
    scene = make_scene([view], [(1, 1)])
    clouds, masks = fuse_views(scene, {1: 0.5})
    assert clouds[1].is_empty
    assert masks[1][0].sum() == 6


def test_kmeans_objective_monotone_and_locally_optimal():
    rng = np.random.default_rng(1)
    pts = np.vstack([rng.normal(size=(120, 3)) * 0.01 + c
                     for c in ([0, 0, 0], [0.3, 0, 0], [0, 0.25, 0])])
    labels, centers, history = kmeans(pts, 3, seed=7)
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
    # Lloyd fixed point: labels are nearest-center, centers are means
    d2 = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    np.testing.assert_array_equal(labels, np.argmin(d2, axis=1))
    for j in range(3):
        np.testing.assert_allclose(centers[j], pts[labels == j].mean(axis=0), atol=1e-12)


def test_split_duplicates_k1_identity():
    cloud = PointCloud(np.random.default_rng(2).uniform(size=(40, 3)))
    out = split_duplicates(cloud, 1, seed=0)
    assert len(out) == 1
    np.testing.assert_array_equal(out[0].positions, cloud.positions)


def test_split_duplicates_well_separated_blobs():
    rng = np.random.default_rng(3)
    a = rng.normal(scale=0.01, size=(500, 3))
    b = rng.normal(scale=0.01, size=(500, 3)) + [0.3, 0, 0]
    cloud = PointCloud(np.vstack([a, b]), confidence=np.full(1000, 0.9))
    parts = split_duplicates(cloud, 2, seed=11)
    assert len(parts) == 2
    assert len(parts[0]) == 500 and len(parts[1]) == 500
    # ordered by centroid x; membership matches the generating blobs exactly
    assert np.all(parts[0].positions[:, 0] < 0.15)
    assert np.all(parts[1].positions[:, 0] > 0.15)
    assert parts[0].confidence is not None


def test_split_duplicates_coincident_blobs_nonempty():
    pts = np.tile([[0.1, 0.2, 0.3]], (50, 1))
    parts = split_duplicates(PointCloud(pts), 2, seed=5)
    assert len(parts) == 2
    assert all(len(p) >= 1 for p in parts)


def test_split_duplicates_too_few_points():
    with pytest.raises(TooFewPoints):
        split_duplicates(PointCloud([[0, 0, 0]]), 2, seed=0)


def test_split_duplicates_deterministic():
    rng = np.random.default_rng(4)
    pts = rng.uniform(size=(300, 3))
    cloud = PointCloud(pts)
    a = split_duplicates(cloud, 3, seed=42)
    b = split_duplicates(cloud, 3, seed=42)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.positions, y.positions)


def test_pten_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    raw = rng.uniform(size=(6, 8, 4)).astype(np.float32)
    raw /= raw.sum(axis=2, keepdims=True)
    t = ProbabilityTensor(3, raw)
    path = tmp_path / "view.pten"
    save_pten(path, t)
    back = load_pten(path, view_id=3)
    assert back.view_id == 3
    np.testing.assert_array_equal(back.values, t.values)
    assert (back.width, back.height, back.num_classes) == (8, 6, 4)


def test_pten_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.pten"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValidationError):
        load_pten(path)


def test_depth_png_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    depth = rng.uniform(0.2, 1.2, size=(12, 16))
    depth[0, :] = 0.0
    path = tmp_path / "d.png"
    save_depth_png(path, DepthRaster(depth))
    back = load_depth_png(path)
    np.testing.assert_allclose(back.values, depth, atol=0.5 / 10000)
    assert np.all(back.values[0, :] == 0)


def test_tensor_validation():
    bad = np.full((4, 4, 2), 0.9, dtype=np.float32)  # rows sum to 1.8
    with pytest.raises(ValidationError):
        ProbabilityTensor(0, bad)


def test_scene_view_cap():
    k = CameraIntrinsics(100.0, 100.0, 2.0, 2.0, 5, 5)
    views = [SceneView(ViewPose(i, RigidTransform.identity()), k,
                       DepthRaster(np.zeros((5, 5))), uniform_tensor(5, 5, 2, i))
             for i in range(16)]
    with pytest.raises(ValidationError):
        make_scene(views, [(1, 1)])
