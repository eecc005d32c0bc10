import numpy as np
import pytest

from binpick.cloudops import (AxisAlignedBox, PointCloud, SpatialIndex,
                              background_subtract, crop_to_volume,
                              knn_mean_distance, largest_contiguous_filter,
                              load_ply, principal_axes, save_ply,
                              statistical_outlier_removal,
                              uniform_grid_average)
from binpick.errors import (EmptyCloud, TooFewPoints, UnsupportedFormat,
                            ValidationError)
from binpick.geometry import RigidTransform, rotation_about_axis


def brute_force_knn_mean(positions, k):
    out = np.zeros(len(positions))
    for i, p in enumerate(positions):
        d = np.linalg.norm(positions - p, axis=1)
        d = np.sort(d)
        out[i] = d[1:k + 1].mean()  # skip the zero self distance
    return out


def test_knn_mean_distance_two_points():
    cloud = PointCloud([[0, 0, 0], [0.1, 0, 0]])
    np.testing.assert_allclose(knn_mean_distance(cloud, 1), [0.1, 0.1], atol=1e-15)


def test_knn_mean_distance_lattice_interior():
    grid = np.array([[x, y, z] for x in range(5) for y in range(5) for z in range(5)],
                    dtype=float)
    cloud = PointCloud(grid)
    d = knn_mean_distance(cloud, 6)
    center = np.flatnonzero((grid == [2, 2, 2]).all(axis=1))[0]
    assert abs(d[center] - 1.0) < 1e-12


def test_knn_mean_distance_matches_brute_force():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(200, 3))
    got = knn_mean_distance(PointCloud(pts), 10)
    np.testing.assert_allclose(got, brute_force_knn_mean(pts, 10), atol=1e-12)


def test_knn_requires_enough_points():
    with pytest.raises(TooFewPoints):
        knn_mean_distance(PointCloud([[0, 0, 0], [1, 1, 1]]), 2)


def test_outlier_removal_drops_planted_outliers():
    rng = np.random.default_rng(1)
    blob = rng.normal(scale=0.005, size=(1000, 3))
    far = rng.normal(scale=0.005, size=(10, 3)) + [0.5, 0.0, 0.0]
    cloud = PointCloud(np.vstack([blob, far]),
                       confidence=np.full(1010, 0.5))
    out = statistical_outlier_removal(cloud, k=10, z=2.0)
    assert np.all(out.positions[:, 0] < 0.25)          # every far point gone
    assert len(out) >= 990                              # >=99% of blob retained
    assert out.confidence is not None and len(out.confidence) == len(out)


def test_outlier_removal_identical_points_unchanged():
    cloud = PointCloud(np.zeros((50, 3)))
    assert len(statistical_outlier_removal(cloud, k=10, z=2.0)) == 50


def test_outlier_removal_never_empties_cloud():
    rng = np.random.default_rng(2)
    for trial in range(20):
        pts = rng.uniform(-1, 1, size=(30, 3))
        out = statistical_outlier_removal(PointCloud(pts), k=5, z=0.0)
        assert len(out) >= 1


def test_crop_to_volume_cases():
    box = AxisAlignedBox([0, 0, 0], [1, 1, 1])
    inside = PointCloud(np.random.default_rng(3).uniform(0.1, 0.9, size=(50, 3)))
    assert len(crop_to_volume(inside, box)) == 50
    outside = PointCloud(np.random.default_rng(4).uniform(2, 3, size=(50, 3)))
    assert crop_to_volume(outside, box).is_empty


def test_crop_to_volume_half_space_membership():
    # oracle: plain componentwise comparison
    rng = np.random.default_rng(5)
    pts = rng.uniform(-0.5, 1.5, size=(300, 3))
    box = AxisAlignedBox([0, 0, 0], [1, 1, 1])
    got = crop_to_volume(PointCloud(pts), box, margin=0.0)
    keep = [(0 <= p[0] <= 1) and (0 <= p[1] <= 1) and (0 <= p[2] <= 1) for p in pts]
    np.testing.assert_array_equal(got.positions, pts[np.array(keep)])


def test_background_subtract_identical_and_displaced():
    rng = np.random.default_rng(6)
    pts = rng.uniform(0, 1, size=(200, 3))
    index = SpatialIndex(pts)
    assert background_subtract(PointCloud(pts), index, radius=0.001).is_empty
    moved = PointCloud(pts + [0.1, 0, 0])
    # nothing within 1 cm of any background point after a 10 cm shift
    kept = background_subtract(moved, index, radius=0.01)
    assert len(kept) == len(moved)


def test_background_subtract_plane_and_box():
    g = np.linspace(0, 0.4, 81)
    plane = np.array([[x, y, 0.0] for x in g for y in g])
    rng = np.random.default_rng(7)
    box = rng.uniform(0, 1, size=(500, 3)) * [0.05, 0.05, 0.04] + [0.15, 0.15, 0.03]
    cloud = PointCloud(np.vstack([plane, box]))
    out = background_subtract(cloud, SpatialIndex(plane), radius=0.008)
    assert np.all(out.positions[:, 2] > 0.0)            # all plane points removed
    assert len(out) >= 0.98 * 500                       # box mostly retained


def test_principal_axes_box_oracle():
    # oracle: eigendecomposition of the covariance matrix
    rng = np.random.default_rng(8)
    pts = rng.uniform(-0.5, 0.5, size=(5000, 3)) * [0.2, 0.1, 0.05]
    cloud = PointCloud(pts)
    axes = principal_axes(cloud)
    cov = np.cov(pts.T, bias=True)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    np.testing.assert_allclose(axes.sigma, np.sqrt(w[order]), atol=1e-9)
    for j in range(3):
        dot = abs(np.dot(axes.axes[:, j], v[:, order[j]]))
        assert dot > 1 - 1e-9
    ratio = axes.sigma / axes.sigma[2]
    np.testing.assert_allclose(ratio, [4.0, 2.0, 1.0], rtol=0.1)
    np.testing.assert_allclose(axes.centroid, pts.mean(axis=0), atol=1e-12)


def test_principal_axes_single_repeated_point():
    cloud = PointCloud(np.tile([[0.3, 0.2, 0.1]], (5, 1)))
    axes = principal_axes(cloud)
    np.testing.assert_allclose(axes.sigma, [0, 0, 0], atol=1e-15)


def test_principal_axes_sign_convention():
    rng = np.random.default_rng(9)
    pts = rng.normal(size=(500, 3)) * [3.0, 2.0, 1.0]
    axes = principal_axes(PointCloud(pts)).axes
    for j in range(3):
        col = axes[:, j]
        assert col[np.argmax(np.abs(col))] > 0


def test_principal_axes_equivariance():
    rng = np.random.default_rng(10)
    pts = rng.normal(size=(800, 3)) * [0.05, 0.02, 0.008]
    r = rotation_about_axis(rng.normal(size=3), rng.uniform(10, 170))
    t = RigidTransform(r, rng.uniform(-1, 1, 3))
    a0 = principal_axes(PointCloud(pts))
    a1 = principal_axes(PointCloud(pts).transformed(t))
    np.testing.assert_allclose(a1.sigma, a0.sigma, atol=1e-9)
    rotated = r @ a0.axes
    for j in range(3):
        dot = abs(np.dot(rotated[:, j], a1.axes[:, j]))
        assert dot > 1 - 1e-9  # equal up to per-axis sign


def test_principal_axes_empty_raises():
    with pytest.raises(EmptyCloud):
        principal_axes(PointCloud.empty())


def test_contiguous_filter_single_cluster_unchanged():
    rng = np.random.default_rng(11)
    pts = rng.normal(scale=0.01, size=(300, 3))
    cloud = PointCloud(pts)
    out = largest_contiguous_filter(cloud, principal_axes(cloud), bin_width=0.01)
    assert len(out) == 300


def test_contiguous_filter_bimodal():
    rng = np.random.default_rng(12)
    big = rng.normal(scale=0.01, size=(900, 3))
    small = rng.normal(scale=0.01, size=(100, 3)) + [0.3, 0, 0]
    cloud = PointCloud(np.vstack([big, small]))
    out = largest_contiguous_filter(cloud, principal_axes(cloud), bin_width=0.01)
    assert len(out) == 900
    assert np.all(out.positions[:, 0] < 0.15)


def test_contiguous_filter_gap_below_resolution():
    a = np.array([[x * 0.001, 0, 0] for x in range(50)])
    b = a + [0.053, 0.0, 0.0]  # 4 mm gap between cluster ends, below 1 cm bins
    cloud = PointCloud(np.vstack([a, b]))
    out = largest_contiguous_filter(cloud, principal_axes(cloud), bin_width=0.01)
    assert len(out) == 100


def test_contiguous_filter_idempotent():
    rng = np.random.default_rng(13)
    pts = np.vstack([rng.normal(scale=0.02, size=(500, 3)),
                     rng.normal(scale=0.01, size=(60, 3)) + [0.4, 0.1, 0]])
    cloud = PointCloud(pts)
    axes = principal_axes(cloud)
    once = largest_contiguous_filter(cloud, axes, bin_width=0.01)
    twice = largest_contiguous_filter(once, axes, bin_width=0.01)
    np.testing.assert_array_equal(once.positions, twice.positions)


def test_grid_average_single_cell():
    pts = np.array([[0.001, 0.001, 0.001], [0.002, 0.002, 0.002], [0.003, 0.001, 0.002]])
    out = uniform_grid_average(PointCloud(pts, confidence=[0.2, 0.4, 0.6]), cell=0.01)
    assert len(out) == 1
    np.testing.assert_allclose(out.positions[0], pts.mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(out.confidence[0], 0.4, atol=1e-15)


def test_grid_average_spaced_points_unchanged_count():
    pts = np.array([[0.0, 0, 0], [0.02, 0, 0], [0.04, 0, 0], [0, 0.02, 0]]) + 0.001
    out = uniform_grid_average(PointCloud(pts), cell=0.01)
    assert len(out) == 4


def test_grid_average_uniform_density_oracle():
    # oracle: voxel binning by hand; each occupied voxel must hold exactly one output
    rng = np.random.default_rng(14)
    pts = np.column_stack([rng.uniform(0, 0.1, 10000),
                           rng.uniform(0, 0.1, 10000),
                           np.zeros(10000)])
    out = uniform_grid_average(PointCloud(pts), cell=0.005)
    keys_in = set(map(tuple, np.floor(pts / 0.005).astype(int)))
    keys_out = [tuple(k) for k in np.floor(out.positions / 0.005).astype(int)]
    assert len(keys_out) == len(set(keys_out)) == len(keys_in)


def test_spatial_index_matches_linear_scan():
    rng = np.random.default_rng(15)
    for _ in range(100):
        n = rng.integers(20, 60)
        pts = rng.uniform(-1, 1, size=(n, 3))
        queries = rng.uniform(-1, 1, size=(10, 3))
        index = SpatialIndex(pts)
        k = int(rng.integers(1, 5))
        d_idx, i_idx = index.knn(queries, k)
        for q, drow, irow in zip(queries, d_idx, i_idx):
            d = np.linalg.norm(pts - q, axis=1)
            brute = set(np.argsort(d)[:k])
            assert set(irow) == brute
            np.testing.assert_allclose(np.sort(drow), np.sort(d)[:k], atol=1e-12)
        radius = float(rng.uniform(0.1, 0.5))
        got = index.has_neighbor_within(queries, radius)
        want = [np.any(np.linalg.norm(pts - q, axis=1) <= radius) for q in queries]
        np.testing.assert_array_equal(got, np.array(want))


def test_filters_keep_attributes_parallel():
    rng = np.random.default_rng(16)
    n = 400
    cloud = PointCloud(rng.uniform(0, 1, size=(n, 3)),
                       colors=rng.uniform(0, 1, size=(n, 3)),
                       confidence=rng.uniform(0, 1, size=n),
                       provenance=rng.integers(0, 100, size=(n, 3)))
    box = AxisAlignedBox([0.2, 0.2, 0.2], [0.8, 0.8, 0.8])
    for out in (statistical_outlier_removal(cloud, 5, 1.0),
                crop_to_volume(cloud, box),
                largest_contiguous_filter(cloud, principal_axes(cloud), 0.05)):
        assert len(out.colors) == len(out.confidence) == len(out.provenance) == len(out)
        # subset semantics: each output row appears in the input
        for p in out.positions[:10]:
            assert np.any(np.all(np.isclose(cloud.positions, p), axis=1))


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(17)
    cloud = PointCloud(rng.uniform(-1, 1, size=(50, 3)),
                       colors=rng.uniform(0, 1, size=(50, 3)))
    path = tmp_path / "cloud.ply"
    save_ply(path, cloud)
    back = load_ply(path)
    np.testing.assert_allclose(back.positions, cloud.positions, atol=1e-7)
    np.testing.assert_allclose(back.colors, cloud.colors, atol=1.0 / 255)


def test_ply_rejects_binary(tmp_path):
    path = tmp_path / "bin.ply"
    with open(path, "wb") as f:
        f.write(b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
                b"property float x\nproperty float y\nproperty float z\nend_header\n")
        f.write(np.zeros(3, dtype="<f4").tobytes())
    with pytest.raises(UnsupportedFormat):
        load_ply(path)


def test_cloud_validation():
    with pytest.raises(ValidationError):
        PointCloud([[0, 0, 0]], confidence=[1.5])
    with pytest.raises(ValidationError):
        PointCloud([[0, 0, 0], [1, 1, 1]], colors=[[0, 0, 0]])
