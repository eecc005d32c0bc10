"""Point clouds, spatial queries, and the denoising / density primitives.

The cleanup chain applied to every segmented cloud is: statistical outlier
removal, crop to the container volume, background subtraction against a
pre-scanned model, and a largest-contiguous-run filter along each principal
axis. All filters select subsets, keeping colors/confidences/provenance in
lockstep with positions.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import (EmptyBackground, EmptyCloud, MissingFile, TooFewPoints,
                     UnsupportedFormat, ValidationError)
from .geometry import RigidTransform


def _ro(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """Positions in meters plus optional per-point attributes.

    colors: (N, 3) RGB in [0, 1]; confidence: (N,) in [0, 1];
    provenance: (N, 3) int32 rows of (view_id, u, v) source pixels.
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    confidence: np.ndarray | None = None
    provenance: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValidationError("positions contain non-finite values")
        n = len(p)
        object.__setattr__(self, "positions", _ro(p))
        for name, width, dtype in (("colors", 3, np.float64),
                                   ("confidence", None, np.float64),
                                   ("provenance", 3, np.int32)):
            a = getattr(self, name)
            if a is None:
                continue
            a = np.asarray(a, dtype=dtype)
            a = a.reshape(n) if width is None else a.reshape(-1, width)
            if len(a) != n:
                raise ValidationError(f"{name} length {len(a)} != positions length {n}")
            object.__setattr__(self, name, _ro(a))
        if self.confidence is not None and len(self.confidence) and (
                self.confidence.min() < 0 or self.confidence.max() > 1):
            raise ValidationError("confidences must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud(np.zeros((0, 3)))

    def take(self, index) -> "PointCloud":
        """Subset by integer indices or boolean mask, attributes in lockstep."""
        return PointCloud(
            self.positions[index],
            None if self.colors is None else self.colors[index],
            None if self.confidence is None else self.confidence[index],
            None if self.provenance is None else self.provenance[index],
        )

    def transformed(self, t: RigidTransform) -> "PointCloud":
        return PointCloud(t.apply(self.positions), self.colors,
                          self.confidence, self.provenance)

    @staticmethod
    def concat(clouds) -> "PointCloud":
        clouds = [c for c in clouds]
        if not clouds:
            return PointCloud.empty()

        def stack(name, width):
            parts = [getattr(c, name) for c in clouds]
            if any(p is None for p in parts):
                return None
            return np.concatenate([p.reshape(-1, width) if width else p for p in parts])

        return PointCloud(np.concatenate([c.positions for c in clouds]),
                          stack("colors", 3), stack("confidence", 0),
                          stack("provenance", 3))

    def centroid(self) -> np.ndarray:
        if self.is_empty:
            raise EmptyCloud("centroid of empty cloud")
        return self.positions.mean(axis=0)


class SpatialIndex:
    """k-d tree over a cloud's positions; query results match brute force."""

    def __init__(self, positions):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if len(positions) == 0:
            raise EmptyCloud("cannot index an empty point set")
        self._tree = cKDTree(positions)
        self.size = len(positions)

    def knn(self, queries, k: int):
        """Distances and indices of the k nearest stored points per query."""
        d, i = self._tree.query(np.asarray(queries, dtype=np.float64), k=k)
        if k == 1:
            d, i = d[..., None], i[..., None]
        return d, i

    def nearest_distance(self, queries) -> np.ndarray:
        d, _ = self._tree.query(np.asarray(queries, dtype=np.float64), k=1)
        return np.atleast_1d(d)

    def has_neighbor_within(self, queries, radius: float) -> np.ndarray:
        return self.nearest_distance(queries) <= radius


@dataclass(frozen=True)
class AxisAlignedBox:
    """Axis-aligned volume, min <= max componentwise."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValidationError("box min must be <= max componentwise")
        object.__setattr__(self, "min", _ro(lo))
        object.__setattr__(self, "max", _ro(hi))

    @property
    def extents(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return (self.max + self.min) / 2.0

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def expanded(self, margin: float) -> "AxisAlignedBox":
        return AxisAlignedBox(self.min - margin, self.max + margin)

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((p >= self.min) & (p <= self.max), axis=1)


@dataclass(frozen=True)
class PrincipalAxes:
    """PCA frame of a cloud: centroid, axes as matrix columns, std devs.

    Columns of `axes` are orthonormal directions ordered by decreasing
    variance; `sigma` holds the matching standard deviations in meters.
    Sign convention: each axis's largest-magnitude component is positive,
    which makes downstream alignment deterministic.
    """

    centroid: np.ndarray
    axes: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "centroid", _ro(np.asarray(self.centroid, dtype=np.float64)))
        object.__setattr__(self, "axes", _ro(np.asarray(self.axes, dtype=np.float64)))
        object.__setattr__(self, "sigma", _ro(np.asarray(self.sigma, dtype=np.float64)))


def _fix_axis_signs(axes: np.ndarray) -> np.ndarray:
    out = axes.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            out[:, j] = -col
    return out


def principal_axes(cloud: PointCloud) -> PrincipalAxes:
    """PCA of positions with a deterministic sign convention."""
    if cloud.is_empty:
        raise EmptyCloud("principal_axes of empty cloud")
    c = cloud.positions.mean(axis=0)
    centered = cloud.positions - c
    # SVD of the 3x3 scatter matrix (cheap at any N, full basis even when
    # rank-deficient); eigh of the covariance serves as the test oracle.
    scatter = centered.T @ centered
    u, s, _ = np.linalg.svd(scatter)
    sigma = np.sqrt(np.maximum(s, 0.0) / len(cloud))
    axes = _fix_axis_signs(u)
    return PrincipalAxes(centroid=c, axes=axes, sigma=sigma)


def knn_mean_distance(cloud: PointCloud, k: int) -> np.ndarray:
    """Mean distance from each point to its k nearest neighbors (self excluded)."""
    if len(cloud) <= k:
        raise TooFewPoints(f"need more than k={k} points, have {len(cloud)}")
    tree = cKDTree(cloud.positions)
    d, _ = tree.query(cloud.positions, k=k + 1)
    return d[:, 1:].mean(axis=1)


def statistical_outlier_removal(cloud: PointCloud, k: int = 10, z: float = 2.0) -> PointCloud:
    """Drop points whose mean k-NN distance exceeds mean + z * stddev."""
    stat = knn_mean_distance(cloud, k)
    limit = stat.mean() + z * stat.std()
    return cloud.take(stat <= limit)


def crop_to_volume(cloud: PointCloud, box: AxisAlignedBox, margin: float = 0.0) -> PointCloud:
    """Keep points inside the box expanded by `margin` on every face."""
    return cloud.take(box.expanded(margin).contains(cloud.positions))


def background_subtract(cloud: PointCloud, background: SpatialIndex, radius: float) -> PointCloud:
    """Remove points that have any background neighbor within `radius`."""
    if background is None or background.size == 0:
        raise EmptyBackground("background model is empty")
    if cloud.is_empty:
        return cloud
    return cloud.take(~background.has_neighbor_within(cloud.positions, radius))


def largest_contiguous_filter(cloud: PointCloud, axes: PrincipalAxes,
                              bin_width: float = 0.010) -> PointCloud:
    """Keep, per principal axis in turn, the longest run of non-empty bins.

    Projections are histogrammed at `bin_width`; points outside the longest
    contiguous run of occupied bins are dropped before the next axis pass.
    """
    if cloud.is_empty:
        raise EmptyCloud("largest_contiguous_filter of empty cloud")
    if bin_width <= 0:
        raise ValidationError("bin_width must be positive")
    survivors = cloud
    for j in range(3):
        if survivors.is_empty:
            break
        proj = (survivors.positions - axes.centroid) @ axes.axes[:, j]
        bins = np.floor((proj - proj.min()) / bin_width).astype(np.int64)
        occupied = np.zeros(bins.max() + 1, dtype=bool)
        occupied[bins] = True
        best_start = best_len = 0
        start = None
        for i, occ in enumerate(occupied):
            if occ and start is None:
                start = i
            elif not occ and start is not None:
                if i - start > best_len:
                    best_start, best_len = start, i - start
                start = None
        if start is not None and len(occupied) - start > best_len:
            best_start, best_len = start, len(occupied) - start
        survivors = survivors.take((bins >= best_start) & (bins < best_start + best_len))
    return survivors


def uniform_grid_average(cloud: PointCloud, cell: float) -> PointCloud:
    """Average points per occupied cell^3 voxel to equalize density.

    One output point per occupied voxel, at the centroid of its members;
    colors and confidences are averaged, pixel provenance is dropped.
    Output is ordered by voxel key, so results are deterministic.
    """
    if cell <= 0:
        raise ValidationError("cell must be positive")
    if cloud.is_empty:
        return cloud
    keys = np.floor(cloud.positions / cell).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys = keys[order]
    boundaries = np.any(np.diff(keys, axis=0) != 0, axis=1)
    group_id = np.concatenate([[0], np.cumsum(boundaries)])
    n_groups = group_id[-1] + 1
    counts = np.bincount(group_id, minlength=n_groups).astype(np.float64)

    def group_mean(values, width):
        v = values[order]
        out = np.zeros((n_groups, width))
        for c in range(width):
            out[:, c] = np.bincount(group_id, weights=v.reshape(len(v), -1)[:, c],
                                    minlength=n_groups)
        return out / counts[:, None]

    positions = group_mean(cloud.positions, 3)
    colors = None if cloud.colors is None else group_mean(cloud.colors, 3)
    conf = None
    if cloud.confidence is not None:
        conf = group_mean(cloud.confidence, 1).reshape(-1).clip(0.0, 1.0)
    return PointCloud(positions, colors, conf, None)


# --- PLY files ---------------------------------------------------------------
#
# ASCII PLY with float x y z and optional uchar red green blue. Binary PLY
# is rejected with a clear error rather than silently misparsed.

def save_ply(path, cloud: PointCloud):
    n = len(cloud)
    header = ["ply", "format ascii 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if cloud.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "w") as f:
        f.write("\n".join(header) + "\n")
        if cloud.colors is not None:
            rgb = np.rint(np.clip(cloud.colors, 0, 1) * 255).astype(int)
            for p, c in zip(cloud.positions, rgb):
                f.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")
        else:
            for p in cloud.positions:
                f.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")


def load_ply(path) -> PointCloud:
    if not os.path.exists(path):
        raise MissingFile(f"PLY file not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    head, _, body = raw.partition(b"end_header")
    if not body:
        raise ValidationError(f"{path}: missing PLY header")
    header_lines = [ln.strip().decode("ascii", "replace") for ln in head.splitlines()]
    if not header_lines or header_lines[0] != "ply":
        raise ValidationError(f"{path}: not a PLY file")
    fmt = next((ln for ln in header_lines if ln.startswith("format")), "")
    if "binary" in fmt:
        raise UnsupportedFormat(f"{path}: binary PLY is not supported, re-export as ASCII")
    if "ascii" not in fmt:
        raise ValidationError(f"{path}: missing PLY format declaration")
    count = None
    props = []
    element = None
    for ln in header_lines:
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                count = int(parts[2])
        elif parts[0] == "property" and element == "vertex":
            props.append(parts[-1])
    if count is None:
        raise ValidationError(f"{path}: no vertex element")
    for axis in ("x", "y", "z"):
        if axis not in props:
            raise ValidationError(f"{path}: vertex property '{axis}' missing")
    rows = body.decode("ascii", "replace").split("\n")
    rows = [r for r in (row.strip() for row in rows) if r][:count]
    if len(rows) != count:
        raise ValidationError(f"{path}: expected {count} vertices, found {len(rows)}")
    if count == 0:
        return PointCloud.empty()
    data = np.array([row.split() for row in rows], dtype=np.float64)
    if data.shape[1] != len(props):
        raise ValidationError(f"{path}: row width {data.shape[1]} != {len(props)} properties")
    cols = {name: data[:, i] for i, name in enumerate(props)}
    positions = np.column_stack([cols["x"], cols["y"], cols["z"]])
    colors = None
    if all(c in cols for c in ("red", "green", "blue")):
        colors = np.column_stack([cols["red"], cols["green"], cols["blue"]]) / 255.0
    return PointCloud(positions, colors)
