"""Fit pre-scanned object models to segmented clouds.

The fitting route per instance:

* deformable objects report their segment centroid only;
* objects with no usable depth (by flag, or fewer 3D points than a floor)
  go through multi-view voxel carving of their 2D masks;
* everything else gets a PCA-based initialization followed by two trimmed
  ICP passes (90th then 45th percentile inlier threshold), so the second
  pass can ignore mislabeled points and tighten the fit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from itertools import permutations

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .cloudops import (AxisAlignedBox, PointCloud, load_ply, principal_axes,
                       save_ply, uniform_grid_average)
from .errors import (AllCarved, DegenerateCorrespondences, EmptySegment,
                     MissingFile, ValidationError)
from .geometry import RigidTransform, rotation_about_axis, rotation_angle_deg


@dataclass(frozen=True)
class Symmetry:
    """Rotational invariance of an object's appearance.

    kind: none | axial | radial | full. Axial objects repeat every
    360/order degrees about `axis`; radial objects are invariant to any
    spin about `axis`; full means orientation is unobservable.
    """

    kind: str = "none"
    axis: tuple = (0.0, 0.0, 1.0)
    order: int = 1

    def __post_init__(self):
        if self.kind not in ("none", "axial", "radial", "full"):
            raise ValidationError(f"unknown symmetry kind {self.kind!r}")
        a = np.asarray(self.axis, dtype=np.float64)
        n = np.linalg.norm(a)
        if self.kind in ("axial", "radial"):
            if n == 0:
                raise ValidationError("symmetry axis must be non-zero")
            object.__setattr__(self, "axis", tuple(a / n))
        if self.kind == "axial" and self.order < 2:
            raise ValidationError("axial symmetry needs order >= 2")


@dataclass(frozen=True)
class ObjectModel:
    """Pre-scanned model cloud in model frame, origin at bounding-box center."""

    class_id: int
    name: str
    cloud: PointCloud
    extents: np.ndarray
    symmetry: Symmetry = Symmetry()
    deformable: bool = False
    no_depth_expected: bool = False
    color: tuple = (0.7, 0.7, 0.7)

    def __post_init__(self):
        if self.cloud.is_empty:
            raise ValidationError("model cloud must be non-empty")
        e = np.asarray(self.extents, dtype=np.float64).reshape(3)
        if np.any(e <= 0):
            raise ValidationError("model extents must be positive")
        e.setflags(write=False)
        object.__setattr__(self, "extents", e)
        center = (self.cloud.positions.max(axis=0) + self.cloud.positions.min(axis=0)) / 2
        if np.abs(center).max() > 2e-3:
            raise ValidationError("model cloud must be centered on its bounding box")

    @staticmethod
    def create(class_id, name, positions, symmetry=Symmetry(), deformable=False,
               no_depth_expected=False, color=(0.7, 0.7, 0.7)) -> "ObjectModel":
        """Build a model from raw points, recentering on the bounding box."""
        p = np.asarray(positions, dtype=np.float64)
        lo, hi = p.min(axis=0), p.max(axis=0)
        centered = p - (lo + hi) / 2
        return ObjectModel(class_id, name, PointCloud(centered), hi - lo,
                           symmetry, deformable, no_depth_expected, tuple(color))


def save_model(models_dir, model: ObjectModel):
    os.makedirs(models_dir, exist_ok=True)
    stem = os.path.join(models_dir, f"class_{model.class_id:02d}")
    save_ply(stem + ".ply", model.cloud)
    meta = {
        "class_id": model.class_id,
        "name": model.name,
        "extents": [float(x) for x in model.extents],
        "symmetry": {"kind": model.symmetry.kind,
                     "axis": list(model.symmetry.axis),
                     "order": model.symmetry.order},
        "deformable": model.deformable,
        "no_depth_expected": model.no_depth_expected,
        "color": [float(c) for c in model.color],
    }
    with open(stem + ".json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")


def load_models(models_dir) -> dict:
    """Load every class_NN.json/ply pair under a models directory."""
    if not os.path.isdir(models_dir):
        raise MissingFile(f"models directory not found: {models_dir}")
    models = {}
    for entry in sorted(os.listdir(models_dir)):
        if not (entry.startswith("class_") and entry.endswith(".json")):
            continue
        with open(os.path.join(models_dir, entry)) as f:
            meta = json.load(f)
        cloud = load_ply(os.path.join(models_dir, entry[:-5] + ".ply"))
        sym = Symmetry(meta["symmetry"]["kind"], tuple(meta["symmetry"]["axis"]),
                       int(meta["symmetry"]["order"]))
        model = ObjectModel(int(meta["class_id"]), meta["name"], cloud,
                            np.asarray(meta["extents"]), sym,
                            bool(meta["deformable"]), bool(meta["no_depth_expected"]),
                            tuple(meta["color"]))
        models[model.class_id] = model
    return models


@dataclass(frozen=True)
class IcpConfig:
    inlier_percentile: float = 0.9
    max_iterations: int = 50
    translation_epsilon: float = 1e-4
    rotation_epsilon: float = 0.01
    grid_cell: float | None = 0.005

    def __post_init__(self):
        if not (0.0 < self.inlier_percentile <= 1.0):
            raise ValidationError("inlier percentile must lie in (0, 1]")


@dataclass(frozen=True)
class IcpResult:
    pose: RigidTransform
    residual: float
    iterations: int
    mse_history: tuple


@dataclass(frozen=True)
class PoseEstimate:
    """Terminal product of the pipeline for one object instance."""

    class_id: int
    instance_id: int
    pose: RigidTransform
    confidence: float
    method: str                  # icp | hull_carve | centroid_only | failed
    residual: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValidationError("confidence must lie in [0, 1]")
        if self.method not in ("icp", "hull_carve", "centroid_only", "failed"):
            raise ValidationError(f"unknown method {self.method!r}")


def _rigid_align(source, target):
    """Least-squares rotation+translation mapping source onto target (SVD)."""
    sc = source.mean(axis=0)
    tc = target.mean(axis=0)
    a = source - sc
    b = target - tc
    h = a.T @ b
    u, s, vt = np.linalg.svd(h)
    if s[1] < 1e-12 * max(s[0], 1e-300):
        raise DegenerateCorrespondences("kept pairs are rank-deficient")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, tc - r @ sc)


def trimmed_icp(model_cloud: PointCloud, segment_cloud: PointCloud,
                init: RigidTransform, cfg: IcpConfig) -> IcpResult:
    """Point-to-point ICP keeping pair distances up to a percentile.

    Correspondences run model -> segment so the complete model seeks its
    visible portion. The recorded trimmed MSE is non-increasing across
    iterations; convergence is declared when one update moves less than
    the translation/rotation epsilons.
    """
    model = model_cloud
    segment = segment_cloud
    if cfg.grid_cell:
        model = uniform_grid_average(model, cfg.grid_cell)
        segment = uniform_grid_average(segment, cfg.grid_cell)
    if len(model) < 3 or len(segment) < 3:
        raise DegenerateCorrespondences(
            f"need >= 3 points on both sides, have {len(model)}/{len(segment)}")
    src = model.positions
    tree = cKDTree(segment.positions)
    pose = init
    history = []
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        moved = pose.apply(src)
        dist, idx = tree.query(moved)
        cutoff = np.quantile(dist, cfg.inlier_percentile)
        keep = dist <= cutoff
        if keep.sum() < 3:
            raise DegenerateCorrespondences("fewer than 3 inlier pairs")
        history.append(float(np.mean(dist[keep] ** 2)))
        delta = _rigid_align(moved[keep], segment.positions[idx[keep]])
        pose = delta @ pose
        if (np.linalg.norm(delta.translation) < cfg.translation_epsilon
                and rotation_angle_deg(delta.rotation) < cfg.rotation_epsilon):
            break
    moved = pose.apply(src)
    dist, _ = tree.query(moved)
    keep = dist <= np.quantile(dist, cfg.inlier_percentile)
    residual = float(dist[keep].mean())
    return IcpResult(pose, residual, iterations, tuple(history))


def coarse_to_fine_icp(model: ObjectModel, segment, init: RigidTransform,
                       cfg: IcpConfig = IcpConfig()) -> IcpResult:
    """Two trimmed passes: 90th percentile, then 45th from the coarse result."""
    segment_cloud = segment.cloud if hasattr(segment, "cloud") else segment
    coarse = trimmed_icp(model.cloud, segment_cloud, init,
                         replace(cfg, inlier_percentile=0.90))
    fine = trimmed_icp(model.cloud, segment_cloud, coarse.pose,
                       replace(cfg, inlier_percentile=0.45))
    return IcpResult(fine.pose, fine.residual,
                     coarse.iterations + fine.iterations,
                     coarse.mse_history + fine.mse_history)


def _projected_extent(direction, rotation, extents) -> float:
    """Size of the rotated model bounding box along a world direction."""
    return float(np.sum(np.abs(direction @ rotation) * extents))


_BURN_COARSE = IcpConfig(inlier_percentile=0.9, max_iterations=12,
                         translation_epsilon=1e-4, rotation_epsilon=0.01,
                         grid_cell=None)
_BURN_FINE = replace(_BURN_COARSE, inlier_percentile=0.45)


def _explanation_cost(model_tree, segment_positions, pose: RigidTransform,
                      trim: float = 0.9) -> float:
    """Trimmed mean distance from segment points to the posed model.

    Unlike the ICP residual (model -> segment), this direction is blind to
    the model's unseen regions, so flipped fits cannot hide a mismatched
    feature behind the trim: the mislabeled tail is trimmed, the feature
    evidence is not.
    """
    local = pose.inverse().apply(segment_positions)
    d, _ = model_tree.query(local)
    cutoff = np.quantile(d, trim)
    return float(d[d <= cutoff].mean())


def _dominant_axis(cloud: PointCloud, views):
    """Optical axis of the view contributing the most segment points.

    Also returns that view's share of the points: with single-view evidence
    the centroid sits a half-object toward the camera and wants the full
    pushback, but a fused multi-view shell is already nearly centered, so
    the correction is scaled by how one-sided the evidence is.
    """
    if not views:
        return np.array([0.0, 0.0, 1.0]), 1.0
    counts = {}
    if cloud.provenance is not None:
        ids, nums = np.unique(cloud.provenance[:, 0], return_counts=True)
        counts = dict(zip(ids.tolist(), nums.tolist()))
    dominant = max(views, key=lambda v: (counts.get(v.view_id, 0), -v.view_id))
    total = sum(counts.values())
    share = counts.get(dominant.view_id, 0) / total if total else 1.0
    return dominant.optical_axis_world, share


def _freespace_cost(scene_views, model_sample, pose: RigidTransform,
                    tol: float = 0.008, cap: float = 0.03) -> float:
    """Mean depth margin by which the posed model juts into observed free space.

    A model point that projects onto a pixel whose measured depth lies well
    BEHIND the point claims surface where the sensor saw through; flipped
    fits do exactly that with their mismatched features. Each point takes
    the smallest violation over its 3x3 pixel neighborhood, so points that
    merely round off a silhouette boundary are not charged; pixels without
    depth are skipped, so missing data never counts against a pose.
    """
    world = pose.apply(model_sample)
    total = 0.0
    count = 0
    for sv in scene_views:
        cam = sv.pose.camera_to_world.inverse().apply(world)
        z = cam[:, 2]
        front = z > 0.05
        intr = sv.intrinsics
        u = np.rint(intr.fx * cam[:, 0] / np.where(front, z, 1.0) + intr.cx).astype(int)
        v = np.rint(intr.fy * cam[:, 1] / np.where(front, z, 1.0) + intr.cy).astype(int)
        ok = front & (u >= 1) & (u < intr.width - 1) & (v >= 1) & (v < intr.height - 1)
        count += int(ok.sum())
        if not ok.any():
            continue
        uu, vv, zz = u[ok], v[ok], z[ok]
        worst = np.full(len(uu), cap)
        for du in (-1, 0, 1):
            for dv in (-1, 0, 1):
                zobs = sv.depth.values[vv + dv, uu + du]
                margin = np.clip(zobs - zz - tol, 0.0, cap)
                margin[zobs <= 0] = 0.0
                np.minimum(worst, margin, out=worst)
        total += float(worst.sum())
    return total / max(count, 1)


def _silhouette_cost(scene_views, class_masks, model_sample,
                     pose: RigidTransform, scale: float = 0.02) -> float:
    """Fraction of projected model points falling outside the class masks.

    Depth rays cannot refute a flipped fit whose mismatched feature hides
    underneath the object, but the 2D segmentation silhouettes can: the
    feature then projects where no view ever labeled the class. Scaled to
    meters so it composes with the distance-based terms.
    """
    if not class_masks:
        return 0.0
    world = pose.apply(model_sample)
    outside = 0
    total = 0
    for sv in scene_views:
        mask = class_masks.get(sv.pose.view_id)
        if mask is None or not mask.any():
            continue
        cam = sv.pose.camera_to_world.inverse().apply(world)
        z = cam[:, 2]
        front = z > 0.05
        intr = sv.intrinsics
        u = np.rint(intr.fx * cam[:, 0] / np.where(front, z, 1.0) + intr.cx).astype(int)
        v = np.rint(intr.fy * cam[:, 1] / np.where(front, z, 1.0) + intr.cy).astype(int)
        ok = front & (u >= 1) & (u < intr.width - 1) & (v >= 1) & (v < intr.height - 1)
        total += int(ok.sum())
        if not ok.any():
            continue
        # a point counts as outside only when its whole 3x3 neighborhood is,
        # so silhouette-boundary rounding is not charged
        hit = np.zeros(int(ok.sum()), dtype=bool)
        uu, vv = u[ok], v[ok]
        for du in (-1, 0, 1):
            for dv in (-1, 0, 1):
                hit |= mask[vv + dv, uu + du]
        outside += int(np.count_nonzero(~hit))
    return scale * outside / max(total, 1)


def _rotation_candidates(model: ObjectModel, seg_axes, model_axes) -> list:
    """Proper-rotation hypotheses mapping model axes onto segment axes.

    A partial shell's principal axes can be flipped, swapped, or rotated
    inside near-tied eigenspaces relative to the full model's, so every
    signed axis permutation (24 proper rotations between the two PCA
    frames) is hypothesized; axially symmetric models also get half-period
    offsets so the repeating features start inside ICP's basin.
    """
    a_seg = seg_axes.axes
    a_mod_t = model_axes.axes.T
    sign = 1.0 if np.linalg.det(a_seg) * np.linalg.det(model_axes.axes) > 0 else -1.0
    out = []
    for p in axis_aligned_rotations():
        out.append(a_seg @ (sign * p) @ a_mod_t)
    if model.symmetry.kind == "axial":
        half = rotation_about_axis(model.symmetry.axis, 180.0 / model.symmetry.order)
        out += [r @ half for r in list(out)]
    return out


def initialize_pose(model: ObjectModel, segment, views,
                    pushback: bool = True, disambiguate: bool = True) -> RigidTransform:
    """PCA-based initial guess for the model-to-world transform.

    Rotation aligns model principal axes to segment principal axes when the
    segment's aspect is uneven (consecutive sigma ratio >= 1.2), identity
    otherwise. PCA axes are direction-ambiguous: each of the four proper
    sign assignments is a 180-degree flip of the others and ICP cannot
    escape the wrong basin, so by default every candidate gets a short
    trimmed-ICP burn-in and the lowest residual wins. Translation starts at
    the segment centroid, pushed back along the dominant observing view's
    optical axis by half the rotated bounding-box extent, since a camera
    only sees the near side.
    """
    cloud = segment.cloud if hasattr(segment, "cloud") else segment
    if cloud.is_empty:
        raise EmptySegment("cannot initialize a pose from an empty segment")
    seg_axes = principal_axes(cloud)
    sig = seg_axes.sigma
    r12 = sig[0] / sig[1] if sig[1] > 0 else math.inf
    r23 = sig[1] / sig[2] if sig[2] > 0 else (math.inf if sig[1] > 0 else 1.0)
    uneven = (r12 >= 1.2) or (r23 >= 1.2)

    axis, share = _dominant_axis(cloud, views)

    if uneven:
        model_axes = principal_axes(model.cloud)
        candidates = _rotation_candidates(model, seg_axes, model_axes)
        if not disambiguate:
            candidates = candidates[:1]
    else:
        candidates = [np.eye(3)]

    centroid = cloud.centroid()
    poses = []
    for rot in candidates:
        t = centroid.copy()
        if pushback:
            t = t + axis * share * 0.5 * _projected_extent(axis, rot, model.extents)
        poses.append(RigidTransform(rot, t))
    if len(poses) == 1:
        return poses[0]
    ranked = _burn_in_ranking(model, cloud, poses)
    return ranked[0][1] if ranked else poses[0]


def _burn_in_ranking(model: ObjectModel, cloud: PointCloud, poses,
                     scene_views=None, class_masks=None):
    """Short coarse+fine ICP per candidate, ranked by pose plausibility.

    Flips are separate ICP basins whose own residuals nearly tie, so the
    ranking combines how well each refined pose explains the segment with
    how badly it juts into observed free space or outside the 2D masks.
    """
    model8 = uniform_grid_average(model.cloud, 0.008)
    seg8 = uniform_grid_average(cloud, 0.008)
    seg5 = uniform_grid_average(cloud, 0.005)
    model_tree = cKDTree(model.cloud.positions)
    sample = model8.positions
    sparse_views = list(scene_views)[::3] if scene_views else None
    if len(poses) > 8:
        # tier 1: a very short coarse pass per hypothesis; ranking by how
        # well the roughed-in pose explains a thin segment sample is cheap
        # and keeps near-truth hypotheses alive for the real burn
        probe = seg5.positions[:: max(1, len(seg5) // 400)]
        quick_cfg = replace(_BURN_COARSE, max_iterations=6)
        quick = []
        for pose in poses:
            try:
                rough = trimmed_icp(model8, seg8, pose, quick_cfg)
            except DegenerateCorrespondences:
                continue
            quick.append((_explanation_cost(model_tree, probe, rough.pose),
                          rough.pose))
        quick.sort(key=lambda item: item[0])
        poses = [pose for _, pose in quick[:8]]
    ranked = []
    for pose in poses:
        try:
            burn = trimmed_icp(model8, seg8, pose, _BURN_COARSE)
            burn = trimmed_icp(model8, seg5, burn.pose, _BURN_FINE)
        except DegenerateCorrespondences:
            continue
        cost = _explanation_cost(model_tree, seg5.positions, burn.pose)
        if sparse_views:
            cost += _freespace_cost(sparse_views, sample, burn.pose)
            cost += _silhouette_cost(sparse_views, class_masks, sample, burn.pose)
        ranked.append((cost, burn.pose))
    ranked.sort(key=lambda item: item[0])
    return ranked


AXIS_ALIGNED_ROTATIONS = None


def axis_aligned_rotations():
    """The 24 proper rotations that permute the world axes (cached).

    Ordered by rotation angle so that ties in downstream scoring resolve
    toward the smallest rotation (identity first).
    """
    global AXIS_ALIGNED_ROTATIONS
    if AXIS_ALIGNED_ROTATIONS is None:
        out = []
        for perm in permutations(range(3)):
            p = np.zeros((3, 3))
            p[np.arange(3), perm] = 1.0
            for sx in (1.0, -1.0):
                for sy in (1.0, -1.0):
                    for sz in (1.0, -1.0):
                        m = p * np.array([sx, sy, sz])[:, None]
                        if np.linalg.det(m) > 0:
                            out.append(m)
        out.sort(key=lambda m: round(rotation_angle_deg(m), 6))
        AXIS_ALIGNED_ROTATIONS = out
    return AXIS_ALIGNED_ROTATIONS


@dataclass(frozen=True)
class CarveGrid:
    """Voxelization of the container volume used for silhouette carving."""

    volume: AxisAlignedBox
    resolution: float
    occupancy: np.ndarray | None = None

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValidationError("carve resolution must be positive")

    def centers(self):
        lo, hi = self.volume.min, self.volume.max
        axes = [np.arange(lo[d] + self.resolution / 2, hi[d], self.resolution)
                for d in range(3)]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([g.reshape(-1) for g in grid]), tuple(len(a) for a in axes)


@dataclass(frozen=True)
class HullResult:
    """Convex hull of the surviving carve voxels."""

    vertices: np.ndarray
    centroid: np.ndarray
    axes: object                 # cloudops.PrincipalAxes of surviving voxels
    grid: CarveGrid
    volume: float
    extents: np.ndarray          # survivor extent along each principal axis


def carve_hull(masks, views, intrinsics, grid: CarveGrid) -> HullResult:
    """Voxel carving: a voxel survives iff every view that sees it masks it.

    `masks` are per-view boolean silhouettes aligned with `views` and
    `intrinsics`. Voxels outside every frustum are dropped; if nothing
    survives the carving raises AllCarved.
    """
    views = list(views)
    masks = list(masks)
    if len(views) < 2:
        raise ValidationError("carving needs at least two views")
    if len(masks) != len(views):
        raise ValidationError("one mask per view is required")
    if not isinstance(intrinsics, (list, tuple)):
        intrinsics = [intrinsics] * len(views)
    centers, shape = grid.centers()
    seen = np.zeros(len(centers), dtype=bool)
    alive = np.ones(len(centers), dtype=bool)
    for mask, view, intr in zip(masks, views, intrinsics):
        cam = view.camera_to_world.inverse().apply(centers)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.rint(intr.fx * cam[:, 0] / z + intr.cx).astype(np.int64)
            v = np.rint(intr.fy * cam[:, 1] / z + intr.cy).astype(np.int64)
        in_frustum = (z > 0) & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
        seen |= in_frustum
        inside = np.zeros(len(centers), dtype=bool)
        idx = np.nonzero(in_frustum)[0]
        inside[idx] = mask[v[idx], u[idx]]
        alive &= np.where(in_frustum, inside, True)
    alive &= seen
    if not alive.any():
        raise AllCarved("no voxel survived silhouette carving")
    survivors = centers[alive]
    axes = principal_axes(PointCloud(survivors))
    proj = (survivors - axes.centroid) @ axes.axes
    extents = proj.max(axis=0) - proj.min(axis=0) + grid.resolution
    try:
        hull = ConvexHull(survivors)
    except QhullError:
        hull = ConvexHull(survivors, qhull_options="QJ")
    occupancy = alive.reshape(shape)
    return HullResult(vertices=survivors[hull.vertices],
                      centroid=survivors.mean(axis=0),
                      axes=axes,
                      grid=replace(grid, occupancy=occupancy),
                      volume=float(hull.volume),
                      extents=extents)


def estimate_pose_missing_depth(model: ObjectModel, hull: HullResult) -> PoseEstimate:
    """Pose from a carved hull: centroid plus the best axis-aligned rotation.

    The rotation is chosen from the 24 axis-aligned candidates as the one
    whose rotated bounding-box extents, measured along the hull's principal
    axes, best match the hull's extents.
    """
    best_rot = None
    best_cost = math.inf
    for rot in axis_aligned_rotations():
        sizes = np.array([_projected_extent(hull.axes.axes[:, j], rot, model.extents)
                          for j in range(3)])
        cost = float(np.linalg.norm(sizes - hull.extents))
        if cost < best_cost - 1e-12:
            best_cost = cost
            best_rot = rot
    pose = RigidTransform(best_rot, hull.centroid)
    return PoseEstimate(model.class_id, 0, pose, confidence=0.0,
                        method="hull_carve", residual=None)


def confidence_score(segment) -> float:
    """Mean per-point class confidence of the segment; empty segments score 0."""
    cloud = segment.cloud if hasattr(segment, "cloud") else segment
    if cloud.is_empty or cloud.confidence is None:
        return 0.0
    return float(cloud.confidence.mean())


@dataclass(frozen=True)
class FitConfig:
    icp: IcpConfig = IcpConfig()
    min_icp_points: int = 50
    carve_resolution: float = 0.005
    no_icp_plus: bool = False


def estimate_all(scene, segresult, models: dict, cfg: FitConfig = FitConfig()):
    """Fit every segmented instance, never aborting the scene.

    Routing: deformable -> centroid_only; no-depth flag or too few 3D
    points -> hull carve from the class's 2D masks; otherwise PCA init and
    coarse-to-fine ICP. With no_icp_plus the pre-processing is stripped:
    no grid filter, no pushback, no sign scoring, single 100th-percentile
    pass. Per-instance failures come back with method="failed".
    """
    estimates = []
    for segment in segresult.segments:
        model = models.get(segment.class_id)
        if model is None:
            raise ValidationError(f"no model for class {segment.class_id}")
        conf = confidence_score(segment)
        try:
            estimates.append(_estimate_one(scene, segresult, segment, model, conf, cfg))
        except Exception:
            estimates.append(PoseEstimate(segment.class_id, segment.instance_id,
                                          RigidTransform.identity(), conf, "failed"))
    return estimates


def _estimate_one(scene, segresult, segment, model, conf, cfg: FitConfig) -> PoseEstimate:
    if model.deformable:
        if segment.cloud.is_empty:
            return PoseEstimate(segment.class_id, segment.instance_id,
                                RigidTransform.identity(), conf, "failed")
        pose = RigidTransform(np.eye(3), segment.cloud.centroid())
        return PoseEstimate(segment.class_id, segment.instance_id, pose, conf,
                            "centroid_only")

    views = [v.pose for v in scene.views]
    if model.no_depth_expected or len(segment.cloud) < cfg.min_icp_points:
        try:
            est = _carve_estimate(scene, segresult, segment, model, cfg)
            return replace(est, instance_id=segment.instance_id, confidence=conf)
        except (AllCarved, ValidationError):
            if not segment.cloud.is_empty:
                pose = RigidTransform(np.eye(3), segment.cloud.centroid())
                return PoseEstimate(segment.class_id, segment.instance_id, pose,
                                    conf, "centroid_only")
            raise

    if cfg.no_icp_plus:
        init = initialize_pose(model, segment, views, pushback=False,
                               disambiguate=False)
        icp_cfg = replace(cfg.icp, inlier_percentile=1.0, grid_cell=None)
        result = trimmed_icp(model.cloud, segment.cloud, init, icp_cfg)
    else:
        result = fit_model(model, segment, views, cfg.icp,
                           scene_views=scene.views,
                           class_masks=segresult.class_masks.get(segment.class_id))
    return PoseEstimate(segment.class_id, segment.instance_id, result.pose,
                        conf, "icp", residual=result.residual)


def fit_model(model: ObjectModel, segment, views,
              cfg: IcpConfig = IcpConfig(), scene_views=None,
              class_masks=None) -> IcpResult:
    """Initialization, flip disambiguation, and coarse-to-fine refinement.

    The best burn-in candidates get the full two-pass refinement; the final
    pose is the one that explains the segment best while staying out of
    observed free space (when the scene's depth rasters are supplied). A
    single candidate (even aspect, or nothing survived burn-in) degrades to
    plain init + coarse-to-fine.
    """
    cloud = segment.cloud if hasattr(segment, "cloud") else segment
    if cloud.is_empty:
        raise EmptySegment("cannot fit a model to an empty segment")
    seg_axes = principal_axes(cloud)
    sig = seg_axes.sigma
    r12 = sig[0] / sig[1] if sig[1] > 0 else math.inf
    r23 = sig[1] / sig[2] if sig[2] > 0 else (math.inf if sig[1] > 0 else 1.0)
    if not (r12 >= 1.2 or r23 >= 1.2):
        init = initialize_pose(model, segment, views)
        return coarse_to_fine_icp(model, segment, init, cfg)

    axis, share = _dominant_axis(cloud, views)
    model_axes = principal_axes(model.cloud)
    centroid = cloud.centroid()
    poses = []
    for rot in _rotation_candidates(model, seg_axes, model_axes):
        t = centroid + axis * share * 0.5 * _projected_extent(axis, rot, model.extents)
        poses.append(RigidTransform(rot, t))
    ranked = _burn_in_ranking(model, cloud, poses, scene_views, class_masks)
    if not ranked:
        return coarse_to_fine_icp(model, segment, poses[0], cfg)
    model_tree = cKDTree(model.cloud.positions)
    seg5 = uniform_grid_average(cloud, 0.005)
    sample = model.cloud.positions
    if len(sample) > 600:
        sample = sample[:: len(sample) // 600]
    best = None
    best_cost = math.inf
    for _, pose in ranked[:3]:
        result = coarse_to_fine_icp(model, segment, pose, cfg)
        cost = _explanation_cost(model_tree, seg5.positions, result.pose)
        if scene_views:
            cost += _freespace_cost(scene_views, sample, result.pose)
            cost += _silhouette_cost(scene_views, class_masks, sample, result.pose)
        if cost < best_cost - 1e-12:
            best = result
            best_cost = cost
    return best


def _carve_estimate(scene, segresult, segment, model, cfg: FitConfig) -> PoseEstimate:
    class_masks = segresult.class_masks.get(segment.class_id, {})
    views, intrinsics, masks = [], [], []
    for sv in scene.views:
        mask = class_masks.get(sv.pose.view_id)
        if mask is not None and mask.any():
            views.append(sv.pose)
            intrinsics.append(sv.intrinsics)
            masks.append(mask)
    grid = CarveGrid(scene.volume, cfg.carve_resolution)
    hull = carve_hull(masks, views, intrinsics, grid)
    return estimate_pose_missing_depth(model, hull)


# --- pose records ------------------------------------------------------------
#
# Plain-text: one record per line after the version header,
#   class_id instance_id method confidence residual m00 ... m33
# plus a JSON document with the same content.

POSES_TXT = "poses.txt"
POSES_JSON = "poses.json"


def save_estimates(scene_dir, estimates):
    lines = ["# binpick poses v1",
             "# class_id instance_id method confidence residual  model_to_world (4x4 row-major)"]
    docs = []
    for e in estimates:
        m = e.pose.as_matrix().reshape(-1)
        res = "nan" if e.residual is None else f"{e.residual:.9g}"
        nums = " ".join(f"{x:.17g}" for x in m)
        lines.append(f"{e.class_id} {e.instance_id} {e.method} "
                     f"{e.confidence:.9g} {res} {nums}")
        docs.append({
            "class_id": e.class_id, "instance_id": e.instance_id,
            "method": e.method, "confidence": e.confidence,
            "residual": e.residual,
            "model_to_world": [[float(x) for x in row] for row in e.pose.as_matrix()],
        })
    with open(os.path.join(scene_dir, POSES_TXT), "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(scene_dir, POSES_JSON), "w") as f:
        json.dump({"schema_version": 1, "estimates": docs}, f, indent=1, sort_keys=True)
        f.write("\n")


def load_estimates(scene_dir):
    path = os.path.join(scene_dir, POSES_JSON)
    if not os.path.exists(path):
        raise MissingFile(f"pose records not found: {path}")
    with open(path) as f:
        doc = json.load(f)
    out = []
    for rec in doc["estimates"]:
        pose = RigidTransform.from_matrix(np.asarray(rec["model_to_world"]))
        out.append(PoseEstimate(int(rec["class_id"]), int(rec["instance_id"]),
                                pose, float(rec["confidence"]), rec["method"],
                                rec["residual"]))
    return out
