"""Fuse per-view class-probability maps into per-object 3D segments.

Per scene: class thresholds are set at mean + 3 sigma of each expected
class's probability over all pixels of all views; above-threshold pixels
with valid depth are backprojected and combined across views using the
known camera poses; the fused cloud is denoised and, when the scene
expects duplicates of a class, split by k-means into instances.

Above-threshold pixels without depth are kept as per-view 2D masks; they
feed the voxel-carving path for objects the sensor cannot measure.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .cloudops import (AxisAlignedBox, PointCloud, SpatialIndex,
                       background_subtract, crop_to_volume,
                       largest_contiguous_filter, load_ply, principal_axes,
                       statistical_outlier_removal)
from .errors import (DimensionMismatch, MissingFile, NoViews, TooFewPoints,
                     ValidationError)
from .geometry import (CameraIntrinsics, DepthRaster, ViewPose,
                       load_view_file)

MAX_VIEWS = {"shelf_bin": 15, "tote": 18}

_PTEN_MAGIC = b"PTEN"
DEPTH_UNITS_PER_METER = 10000  # 16-bit depth PNGs store 0.1 mm units


@dataclass(frozen=True)
class ProbabilityTensor:
    """Per-pixel class probabilities for one view, shape (H, W, C)."""

    view_id: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise ValidationError("probability tensor must be (H, W, C)")
        if v.min() < 0.0 or v.max() > 1.0 + 1e-6:
            raise ValidationError("probabilities must lie in [0, 1]")
        sums = v.sum(axis=2)
        if abs(float(sums.max()) - 1.0) > 1e-3 or abs(float(sums.min()) - 1.0) > 1e-3:
            raise ValidationError("per-pixel class probabilities must sum to 1 within 1e-3")
        v = np.array(v, copy=True)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def num_classes(self) -> int:
        return self.values.shape[2]


def save_pten(path, tensor: ProbabilityTensor):
    """Binary layout: magic, u32 version, u32 w, u32 h, u32 C, f32 data (row, col, class)."""
    v = np.ascontiguousarray(tensor.values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_PTEN_MAGIC)
        f.write(struct.pack("<III", 1, tensor.width, tensor.height))
        f.write(struct.pack("<I", tensor.num_classes))
        f.write(v.tobytes())


def load_pten(path, view_id: int = 0) -> ProbabilityTensor:
    if not os.path.exists(path):
        raise MissingFile(f"probability tensor not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _PTEN_MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}, expected PTEN")
        version, width, height = struct.unpack("<III", f.read(12))
        if version != 1:
            raise ValidationError(f"{path}: unsupported PTEN version {version}")
        (num_classes,) = struct.unpack("<I", f.read(4))
        data = np.frombuffer(f.read(), dtype="<f4")
    expected = width * height * num_classes
    if data.size != expected:
        raise ValidationError(f"{path}: payload has {data.size} floats, expected {expected}")
    return ProbabilityTensor(view_id, data.reshape(height, width, num_classes))


def save_depth_png(path, depth: DepthRaster):
    from PIL import Image

    q = np.rint(depth.values * DEPTH_UNITS_PER_METER).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")


def load_depth_png(path) -> DepthRaster:
    from PIL import Image

    if not os.path.exists(path):
        raise MissingFile(f"depth raster not found: {path}")
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise ValidationError(f"{path}: depth PNG must be single-channel")
    return DepthRaster(arr.astype(np.float64) / DEPTH_UNITS_PER_METER)


@dataclass(frozen=True)
class SceneView:
    """One viewpoint of a scene with its raster data loaded."""

    pose: ViewPose
    intrinsics: CameraIntrinsics
    depth: DepthRaster
    tensor: ProbabilityTensor

    def __post_init__(self):
        if (self.depth.height, self.depth.width) != (self.intrinsics.height,
                                                     self.intrinsics.width):
            raise DimensionMismatch("depth raster does not match intrinsics")
        if (self.tensor.height, self.tensor.width) != (self.depth.height,
                                                       self.depth.width):
            raise DimensionMismatch("probability tensor does not match depth raster")


@dataclass(frozen=True)
class Scene:
    """A fully materialized multi-view capture of one container."""

    container: str
    volume: AxisAlignedBox
    expected: tuple  # ((class_id, instance_count), ...)
    views: tuple     # (SceneView, ...)
    background: PointCloud

    def __post_init__(self):
        if self.container not in MAX_VIEWS:
            raise ValidationError(f"unknown container kind {self.container!r}")
        if len(self.views) > MAX_VIEWS[self.container]:
            raise ValidationError(
                f"{self.container} scenes allow at most {MAX_VIEWS[self.container]} views")
        for class_id, count in self.expected:
            if count < 1:
                raise ValidationError(f"instance count for class {class_id} must be >= 1")

    def view_subset(self, view_ids) -> "Scene":
        if view_ids is None:
            return self
        wanted = set(view_ids)
        kept = tuple(v for v in self.views if v.pose.view_id in wanted)
        if not kept:
            raise NoViews("view subset selected no views")
        return replace(self, views=kept)


@dataclass(frozen=True)
class SegmentedCloud:
    """One expected object instance, as fused/cleaned 3D evidence."""

    class_id: int
    instance_id: int
    cloud: PointCloud
    flagged_empty: bool = False


@dataclass(frozen=True)
class SegmenterConfig:
    outlier_k: int = 10
    outlier_z: float = 2.0
    crop_margin: float = 0.005
    background_radius: float = 0.008
    contiguity_bin: float = 0.010
    denoise: bool = True
    seed: int = 0
    view_ids: tuple | None = None


@dataclass
class SegmentationResult:
    segments: list
    class_masks: dict           # class_id -> {view_id: bool (H, W)}
    thresholds: dict            # class_id -> float
    fused: dict = field(default_factory=dict)  # class_id -> PointCloud (pre-denoise)


def class_thresholds(tensors, expected_classes) -> dict:
    """Per expected class: mean + 3 * stddev of its probability over all pixels."""
    tensors = list(tensors)
    if not tensors:
        raise NoViews("at least one probability tensor is required")
    classes = list(expected_classes)
    if not classes:
        raise ValidationError("expected class list must be non-empty")
    out = {}
    for c in classes:
        vals = np.concatenate([t.values[:, :, c].reshape(-1).astype(np.float64)
                               for t in tensors])
        out[c] = float(vals.mean() + 3.0 * vals.std())
    return out


def fuse_views(scene: Scene, thresholds: dict):
    """Backproject above-threshold pixels of every view into world space.

    Returns (clouds, masks): per-class fused PointCloud with per-point
    confidence, and per-class per-view boolean masks of all above-threshold
    pixels (with or without depth) for the carving path.
    """
    clouds = {c: [] for c in thresholds}
    masks = {c: {} for c in thresholds}
    for view in scene.views:
        depth = view.depth.values
        valid = depth > 0
        for c, threshold in thresholds.items():
            prob = view.tensor.values[:, :, c].astype(np.float64)
            mask = prob >= threshold
            masks[c][view.pose.view_id] = mask
            pick = mask & valid
            if not pick.any():
                continue
            vv, uu = np.nonzero(pick)
            z = depth[vv, uu]
            k = view.intrinsics
            x = (uu - k.cx) * z / k.fx
            y = (vv - k.cy) * z / k.fy
            cam_points = np.column_stack([x, y, z])
            world = view.pose.camera_to_world.apply(cam_points)
            prov = np.column_stack([np.full_like(uu, view.pose.view_id), uu, vv])
            clouds[c].append(PointCloud(world, confidence=prob[vv, uu].clip(0, 1),
                                        provenance=prov.astype(np.int32)))
    fused = {c: PointCloud.concat(parts) if parts else PointCloud.empty()
             for c, parts in clouds.items()}
    return fused, masks


def _kmeans_pp_init(positions, k, rng):
    centers = np.empty((k, 3))
    centers[0] = positions[rng.integers(len(positions))]
    d2 = np.sum((positions - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = positions[rng.integers(len(positions))]
            continue
        probs = d2 / total
        centers[j] = positions[rng.choice(len(positions), p=probs)]
        d2 = np.minimum(d2, np.sum((positions - centers[j]) ** 2, axis=1))
    return centers


def kmeans(positions, k: int, seed: int, max_iterations: int = 100):
    """Lloyd iterations with k-means++ seeding and farthest-point re-seeding.

    Returns (labels, centers, objective_history); converges when the
    assignment stops changing. Empty clusters are re-seeded from the point
    farthest from its assigned center, so no cluster comes back empty.
    """
    positions = np.asarray(positions, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    centers = _kmeans_pp_init(positions, k, rng)
    labels = np.full(len(positions), -1)
    history = []
    for _ in range(max_iterations):
        d2 = np.sum((positions[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)
        best = d2[np.arange(len(positions)), new_labels]
        for j in range(k):
            if not np.any(new_labels == j):
                far = int(np.argmax(best))
                centers[j] = positions[far]
                new_labels[far] = j
                best[far] = 0.0
        history.append(float(best.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            centers[j] = positions[labels == j].mean(axis=0)
    return labels, centers, history


def split_duplicates(cloud: PointCloud, k: int, seed: int):
    """Split a per-class cloud into k instance clouds via k-means on positions.

    Instances come back ordered by cluster centroid (x, then y, then z) so
    the result is deterministic for a given seed.
    """
    if k < 1:
        raise ValidationError("instance count must be >= 1")
    if k == 1:
        return [cloud]
    if len(cloud) < k:
        raise TooFewPoints(f"cannot split {len(cloud)} points into {k} instances")
    labels, centers, _ = kmeans(cloud.positions, k, seed)
    order = np.lexsort((centers[:, 2], centers[:, 1], centers[:, 0]))
    return [cloud.take(labels == j) for j in order]


def _denoise(cloud: PointCloud, scene: Scene, bg_index, cfg: SegmenterConfig) -> PointCloud:
    """Outlier removal, container crop, background subtraction, contiguity."""
    out = cloud
    if len(out) > cfg.outlier_k:
        out = statistical_outlier_removal(out, cfg.outlier_k, cfg.outlier_z)
    out = crop_to_volume(out, scene.volume, cfg.crop_margin)
    if not out.is_empty and bg_index is not None:
        out = background_subtract(out, bg_index, cfg.background_radius)
    if not out.is_empty:
        out = largest_contiguous_filter(out, principal_axes(out), cfg.contiguity_bin)
    return out


def segment_scene(scene: Scene, cfg: SegmenterConfig = SegmenterConfig()) -> SegmentationResult:
    """Full segmentation for one scene: threshold, fuse, denoise, split.

    Emits one SegmentedCloud per expected instance; instances with no
    surviving points are emitted empty and flagged rather than dropped.
    """
    sub = scene.view_subset(cfg.view_ids)
    expected_classes = [c for c, _ in sub.expected]
    if not expected_classes:
        return SegmentationResult([], {}, {})
    thresholds = class_thresholds([v.tensor for v in sub.views], expected_classes)
    fused, masks = fuse_views(sub, thresholds)
    bg_index = SpatialIndex(scene.background.positions) if not scene.background.is_empty else None
    segments = []
    for class_id, count in sub.expected:
        cloud = fused[class_id]
        if cfg.denoise and not cloud.is_empty:
            cloud = _denoise(cloud, scene, bg_index, cfg)
        if len(cloud) >= count and count > 1:
            seed = int(np.random.SeedSequence([cfg.seed, class_id]).generate_state(1)[0])
            parts = split_duplicates(cloud, count, seed)
        elif count > 1:
            # too few points to split: everything in instance 0, rest flagged
            parts = [cloud] + [PointCloud.empty()] * (count - 1)
        else:
            parts = [cloud]
        for instance_id, part in enumerate(parts):
            segments.append(SegmentedCloud(class_id, instance_id, part,
                                           flagged_empty=part.is_empty))
    return SegmentationResult(segments, masks, thresholds, fused)


# --- scene manifests ---------------------------------------------------------
#
# One JSON manifest per scene directory; camera geometry lives in the
# plain-text view file it references. All paths are relative to the
# manifest's directory.

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class SceneManifest:
    container: str
    volume: AxisAlignedBox
    expected: tuple
    view_file: str
    views: tuple          # ((view_id, depth_path, tensor_path), ...)
    background: str
    models_dir: str | None = None


def save_manifest(scene_dir, manifest: SceneManifest):
    doc = {
        "schema_version": 1,
        "container": manifest.container,
        "volume": {"min": list(manifest.volume.min), "max": list(manifest.volume.max)},
        "expected": [[int(c), int(n)] for c, n in manifest.expected],
        "view_file": manifest.view_file,
        "views": [{"view_id": int(v), "depth": d, "tensor": t}
                  for v, d, t in manifest.views],
        "background": manifest.background,
        "models_dir": manifest.models_dir,
    }
    with open(os.path.join(scene_dir, MANIFEST_NAME), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_manifest(scene_dir) -> SceneManifest:
    path = os.path.join(scene_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise MissingFile(f"scene manifest not found: {path}")
    with open(path) as f:
        doc = json.load(f)
    try:
        volume = AxisAlignedBox(doc["volume"]["min"], doc["volume"]["max"])
        views = tuple((int(v["view_id"]), v["depth"], v["tensor"]) for v in doc["views"])
        return SceneManifest(
            container=doc["container"],
            volume=volume,
            expected=tuple((int(c), int(n)) for c, n in doc["expected"]),
            view_file=doc["view_file"],
            views=views,
            background=doc["background"],
            models_dir=doc.get("models_dir"),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed manifest ({exc})") from exc


def load_scene(scene_dir) -> Scene:
    """Materialize a scene directory into memory."""
    manifest = load_manifest(scene_dir)
    cameras = dict()
    for pose, intr in load_view_file(os.path.join(scene_dir, manifest.view_file)):
        cameras[pose.view_id] = (pose, intr)
    views = []
    for view_id, depth_path, tensor_path in manifest.views:
        if view_id not in cameras:
            raise ValidationError(f"view {view_id} missing from {manifest.view_file}")
        pose, intr = cameras[view_id]
        depth = load_depth_png(os.path.join(scene_dir, depth_path))
        tensor = load_pten(os.path.join(scene_dir, tensor_path), view_id=view_id)
        views.append(SceneView(pose, intr, depth, tensor))
    background = load_ply(os.path.join(scene_dir, manifest.background))
    return Scene(container=manifest.container, volume=manifest.volume,
                 expected=manifest.expected, views=tuple(views),
                 background=background)
