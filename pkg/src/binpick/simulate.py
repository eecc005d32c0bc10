"""Synthetic scene oracle: containers, views, renders, and ground truth.

Scenes are rendered by splatting model surface points through the pinhole
with a z-buffer, so the output is exactly the kind of data the pipeline
consumes: per-view depth rasters, per-pixel class-probability tensors, and
per-instance truth masks and poses. Corruption (depth noise, dropout,
label flips, boundary-weighted probability blur) is controlled per spec
field and every random draw derives from the scene seed, so renders are
bit-reproducible.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .bench import GroundTruthScene, TruthInstance
from .cloudops import AxisAlignedBox, PointCloud, save_ply
from .errors import EmptySpec, MissingFile, NotRendered, ValidationError
from .geometry import (CameraIntrinsics, DepthRaster, RigidTransform,
                       ViewPose, save_view_file)
from .posefit import ObjectModel, Symmetry, save_model
from .segfuse import (ProbabilityTensor, Scene, SceneManifest, SceneView,
                      save_depth_png, save_manifest, save_pten)

THIN_EXTENT = 0.015  # objects with a side at or below this are tagged thin


# --- procedural model library -------------------------------------------------

def _box_surface(extents, spacing):
    ex, ey, ez = np.asarray(extents, dtype=np.float64) / 2.0
    pts = []

    def grid(a_half, b_half):
        na = max(2, int(round(2 * a_half / spacing)) + 1)
        nb = max(2, int(round(2 * b_half / spacing)) + 1)
        a = np.linspace(-a_half, a_half, na)
        b = np.linspace(-b_half, b_half, nb)
        aa, bb = np.meshgrid(a, b, indexing="ij")
        return aa.reshape(-1), bb.reshape(-1)

    for sign in (-1.0, 1.0):
        a, b = grid(ey, ez)
        pts.append(np.column_stack([np.full_like(a, sign * ex), a, b]))
        a, b = grid(ex, ez)
        pts.append(np.column_stack([a, np.full_like(a, sign * ey), b]))
        a, b = grid(ex, ey)
        pts.append(np.column_stack([a, b, np.full_like(a, sign * ez)]))
    return np.vstack(pts)


def _boxes_union(parts, spacing):
    """Surface sampling of a union of boxes: (center, extents) pairs."""
    all_pts = []
    for i, (center, extents) in enumerate(parts):
        pts = _box_surface(extents, spacing) + np.asarray(center)
        keep = np.ones(len(pts), dtype=bool)
        for j, (c2, e2) in enumerate(parts):
            if i == j:
                continue
            half = np.asarray(e2) / 2.0 - 1e-6
            inside = np.all(np.abs(pts - np.asarray(c2)) < half, axis=1)
            keep &= ~inside
        all_pts.append(pts[keep])
    return np.vstack(all_pts)


def _revolve(z_knots, r_knots, spacing, caps=(True, True)):
    """Surface of revolution about z from a piecewise-linear radius profile."""
    z0, z1 = z_knots[0], z_knots[-1]
    n_levels = max(3, int(round((z1 - z0) / spacing)) + 1)
    zs = np.linspace(z0, z1, n_levels)
    rs = np.interp(zs, z_knots, r_knots)
    pts = []
    for z, r in zip(zs, rs):
        n = max(6, int(round(2 * math.pi * r / spacing)))
        ang = np.arange(n) * 2 * math.pi / n
        pts.append(np.column_stack([r * np.cos(ang), r * np.sin(ang),
                                    np.full(n, z)]))
    for which, (z, r) in zip(caps, ((z0, rs[0]), (z1, rs[-1]))):
        if not which:
            continue
        radii = np.arange(spacing, r, spacing)
        for rr in radii:
            n = max(6, int(round(2 * math.pi * rr / spacing)))
            ang = np.arange(n) * 2 * math.pi / n
            pts.append(np.column_stack([rr * np.cos(ang), rr * np.sin(ang),
                                        np.full(n, z)]))
        pts.append(np.array([[0.0, 0.0, z]]))
    return np.vstack(pts)


def _fibonacci_sphere(radius, spacing):
    n = max(16, int(round(4 * math.pi * radius ** 2 / spacing ** 2)))
    i = np.arange(n) + 0.5
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return radius * np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def _rotz(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0.0],
                     [math.sin(a), math.cos(a), 0.0],
                     [0.0, 0.0, 1.0]])


_LIBRARY = None


def model_library(spacing: float = 0.004) -> dict:
    """Nine synthetic objects spanning the fitting routes.

    Classes 1-3 and 7 are deliberately asymmetric so flipped fits are
    detectable; 4 and 8 are radially symmetric, 5 is four-fold axial,
    6 is a sphere, 8 has no usable depth, 9 is deformable.
    """
    global _LIBRARY
    if _LIBRARY is not None and spacing == 0.004:
        return _LIBRARY
    lib = {}

    pts = _boxes_union([((0, 0, 0), (0.09, 0.055, 0.04)),
                        ((0.02, 0.0, 0.0375), (0.05, 0.055, 0.035))], spacing)
    lib[1] = ObjectModel.create(1, "step_block", pts, color=(0.85, 0.25, 0.20))

    # doorstop: triangular ramp with a raised heel block at the tall end;
    # the heel makes the pose identifiable from any partial shell
    tri = []
    base_x, base_z, depth_y = 0.08, 0.05, 0.06
    ny = max(2, int(round(depth_y / spacing)) + 1)
    ys = np.linspace(0, depth_y, ny)
    nx = max(2, int(round(base_x / spacing)) + 1)
    xs = np.linspace(0, base_x, nx)
    for y in ys:
        tri.append(np.column_stack([xs, np.full(nx, y), np.zeros(nx)]))       # bottom
        hyp = np.linspace(0, 1, max(2, int(round(math.hypot(base_x, base_z) / spacing)) + 1))
        tri.append(np.column_stack([base_x * (1 - hyp), np.full(len(hyp), y),
                                    base_z * hyp]))                           # slope
    for y in (0.0, depth_y):                                                  # side faces
        for x in xs:
            zmax = base_z * (1 - x / base_x)
            nz = max(1, int(round(zmax / spacing)) + 1)
            zs = np.linspace(0, zmax, nz)
            tri.append(np.column_stack([np.full(nz, x), np.full(nz, y), zs]))
    heel = _box_surface((0.022, depth_y, 0.068), spacing) + \
        np.array([-0.011, depth_y / 2, 0.034])
    lib[2] = ObjectModel.create(2, "doorstop", np.vstack(tri + [heel]),
                                color=(0.20, 0.55, 0.85))

    pts = _boxes_union([((0, 0, 0), (0.085, 0.04, 0.045)),
                        ((0.0225, 0.0375, 0), (0.04, 0.075, 0.045))], spacing)
    lib[3] = ObjectModel.create(3, "lblock", pts, color=(0.25, 0.75, 0.30))

    pts = _revolve([0.0, 0.055, 0.072, 0.095], [0.026, 0.026, 0.013, 0.013], spacing)
    lib[4] = ObjectModel.create(4, "bottle", pts, symmetry=Symmetry("radial"),
                                color=(0.90, 0.65, 0.15))

    # chiral four-fold pinwheel: hub plus 4 tangentially offset fins, all
    # axis-aligned boxes so the union sampler applies
    fin_center = np.array([0.028, 0.0095, 0.0])
    fin_extent = np.array([0.032, 0.011, 0.05])
    parts = [((0.0, 0.0, 0.0), (0.028, 0.028, 0.05))]
    for k in range(4):
        r = _rotz(90 * k)
        parts.append((tuple(r @ fin_center), tuple(np.abs(r @ fin_extent))))
    lib[5] = ObjectModel.create(5, "pinwheel", _boxes_union(parts, spacing),
                                symmetry=Symmetry("axial", order=4),
                                color=(0.60, 0.30, 0.75))

    lib[6] = ObjectModel.create(6, "ball", _fibonacci_sphere(0.032, spacing),
                                symmetry=Symmetry("full"), color=(0.90, 0.85, 0.20))

    # flat L bracket with clearly unequal arms: the asymmetry lives in the
    # silhouette, so it is observable from either face, and no in-plane
    # diagonal flip maps the outline onto itself
    pts = _boxes_union([((0, -0.021, 0), (0.10, 0.030, 0.010)),
                        ((-0.024, 0.014, 0), (0.052, 0.040, 0.010))], spacing)
    lib[7] = ObjectModel.create(7, "l_bracket", pts, color=(0.20, 0.70, 0.70))

    pts = _revolve([0.0, 0.085], [0.024, 0.029], spacing, caps=(True, False))
    lib[8] = ObjectModel.create(8, "mesh_cup", pts, symmetry=Symmetry("radial"),
                                no_depth_expected=True, color=(0.85, 0.45, 0.55))

    dirs = _fibonacci_sphere(1.0, spacing / 0.05)
    theta = np.arctan2(dirs[:, 1], dirs[:, 0])
    bump = 1.0 + 0.18 * np.sin(3 * theta) * (1 - dirs[:, 2] ** 2)
    blob = dirs * bump[:, None] * np.array([0.045, 0.036, 0.014])
    lib[9] = ObjectModel.create(9, "cloth", blob, symmetry=Symmetry("full"),
                                deformable=True, color=(0.50, 0.50, 0.95))

    if spacing == 0.004:
        _LIBRARY = lib
    return lib


# --- containers and view grids ------------------------------------------------

def container_volume(kind: str) -> AxisAlignedBox:
    if kind == "shelf_bin":
        return AxisAlignedBox([0.0, 0.0, 0.0], [0.40, 0.42, 0.26])
    if kind == "tote":
        return AxisAlignedBox([0.0, 0.0, 0.0], [0.55, 0.37, 0.22])
    raise ValidationError(f"unknown container kind {kind!r}")


def container_cloud(kind: str, volume: AxisAlignedBox, spacing: float = 0.006) -> PointCloud:
    """Walls and floor of the container; the open face is left out."""
    lo, hi = volume.min, volume.max

    def rect(fixed_axis, fixed_value, a_axis, b_axis):
        na = max(2, int(round((hi[a_axis] - lo[a_axis]) / spacing)) + 1)
        nb = max(2, int(round((hi[b_axis] - lo[b_axis]) / spacing)) + 1)
        a = np.linspace(lo[a_axis], hi[a_axis], na)
        b = np.linspace(lo[b_axis], hi[b_axis], nb)
        aa, bb = np.meshgrid(a, b, indexing="ij")
        out = np.empty((aa.size, 3))
        out[:, fixed_axis] = fixed_value
        out[:, a_axis] = aa.reshape(-1)
        out[:, b_axis] = bb.reshape(-1)
        return out

    faces = [rect(2, lo[2], 0, 1)]                       # floor
    faces.append(rect(0, lo[0], 1, 2))                   # left wall
    faces.append(rect(0, hi[0], 1, 2))                   # right wall
    faces.append(rect(1, hi[1], 0, 2))                   # back wall
    if kind == "shelf_bin":
        faces.append(rect(2, hi[2], 0, 1))               # bin ceiling; front open
    else:
        faces.append(rect(1, lo[1], 0, 2))               # tote front wall; top open
    return PointCloud(np.vstack(faces))


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world transform with +z forward, +x right, +y down."""
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    if abs(float(np.dot(f, up))) > 0.95:
        up = np.array([0.0, 1.0, 0.0])
    r = np.cross(f, up)
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    rot = np.column_stack([r, d, f])
    return RigidTransform(rot, position)


def default_view_grid(kind: str, image=(160, 120), focal: float = 150.0):
    """Fig.-3 style grids: 3x5 in front of a shelf bin, 3x6 above a tote."""
    volume = container_volume(kind)
    w, h = image
    intr = CameraIntrinsics(focal, focal, (w - 1) / 2.0, (h - 1) / 2.0, w, h)
    target = volume.center
    views = []
    if kind == "shelf_bin":
        rows = np.linspace(0.25, 0.02, 3)                # top row first
        cols = np.linspace(-0.02, 0.42, 5)
        for i, z in enumerate(rows):
            for j, x in enumerate(cols):
                pose = look_at([x, -0.32, z], target)
                views.append((ViewPose(i * 5 + j, pose), intr))
    else:
        rows = np.linspace(0.01, 0.36, 3)
        cols = np.linspace(-0.01, 0.56, 6)
        for i, y in enumerate(rows):
            for j, x in enumerate(cols):
                pose = look_at([x, y, 0.56], target)
                views.append((ViewPose(i * 6 + j, pose), intr))
    return views


# --- scene specs and rendering -------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    container: str = "shelf_bin"
    placements: tuple = ()            # ((ObjectModel, RigidTransform), ...)
    views: tuple | None = None        # ((ViewPose, CameraIntrinsics), ...)
    image: tuple = (160, 120)
    focal: float = 150.0
    depth_sigma: float = 0.0
    dropout: float = 0.0
    label_flip: float = 0.0
    prob_blur: float = 0.0
    blur_decay_px: float = 2.0
    num_classes: int = 40
    seed: int = 0
    environment: str = "office"
    render_rgb: bool = False
    rgb_noise: float = 0.01
    splat_radius: float = 1.0
    volume: AxisAlignedBox | None = None

    def __post_init__(self):
        for name in ("dropout", "label_flip", "prob_blur"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must lie in [0, 1]")
        for model, _ in self.placements:
            if model.class_id >= self.num_classes or model.class_id < 1:
                raise ValidationError("class ids must lie in [1, num_classes)")


@dataclass(frozen=True)
class RenderedView:
    view_id: int
    depth: DepthRaster            # sensor depth (corrupted)
    truth_depth: np.ndarray       # exact z-buffer, 0 where empty
    class_map: np.ndarray         # true class per pixel, 0 = background
    instance_map: np.ndarray      # placement index per pixel, -1 = none
    tensor: ProbabilityTensor
    rgb: np.ndarray | None = None

    def instance_mask(self, instance_index: int) -> np.ndarray:
        return self.instance_map == instance_index


@dataclass
class SimulatedScene:
    spec: SceneSpec
    scene: Scene
    truth: GroundTruthScene
    views: list
    models: dict
    visible_points: dict = field(default_factory=dict)    # placement -> count
    frustum_points: dict = field(default_factory=dict)

    @property
    def scene_id(self) -> str:
        return self.truth.scene_id


_VIS_Z_TOL = 0.006  # a point is visible when within this of the z-buffer winner


def _splat(points, pose, intr, radius):
    """Z-buffer point splatting; returns (winner_index, zbuf) per pixel."""
    cam = pose.camera_to_world.inverse().apply(points)
    z = cam[:, 2]
    front = z > 0.05
    u = intr.fx * cam[:, 0] / np.where(front, z, 1.0) + intr.cx
    v = intr.fy * cam[:, 1] / np.where(front, z, 1.0) + intr.cy
    h, w = intr.height, intr.width
    winner = np.full(h * w, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    # positive float32 bits sort like the values; ties break on point index
    zbits = z.astype(np.float32).view(np.uint32).astype(np.uint64)
    idx = np.arange(len(points), dtype=np.uint64)
    packed = (zbits << np.uint64(24)) | idx
    base_u = np.rint(u).astype(np.int64)
    base_v = np.rint(v).astype(np.int64)
    reach = int(math.floor(radius + 0.5))
    for du in range(-reach, reach + 1):
        for dv in range(-reach, reach + 1):
            uu = base_u + du
            vv = base_v + dv
            ok = front & (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
            ok &= (uu - u) ** 2 + (vv - v) ** 2 <= radius * radius
            if not ok.any():
                continue
            flat = (vv[ok] * w + uu[ok]).astype(np.int64)
            np.minimum.at(winner, flat, packed[ok])
    has = winner != np.uint64(0xFFFFFFFFFFFFFFFF)
    winner_idx = np.full(h * w, -1, dtype=np.int64)
    winner_idx[has] = (winner[has] & np.uint64(0xFFFFFF)).astype(np.int64)
    zbuf = np.zeros(h * w)
    zbuf[has] = z[winner_idx[has]]
    # visibility bookkeeping: a point is seen if it is near the winning depth
    in_frustum = front & (base_u >= 0) & (base_u < w) & (base_v >= 0) & (base_v < h)
    pix = np.where(in_frustum, base_v * w + base_u, 0)
    visible = in_frustum & (z <= zbuf[pix] + _VIS_Z_TOL) & (zbuf[pix] > 0)
    return winner_idx.reshape(h, w), zbuf.reshape(h, w), in_frustum, visible


def render(spec: SceneSpec) -> SimulatedScene:
    """Render a spec into a Scene + ground truth + per-view rasters."""
    views = spec.views if spec.views is not None else default_view_grid(
        spec.container, spec.image, spec.focal)
    views = list(views)
    if not views:
        raise EmptySpec("a scene spec needs at least one view")
    volume = spec.volume if spec.volume is not None else container_volume(spec.container)
    for _, pose in spec.placements:
        if not volume.contains(pose.translation[None, :])[0]:
            raise ValidationError("placement centers must lie inside the container")
    background = container_cloud(spec.container, volume)

    parts = [background.positions]
    classes = [np.zeros(len(background), dtype=np.int32)]
    instances = [np.full(len(background), -1, dtype=np.int32)]
    colors = [np.tile([0.45, 0.45, 0.47], (len(background), 1))]
    for index, (model, pose) in enumerate(spec.placements):
        pts = pose.apply(model.cloud.positions)
        parts.append(pts)
        classes.append(np.full(len(pts), model.class_id, dtype=np.int32))
        instances.append(np.full(len(pts), index, dtype=np.int32))
        colors.append(np.tile(model.color, (len(pts), 1)))
    points = np.vstack(parts)
    point_class = np.concatenate(classes)
    point_instance = np.concatenate(instances)
    point_color = np.vstack(colors)
    if len(points) >= (1 << 24):
        raise ValidationError("scene exceeds the splat buffer's 2^24 point budget")

    no_depth_instances = {i for i, (m, _) in enumerate(spec.placements)
                          if m.no_depth_expected}
    rendered = []
    scene_views = []
    seen_any = np.zeros(len(points), dtype=bool)
    visible_any = np.zeros(len(points), dtype=bool)
    for pose, intr in views:
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 11, pose.view_id]))
        winner, zbuf, in_frustum, visible = _splat(points, pose, intr, spec.splat_radius)
        seen_any |= in_frustum
        visible_any |= visible
        has = winner >= 0
        class_map = np.zeros(winner.shape, dtype=np.int32)
        class_map[has] = point_class[winner[has]]
        instance_map = np.full(winner.shape, -1, dtype=np.int32)
        instance_map[has] = point_instance[winner[has]]

        depth = zbuf.copy()
        for i in no_depth_instances:
            depth[instance_map == i] = 0.0
        valid = depth > 0
        if spec.depth_sigma > 0:
            depth[valid] += rng.normal(0.0, spec.depth_sigma, size=int(valid.sum()))
            depth = np.clip(depth, 0.0, 1.99)
            depth[~valid] = 0.0
        if spec.dropout > 0:
            drop = rng.random(depth.shape) < spec.dropout
            depth[drop & valid] = 0.0

        flipped = class_map.copy()
        if spec.label_flip > 0:
            flip = rng.random(class_map.shape) < spec.label_flip
            if flip.any():
                alt = rng.integers(0, spec.num_classes - 1, size=int(flip.sum()))
                orig = flipped[flip]
                flipped[flip] = np.where(alt >= orig, alt + 1, alt)
        h, w = class_map.shape
        tensor = np.zeros((h, w, spec.num_classes), dtype=np.float32)
        tensor[np.arange(h)[:, None], np.arange(w)[None, :], flipped] = 1.0
        if spec.prob_blur > 0:
            edge = np.zeros((h, w), dtype=bool)
            edge[:, 1:] |= class_map[:, 1:] != class_map[:, :-1]
            edge[:, :-1] |= class_map[:, 1:] != class_map[:, :-1]
            edge[1:, :] |= class_map[1:, :] != class_map[:-1, :]
            edge[:-1, :] |= class_map[1:, :] != class_map[:-1, :]
            if edge.any():
                dist = ndimage.distance_transform_edt(~edge)
                beta = (spec.prob_blur * np.exp(-dist / spec.blur_decay_px)
                        ).astype(np.float32)
                tensor *= (1.0 - beta)[:, :, None]
                tensor += (beta / spec.num_classes)[:, :, None]

        rgb = None
        if spec.render_rgb:
            rgb = np.full((h, w, 3), 0.18)
            rgb[has] = point_color[winner[has]]
            if spec.rgb_noise > 0:
                rgb = rgb + rng.normal(0.0, spec.rgb_noise, size=rgb.shape)
            rgb = np.clip(rgb, 0.0, 1.0)

        raster = DepthRaster(depth)
        ptensor = ProbabilityTensor(pose.view_id, tensor)
        rendered.append(RenderedView(pose.view_id, raster, zbuf, class_map,
                                     instance_map, ptensor, rgb))
        scene_views.append(SceneView(pose, intr, raster, ptensor))

    visible_counts = {}
    frustum_counts = {}
    instances_truth = []
    class_order = {}
    for index, (model, pose) in enumerate(spec.placements):
        mine = point_instance == index
        visible_counts[index] = int(np.count_nonzero(visible_any & mine))
        frustum_counts[index] = int(np.count_nonzero(seen_any & mine))
        occ = _occlusion(visible_counts[index], frustum_counts[index])
        instance_id = class_order.get(model.class_id, 0)
        class_order[model.class_id] = instance_id + 1
        instances_truth.append(TruthInstance(
            class_id=model.class_id, instance_id=instance_id, pose=pose,
            occlusion=occ, deformable=model.deformable,
            thin=bool(min(model.extents) <= THIN_EXTENT),
            no_depth=model.no_depth_expected))

    expected = tuple(sorted(class_order.items()))
    truth = GroundTruthScene(scene_id=f"scene{spec.seed:06d}",
                             environment=spec.environment,
                             task="shelf" if spec.container == "shelf_bin" else "tote",
                             instances=tuple(instances_truth))
    scene = Scene(container=spec.container, volume=volume, expected=expected,
                  views=tuple(scene_views), background=background)
    models = {m.class_id: m for m, _ in spec.placements}
    return SimulatedScene(spec, scene, truth, rendered, models,
                          visible_counts, frustum_counts)


def _occlusion(visible: int, in_frustum: int) -> float:
    if in_frustum == 0:
        return 1.0
    return 1.0 - visible / in_frustum


def occlusion_fraction(sim: SimulatedScene, placement_index: int) -> float:
    """1 - visible/in-frustum for one placed object of a rendered scene."""
    if placement_index not in sim.frustum_points:
        raise NotRendered(f"no visibility stats for placement {placement_index}")
    return _occlusion(sim.visible_points[placement_index],
                      sim.frustum_points[placement_index])


def scene_with_truth_tensors(sim: SimulatedScene) -> Scene:
    """The same scene with exact one-hot tensors built from truth masks."""
    views = []
    for sv, rv in zip(sim.scene.views, sim.views):
        h, w = rv.class_map.shape
        tensor = np.zeros((h, w, sim.spec.num_classes), dtype=np.float32)
        tensor[np.arange(h)[:, None], np.arange(w)[None, :], rv.class_map] = 1.0
        views.append(SceneView(sv.pose, sv.intrinsics, sv.depth,
                               ProbabilityTensor(rv.view_id, tensor)))
    return Scene(container=sim.scene.container, volume=sim.scene.volume,
                 expected=sim.scene.expected, views=tuple(views),
                 background=sim.scene.background)


# --- random scene generation ----------------------------------------------------

def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_scene_spec(seed: int, container: str = "shelf_bin",
                      n_objects: int | None = None, class_ids=None,
                      allow_duplicates: bool = False, image=(160, 120),
                      focal: float = 150.0, **noise) -> SceneSpec:
    """Sample a plausible scene: floating, non-overlapping placements.

    Separation is enforced in the plane perpendicular to the view grid's
    mean optical axis, so objects spread out laterally instead of hiding
    behind one another, the way items are actually arranged in a bin.
    Objects with no depth are placed upright (random yaw), matching the
    axis-aligned assumption of the carving path; everything else gets a
    uniform random orientation.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    library = model_library()
    volume = container_volume(container)
    lateral = (0, 2) if container == "shelf_bin" else (0, 1)
    ids = sorted(library) if class_ids is None else list(class_ids)
    n = int(n_objects) if n_objects is not None else int(rng.integers(1, 6))
    if allow_duplicates:
        chosen = list(rng.choice(ids, size=n, replace=True))
    else:
        n = min(n, len(ids))
        chosen = list(rng.choice(ids, size=n, replace=False))

    placements = []
    centers = []
    radii = []
    for cid in chosen:
        model = library[int(cid)]
        half_diag = float(np.linalg.norm(model.extents)) / 2.0
        placed = False
        for _ in range(400):
            lo = volume.min + half_diag + 0.015
            hi = volume.max - half_diag - 0.015
            if np.any(lo >= hi):
                break
            c = rng.uniform(lo, hi)
            gap = 0.01 if not allow_duplicates else 0.05
            if all(np.linalg.norm(c[list(lateral)] - c2[list(lateral)])
                   >= half_diag + r2 + gap
                   for c2, r2 in zip(centers, radii)):
                placed = True
                break
        if not placed:
            continue
        if model.no_depth_expected:
            rot = _rotz(float(rng.uniform(0.0, 360.0)))
        else:
            rot = random_rotation(rng)
        placements.append((model, RigidTransform(rot, c)))
        centers.append(c)
        radii.append(half_diag)
    return SceneSpec(container=container, placements=tuple(placements),
                     image=image, focal=focal, seed=seed, **noise)


# --- scene directories ------------------------------------------------------------

TRUTH_NAME = "truth.json"


def write_scene_dir(sim: SimulatedScene, out_dir, write_rgb: bool = False):
    """Write a complete on-disk scene consumable by estimate/eval."""
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("depth", "tensors", "truth_masks"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    views = [(sv.pose, sv.intrinsics) for sv in sim.scene.views]
    save_view_file(os.path.join(out_dir, "views.txt"), views)
    view_entries = []
    from PIL import Image

    for rv in sim.views:
        depth_rel = f"depth/view_{rv.view_id:02d}.png"
        tensor_rel = f"tensors/view_{rv.view_id:02d}.pten"
        save_depth_png(os.path.join(out_dir, depth_rel), rv.depth)
        save_pten(os.path.join(out_dir, tensor_rel), rv.tensor)
        Image.fromarray(rv.class_map.astype(np.uint8)).save(
            os.path.join(out_dir, f"truth_masks/view_{rv.view_id:02d}.png"))
        if write_rgb and rv.rgb is not None:
            os.makedirs(os.path.join(out_dir, "rgb"), exist_ok=True)
            Image.fromarray((rv.rgb * 255).astype(np.uint8)).save(
                os.path.join(out_dir, f"rgb/view_{rv.view_id:02d}.png"))
        view_entries.append((rv.view_id, depth_rel, tensor_rel))
    save_ply(os.path.join(out_dir, "background.ply"), sim.scene.background)
    models_dir = os.path.join(out_dir, "models")
    for model in sim.models.values():
        save_model(models_dir, model)
    manifest = SceneManifest(container=sim.scene.container,
                             volume=sim.scene.volume,
                             expected=sim.scene.expected,
                             view_file="views.txt",
                             views=tuple(view_entries),
                             background="background.ply",
                             models_dir="models")
    save_manifest(out_dir, manifest)
    doc = {
        "schema_version": 1,
        "scene_id": os.path.basename(os.path.normpath(out_dir)),
        "environment": sim.truth.environment,
        "task": sim.truth.task,
        "instances": [{
            "class_id": t.class_id, "instance_id": t.instance_id,
            "pose": [[float(x) for x in row] for row in t.pose.as_matrix()],
            "occlusion": t.occlusion, "deformable": t.deformable,
            "thin": t.thin, "no_depth": t.no_depth,
        } for t in sim.truth.instances],
        "truth_masks": "truth_masks",
    }
    with open(os.path.join(out_dir, TRUTH_NAME), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_truth(scene_dir) -> GroundTruthScene:
    path = os.path.join(scene_dir, TRUTH_NAME)
    if not os.path.exists(path):
        raise MissingFile(f"ground truth not found: {path}")
    with open(path) as f:
        doc = json.load(f)
    instances = tuple(TruthInstance(
        class_id=int(t["class_id"]), instance_id=int(t["instance_id"]),
        pose=RigidTransform.from_matrix(np.asarray(t["pose"])),
        occlusion=float(t["occlusion"]), deformable=bool(t["deformable"]),
        thin=bool(t["thin"]), no_depth=bool(t["no_depth"]))
        for t in doc["instances"])
    return GroundTruthScene(scene_id=doc["scene_id"], environment=doc["environment"],
                            task=doc["task"], instances=instances)


def load_truth_class_maps(scene_dir) -> dict:
    """view_id -> uint8 class map, as written by write_scene_dir."""
    from PIL import Image

    mask_dir = os.path.join(scene_dir, "truth_masks")
    if not os.path.isdir(mask_dir):
        raise MissingFile(f"truth masks not found under {scene_dir}")
    out = {}
    for name in sorted(os.listdir(mask_dir)):
        if name.startswith("view_") and name.endswith(".png"):
            vid = int(name[5:7])
            out[vid] = np.asarray(Image.open(os.path.join(mask_dir, name)))
    return out


def truth_tensor_scene_from_dir(scene, class_maps, num_classes: int = 40) -> Scene:
    """Swap a loaded scene's tensors for one-hot tensors from truth masks."""
    views = []
    for sv in scene.views:
        cmap = class_maps[sv.pose.view_id]
        h, w = cmap.shape
        tensor = np.zeros((h, w, num_classes), dtype=np.float32)
        tensor[np.arange(h)[:, None], np.arange(w)[None, :], cmap.astype(int)] = 1.0
        views.append(SceneView(sv.pose, sv.intrinsics, sv.depth,
                               ProbabilityTensor(sv.pose.view_id, tensor)))
    return Scene(container=scene.container, volume=scene.volume,
                 expected=scene.expected, views=tuple(views),
                 background=scene.background)
