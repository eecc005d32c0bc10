"""Rigid transforms, camera models and depth backprojection.

Conventions used throughout the package:

* World frame: the shelf-bin or tote frame. Axis-aligned container volumes
  and background models live in this frame.
* Camera frame: right-handed computer-vision convention, x right, y down,
  z forward along the optical axis.
* Rotations are stored as 3x3 matrices. Alignment steps produce matrices
  directly (SVD), so no quaternion round trips are needed anywhere.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, MissingFile, NotARotation, ValidationError

# RealSense-class sensors stop well short of 2 m; rasters beyond that are bogus.
SENSOR_DEPTH_CEILING = 2.0

_ORTHO_RAISE = 1e-6   # beyond this the matrix is rejected outright
_ORTHO_FIX = 1e-12    # beyond this (but below raise) we re-orthonormalize


def _as_array(x, shape, name):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != shape:
        raise ValidationError(f"{name} must have shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite values")
    return a


def _frozen_copy(a):
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


def orthonormality_drift(rotation) -> float:
    """Max-abs entry of R^T R - I."""
    r = np.asarray(rotation, dtype=np.float64)
    return float(np.abs(r.T @ r - np.eye(3)).max())


def nearest_rotation(matrix) -> np.ndarray:
    """Project a near-rotation onto SO(3) via polar decomposition."""
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element: rotation (3x3, det +1) plus translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _as_array(self.rotation, (3, 3), "rotation")
        t = _as_array(self.translation, (3,), "translation")
        drift = orthonormality_drift(r)
        if drift > _ORTHO_RAISE or np.linalg.det(r) < 0:
            raise NotARotation(f"rotation drift {drift:.3g} or negative determinant")
        if drift > _ORTHO_FIX:
            r = nearest_rotation(r)
        object.__setattr__(self, "rotation", _frozen_copy(r))
        object.__setattr__(self, "translation", _frozen_copy(t))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> "RigidTransform":
        m = _as_array(m, (4, 4), "homogeneous matrix")
        return RigidTransform(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform that applies `other` first, then self."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Apply to an (N, 3) array (or a single (3,) vector)."""
        p = np.asarray(points, dtype=np.float64)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def rotation_about_axis(axis, degrees: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValidationError("rotation axis must be non-zero")
    x, y, z = axis / n
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    th = math.radians(degrees)
    return np.eye(3) + math.sin(th) * k + (1.0 - math.cos(th)) * (k @ k)


def rot_x(degrees: float) -> np.ndarray:
    return rotation_about_axis((1.0, 0.0, 0.0), degrees)


def rot_y(degrees: float) -> np.ndarray:
    return rotation_about_axis((0.0, 1.0, 0.0), degrees)


def rot_z(degrees: float) -> np.ndarray:
    return rotation_about_axis((0.0, 0.0, 1.0), degrees)


def rotation_angle_deg(rotation) -> float:
    """Geodesic angle of a rotation matrix, in degrees, clamped to [0, 180]."""
    r = _as_array(rotation, (3, 3), "rotation")
    if orthonormality_drift(r) > _ORTHO_RAISE or np.linalg.det(r) < 0:
        raise NotARotation("input is not orthonormal within 1e-6")
    # atan2 form of arccos((trace-1)/2); stable near 0 and 180 degrees
    c = (np.trace(r) - 1.0) / 2.0
    s = 0.5 * math.sqrt((r[2, 1] - r[1, 2]) ** 2 +
                        (r[0, 2] - r[2, 0]) ** 2 +
                        (r[1, 0] - r[0, 1]) ** 2)
    return math.degrees(math.atan2(s, c))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Ideal pinhole model; distortion is out of scope."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")


@dataclass(frozen=True)
class ViewPose:
    """A camera viewpoint: grid index plus camera-to-world transform."""

    view_id: int
    camera_to_world: RigidTransform

    @property
    def optical_axis_world(self) -> np.ndarray:
        """World-frame direction of the camera +z axis."""
        return self.camera_to_world.rotation[:, 2].copy()


@dataclass(frozen=True)
class DepthRaster:
    """Per-pixel depth in meters; 0 marks missing measurements."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError("depth raster must be 2-D")
        if not np.all(np.isfinite(v)) or v.min() < 0:
            raise ValidationError("depth samples must be finite and >= 0")
        if v.max() >= SENSOR_DEPTH_CEILING:
            raise ValidationError(
                f"depth {v.max():.3f} m exceeds sensor ceiling {SENSOR_DEPTH_CEILING} m")
        v = np.array(v, copy=True)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def backproject(depth: DepthRaster, k: CameraIntrinsics, view_id: int = 0):
    """Lift valid depth pixels into camera-frame 3D points.

    Returns a cloudops.PointCloud whose provenance records (view_id, u, v)
    for every emitted point; zero-depth pixels emit nothing.
    """
    from .cloudops import PointCloud  # free of import cycles at call time

    if (depth.height, depth.width) != (k.height, k.width):
        raise DimensionMismatch(
            f"raster {depth.width}x{depth.height} vs intrinsics {k.width}x{k.height}")
    d = depth.values
    v_idx, u_idx = np.nonzero(d > 0)
    z = d[v_idx, u_idx]
    x = (u_idx - k.cx) * z / k.fx
    y = (v_idx - k.cy) * z / k.fy
    positions = np.column_stack([x, y, z])
    provenance = np.column_stack([np.full_like(u_idx, view_id), u_idx, v_idx]).astype(np.int32)
    return PointCloud(positions=positions, provenance=provenance)


def project(points, k: CameraIntrinsics):
    """Project camera-frame points to pixel coordinates.

    Returns (uv, z): continuous pixel coordinates (N, 2) and depths (N,).
    Points behind the camera get z <= 0; the caller filters them.
    """
    p = np.asarray(points, dtype=np.float64)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * p[:, 0] / z + k.cx
        v = k.fy * p[:, 1] / z + k.cy
    return np.column_stack([u, v]), z


# --- view files -------------------------------------------------------------
#
# One plain-text file per scene. Per line:
#   view_id fx fy cx cy width height m00 m01 ... m33
# with the 4x4 camera-to-world matrix in row-major order, '#' comments.

def save_view_file(path, views):
    """Write [(ViewPose, CameraIntrinsics), ...] as a plain-text view file."""
    lines = ["# binpick views v1",
             "# view_id fx fy cx cy width height  camera_to_world (4x4 row-major)"]
    for pose, intr in views:
        m = pose.camera_to_world.as_matrix().reshape(-1)
        nums = " ".join(f"{x:.17g}" for x in m)
        lines.append(f"{pose.view_id} {intr.fx:.17g} {intr.fy:.17g} "
                     f"{intr.cx:.17g} {intr.cy:.17g} {intr.width} {intr.height} {nums}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_view_file(path):
    """Parse a view file back into [(ViewPose, CameraIntrinsics), ...]."""
    if not os.path.exists(path):
        raise MissingFile(f"view file not found: {path}")
    views = []
    seen = set()
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 7 + 16:
                raise ValidationError(f"{path}:{lineno}: expected 23 fields, got {len(parts)}")
            view_id = int(parts[0])
            if view_id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate view id {view_id}")
            seen.add(view_id)
            fx, fy, cx, cy = (float(x) for x in parts[1:5])
            width, height = int(parts[5]), int(parts[6])
            m = np.array([float(x) for x in parts[7:]]).reshape(4, 4)
            views.append((ViewPose(view_id, RigidTransform.from_matrix(m)),
                          CameraIntrinsics(fx, fy, cx, cy, width, height)))
    return views
