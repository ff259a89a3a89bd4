"""Rigid-body transforms between vehicle and camera frames, ground intersection.

Conventions:
  - Vehicle frame: X forward, Y left, Z up, origin on the ground under the
    rear-axle midpoint (ISO 8855 style).
  - Extrinsics are stored in the vehicle-to-camera direction: a vehicle
    point p maps to the camera frame as R @ p + t.  The camera center in
    the vehicle frame is therefore -R^T @ t, and "camera height" means the
    z component of that center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .camera_model import FisheyeIntrinsics, PixelPoint, pixel_to_ray, ray_to_pixel, rays_to_pixels
from .errors import NoGroundIntersectionError

CAMERA_IDS = ("front", "left", "rear", "right")
DEFAULT_ADJACENCY = (("front", "left"), ("front", "right"), ("rear", "left"), ("rear", "right"))

# A ray counts as descending only if its vehicle-frame z slope is below this.
EPS_DESCENDING = 1e-6


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion [w, x, y, z]; normalized at construction."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if n < 1e-8:
            raise ValueError("near-zero quaternion cannot be normalized")
        if abs(n - 1.0) > 1e-15:
            object.__setattr__(self, "w", self.w / n)
            object.__setattr__(self, "x", self.x / n)
            object.__setattr__(self, "y", self.y / n)
            object.__setattr__(self, "z", self.z / n)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    @classmethod
    def from_array(cls, q) -> "Quaternion":
        return cls(float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle_rad
        s = math.sin(half)
        return cls(math.cos(half), axis[0] * s, axis[1] * s, axis[2] * s)

    @classmethod
    def from_matrix(cls, m) -> "Quaternion":
        """Quaternion for a rotation matrix (Shepperd's branch selection)."""
        m = np.asarray(m, dtype=float)
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0.0:
            s = math.sqrt(tr + 1.0) * 2.0
            return cls(0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        if m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            return cls((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        if m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            return cls((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        return cls((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)


def quat_to_matrix(q: Quaternion) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion."""
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1.0 - 2.0 * y * y - 2.0 * z * z, 2.0 * x * y - 2.0 * w * z, 2.0 * x * z + 2.0 * w * y],
            [2.0 * x * y + 2.0 * w * z, 1.0 - 2.0 * x * x - 2.0 * z * z, 2.0 * y * z - 2.0 * w * x],
            [2.0 * x * z - 2.0 * w * y, 2.0 * y * z + 2.0 * w * x, 1.0 - 2.0 * x * x - 2.0 * y * y],
        ]
    )


@dataclass(frozen=True, eq=False)
class Extrinsics:
    """Vehicle-to-camera rigid transform: orientation q and translation t."""

    q: Quaternion
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def camera_center(self) -> np.ndarray:
        """Camera position in the vehicle frame, -R^T @ t."""
        return -quat_to_matrix(self.q).T @ self.t

    @classmethod
    def from_center(cls, q: Quaternion, center) -> "Extrinsics":
        """Build extrinsics from orientation and camera center in vehicle frame."""
        center = np.asarray(center, dtype=float).reshape(3)
        return cls(q=q, t=-quat_to_matrix(q) @ center)


@dataclass(frozen=True)
class GroundPoint:
    """Point on the ground plane in the vehicle frame (z = 0 implicitly)."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"ground point must be finite, got ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class GroundIntersection:
    """Ground-plane hit of a view ray; depth is the metric range along the ray."""

    point: GroundPoint
    depth: float

    def __post_init__(self):
        if self.depth <= 0.0:
            raise ValueError(f"depth must be positive, got {self.depth}")


@dataclass(frozen=True, eq=False)
class Camera:
    id: str
    intrinsics: FisheyeIntrinsics
    extrinsics: Extrinsics

    def __post_init__(self):
        if self.id not in CAMERA_IDS:
            raise ValueError(f"camera id must be one of {CAMERA_IDS}, got {self.id!r}")


@dataclass(frozen=True, eq=False)
class CameraRig:
    """Four-camera rig with the list of adjacent (overlapping) camera pairs."""

    cameras: tuple
    adjacency: tuple = DEFAULT_ADJACENCY

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "adjacency", tuple(tuple(p) for p in self.adjacency))
        ids = [c.id for c in self.cameras]
        if len(self.cameras) != 4:
            raise ValueError(f"a rig needs exactly 4 cameras, got {len(self.cameras)}")
        if len(set(ids)) != 4:
            raise ValueError(f"camera ids must be unique, got {ids}")
        for a, b in self.adjacency:
            if a == b:
                raise ValueError(f"adjacency pair ({a}, {b}) is a self-pair")
            if a not in ids or b not in ids:
                raise ValueError(f"adjacency pair ({a}, {b}) references unknown camera ids")

    @property
    def camera_ids(self) -> list:
        return [c.id for c in self.cameras]

    def camera(self, cam_id: str) -> Camera:
        for c in self.cameras:
            if c.id == cam_id:
                return c
        raise KeyError(f"no camera {cam_id!r} in rig")

    def camera_index(self, cam_id: str) -> int:
        for i, c in enumerate(self.cameras):
            if c.id == cam_id:
                return i
        raise KeyError(f"no camera {cam_id!r} in rig")

    def is_adjacent(self, cam_a: str, cam_b: str) -> bool:
        return (cam_a, cam_b) in self.adjacency or (cam_b, cam_a) in self.adjacency

    def with_extrinsics(self, extrinsics_by_id: dict) -> "CameraRig":
        cams = tuple(replace(c, extrinsics=extrinsics_by_id.get(c.id, c.extrinsics)) for c in self.cameras)
        return CameraRig(cameras=cams, adjacency=self.adjacency)


def vehicle_to_camera(p_v, e: Extrinsics) -> np.ndarray:
    """Map a vehicle-frame point into the camera frame: R @ p + t."""
    p_v = np.asarray(p_v, dtype=float)
    return e.rotation() @ p_v + e.t


def camera_to_vehicle(p_c, e: Extrinsics) -> np.ndarray:
    """Exact inverse of vehicle_to_camera, computed as R^T @ (p - t)."""
    p_c = np.asarray(p_c, dtype=float)
    return e.rotation().T @ (p_c - e.t)


def pixel_to_ground(p: PixelPoint, cam: Camera) -> GroundIntersection:
    """Intersect the view ray of pixel ``p`` with the ground plane z = 0.

    The ray starts at the camera center o = -R^T t and runs along
    d = R^T S (S the unit ray in the camera frame).  The intersection depth
    solves o_z + depth * d_z = 0; rays that do not descend raise.
    """
    ray = pixel_to_ray(p, cam.intrinsics)
    rot = cam.extrinsics.rotation()
    origin = -rot.T @ cam.extrinsics.t
    d = rot.T @ ray.as_array()
    if d[2] >= -EPS_DESCENDING:
        raise NoGroundIntersectionError(
            f"ray from pixel ({p.u:.2f}, {p.v:.2f}) of camera {cam.id} does not descend (d_z={d[2]:.3e})"
        )
    depth = -origin[2] / d[2]
    if depth <= 0.0:
        raise NoGroundIntersectionError(
            f"ray from pixel ({p.u:.2f}, {p.v:.2f}) of camera {cam.id} hits the plane behind the camera"
        )
    hit = origin + depth * d
    return GroundIntersection(point=GroundPoint(float(hit[0]), float(hit[1])), depth=float(depth))


def ground_to_pixel(g: GroundPoint, cam: Camera) -> PixelPoint:
    """Project a ground point into the camera image."""
    p_c = vehicle_to_camera(np.array([g.x, g.y, 0.0]), cam.extrinsics)
    return ray_to_pixel(p_c, cam.intrinsics)


def ground_to_pixels_array(points_xy: np.ndarray, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Project (n, 2) ground points; returns (n, 2) pixels and a validity mask.

    Validity covers field of view only; callers mask image bounds themselves.
    """
    points_xy = np.asarray(points_xy, dtype=float)
    pts3 = np.concatenate([points_xy, np.zeros((*points_xy.shape[:-1], 1))], axis=-1)
    rot = cam.extrinsics.rotation()
    cam_pts = pts3 @ rot.T + cam.extrinsics.t
    return rays_to_pixels(cam_pts, cam.intrinsics)


# The keypoint objective is blind to a rigid motion of the whole rig in the
# ground plane (yaw about the vehicle origin plus an XY shift): it moves all
# reprojections together and preserves their pairwise distances, and the
# frozen camera heights only pin the scale.  These helpers measure and apply
# that 3-DOF motion so callers can anchor a solution to a chosen frame.

def planar_alignment(rig: CameraRig, reference: CameraRig) -> tuple[float, np.ndarray]:
    """Yaw + XY shift that best maps ``rig``'s camera centers onto ``reference``'s.

    Least-squares planar Procrustes over the four centers; returns
    (yaw_radians, shift).
    """
    src = np.array([rig.camera(cid).extrinsics.camera_center()[:2] for cid in reference.camera_ids])
    dst = np.array([reference.camera(cid).extrinsics.camera_center()[:2] for cid in reference.camera_ids])
    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    a = src - src_mean
    b = dst - dst_mean
    num = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    den = float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    if num == 0.0 and den == 0.0:
        raise ValueError("degenerate camera-center configuration; cannot align")
    yaw = math.atan2(num, den)
    cos_y, sin_y = math.cos(yaw), math.sin(yaw)
    rot2 = np.array([[cos_y, -sin_y], [sin_y, cos_y]])
    shift = dst_mean - rot2 @ src_mean
    return yaw, shift


def apply_planar_motion(rig: CameraRig, yaw: float, shift) -> CameraRig:
    """Rotate the whole rig by ``yaw`` about the vehicle Z axis and shift in XY.

    Camera heights are untouched exactly.
    """
    shift = np.asarray(shift, dtype=float).reshape(2)
    cos_y, sin_y = math.cos(yaw), math.sin(yaw)
    rot2 = np.array([[cos_y, -sin_y], [sin_y, cos_y]])
    rot3 = np.eye(3)
    rot3[:2, :2] = rot2
    new_extrinsics = {}
    for cam in rig.cameras:
        center = cam.extrinsics.camera_center()
        new_center = np.array([*(rot2 @ center[:2] + shift), center[2]])
        cam_to_vehicle = rot3 @ cam.extrinsics.rotation().T
        q = Quaternion.from_matrix(cam_to_vehicle.T)
        new_extrinsics[cam.id] = Extrinsics.from_center(q, new_center)
    return rig.with_extrinsics(new_extrinsics)
