"""Ground-truth scene generation for desk-scale verification.

Builds plausible four-camera rigs, samples ground correspondences in the
overlap zones, perturbs poses for recovery tests, and simulates uneven
ground (side slopes or random height noise bounded by a road-roughness
index) to stress the flat-ground assumption.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import KeypointPair
from .camera_model import FisheyeIntrinsics, PixelPoint, rays_to_pixels
from .errors import GeometryError
from .rig_geometry import (
    Camera,
    CameraRig,
    DEFAULT_ADJACENCY,
    Extrinsics,
    Quaternion,
    apply_planar_motion,
    ground_to_pixels_array,
    planar_alignment,
    quat_to_matrix,
)

ZONE_COLORS = ("red", "green", "blue", "orange")

DEFAULT_INTRINSICS = FisheyeIntrinsics(
    a1=300.0, a2=10.0, a3=-5.0, a4=0.5, u0=639.5, v0=399.5, width=1280, height=800
)


@dataclass(frozen=True)
class CameraPlacement:
    """Nominal mount: center in the vehicle frame, heading and downward tilt."""

    center: tuple
    yaw_deg: float
    pitch_deg: float


DEFAULT_PLACEMENTS = {
    "front": CameraPlacement((3.7, 0.0, 0.7), 0.0, 35.0),
    "left": CameraPlacement((1.9, 1.0, 1.1), 90.0, 50.0),
    "rear": CameraPlacement((-1.0, 0.0, 0.9), 180.0, 45.0),
    "right": CameraPlacement((1.9, -1.0, 1.1), -90.0, 50.0),
}


@dataclass(frozen=True, eq=False)
class SyntheticRigSpec:
    """Rig recipe; intrinsics may be shared or per-camera."""

    placements: dict = field(default_factory=lambda: dict(DEFAULT_PLACEMENTS))
    intrinsics: object = DEFAULT_INTRINSICS
    seed: int = 0

    def __post_init__(self):
        for cam_id, placement in self.placements.items():
            if placement.center[2] <= 0.0:
                raise ValueError(f"camera {cam_id!r} height must be positive")

    def intrinsics_for(self, cam_id: str) -> FisheyeIntrinsics:
        if isinstance(self.intrinsics, dict):
            return self.intrinsics[cam_id]
        return self.intrinsics


def _orientation_from_heading(yaw_deg: float, pitch_deg: float) -> Quaternion:
    """Vehicle-to-camera quaternion for a camera heading ``yaw`` and tilted down ``pitch``.

    Camera +Z (optical axis) points along the heading and down; camera +X
    stays horizontal so the image is upright.
    """
    psi = math.radians(yaw_deg)
    phi = math.radians(pitch_deg)
    z_cam = np.array([math.cos(phi) * math.cos(psi), math.cos(phi) * math.sin(psi), -math.sin(phi)])
    x_cam = np.array([math.sin(psi), -math.cos(psi), 0.0])
    y_cam = np.cross(z_cam, x_cam)
    cam_to_vehicle = np.column_stack([x_cam, y_cam, z_cam])
    return Quaternion.from_matrix(cam_to_vehicle.T)


def make_rig(spec: SyntheticRigSpec | None = None) -> CameraRig:
    """Instantiate the ground-truth rig described by ``spec``."""
    if spec is None:
        spec = SyntheticRigSpec()
    cameras = []
    for cam_id in ("front", "left", "rear", "right"):
        placement = spec.placements[cam_id]
        q = _orientation_from_heading(placement.yaw_deg, placement.pitch_deg)
        extr = Extrinsics.from_center(q, np.asarray(placement.center, dtype=float))
        cameras.append(Camera(id=cam_id, intrinsics=spec.intrinsics_for(cam_id), extrinsics=extr))
    return CameraRig(cameras=tuple(cameras), adjacency=DEFAULT_ADJACENCY)


def fixed_heights_of(rig: CameraRig) -> dict:
    """Camera-center heights of a rig, as the fixed-parameter dict."""
    return {c.id: float(c.extrinsics.camera_center()[2]) for c in rig.cameras}


@dataclass(frozen=True)
class RoughnessSpec:
    """Ground unevenness model: per-side slopes or random per-point height noise.

    ``delta_z`` is the maximum height deviation in meters; when derived
    from a roughness index it equals range/1000 * iri.  The slope rises
    from the vehicle footprint rectangle and reaches ``delta_z`` at
    ``range_m`` meters beyond the footprint edge.
    """

    mode: str
    delta_z: float
    range_m: float = 20.0
    iri: float = 6.0
    seed: int = 0
    footprint: tuple = (-1.0, 3.7, -1.0, 1.0)  # x_min, x_max, y_min, y_max

    def __post_init__(self):
        if self.mode not in ("slope", "random"):
            raise ValueError(f"mode must be 'slope' or 'random', got {self.mode!r}")
        if self.delta_z < 0.0:
            raise ValueError(f"delta_z must be nonnegative, got {self.delta_z}")
        if self.range_m <= 0.0:
            raise ValueError(f"range_m must be positive, got {self.range_m}")

    @classmethod
    def from_iri(cls, mode: str, range_m: float = 20.0, iri: float = 6.0, seed: int = 0) -> "RoughnessSpec":
        return cls(mode=mode, delta_z=iri_height_bound(range_m, iri), range_m=range_m, iri=iri, seed=seed)


def iri_height_bound(range_m: float, iri: float) -> float:
    """Maximum height deviation over ``range_m`` meters at roughness ``iri`` (m/km)."""
    if range_m <= 0.0:
        raise ValueError(f"range_m must be positive, got {range_m}")
    if iri < 0.0:
        raise ValueError(f"iri must be nonnegative, got {iri}")
    return range_m / 1000.0 * iri


_SAMPLE_BATCH = 512
_MAX_BATCHES = 200


def generate_keypoints(
    rig: CameraRig,
    n_per_zone: int,
    min_range: float,
    max_range: float,
    seed: int,
    frame_id: str = "frame_000",
) -> tuple[list, np.ndarray]:
    """Sample ground points visible in both cameras of every adjacency pair.

    Points are drawn uniformly over the [min_range, max_range] annulus
    (XY distance from the vehicle origin) and rejection-filtered by
    two-camera visibility; pixel observations are exact projections.
    Deterministic per seed with independent per-zone streams.

    Returns the keypoint list and the matching (n, 2) ground points.
    """
    if n_per_zone < 1:
        raise ValueError(f"n_per_zone must be >= 1, got {n_per_zone}")
    if not (0.0 < min_range < max_range):
        raise ValueError(f"need 0 < min_range < max_range, got [{min_range}, {max_range}]")
    pairs = []
    gt_points = []
    for zone_idx, (cam_a, cam_b) in enumerate(rig.adjacency):
        rng = np.random.default_rng([seed, zone_idx])
        cam_i = rig.camera(cam_a)
        cam_j = rig.camera(cam_b)
        color = ZONE_COLORS[zone_idx % len(ZONE_COLORS)]
        found = 0
        for _ in range(_MAX_BATCHES):
            radius = np.sqrt(rng.uniform(min_range**2, max_range**2, _SAMPLE_BATCH))
            angle = rng.uniform(0.0, 2.0 * math.pi, _SAMPLE_BATCH)
            pts = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)
            uv_i, ok_i = _visible_pixels(pts, cam_i)
            uv_j, ok_j = _visible_pixels(pts, cam_j)
            both = ok_i & ok_j
            for k in np.flatnonzero(both):
                pairs.append(
                    KeypointPair(
                        frame_id=frame_id,
                        cam_i=cam_a,
                        cam_j=cam_b,
                        pixel_i=PixelPoint(float(uv_i[k, 0]), float(uv_i[k, 1])),
                        pixel_j=PixelPoint(float(uv_j[k, 0]), float(uv_j[k, 1])),
                        color_tag=color,
                    )
                )
                gt_points.append(pts[k])
                found += 1
                if found == n_per_zone:
                    break
            if found == n_per_zone:
                break
        if found < n_per_zone:
            raise GeometryError(
                f"zone ({cam_a}, {cam_b}): found only {found}/{n_per_zone} visible points "
                f"in range [{min_range}, {max_range}] m"
            )
    return pairs, np.array(gt_points)


# Keep sampled points this far inside the FOV edge (radians) so that small
# 3D displacements (height noise) cannot push an observation out of view.
_FOV_MARGIN = 0.05


def _visible_pixels(points_xy: np.ndarray, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    points_xy = np.asarray(points_xy, dtype=float)
    pts3 = np.concatenate([points_xy, np.zeros((len(points_xy), 1))], axis=-1)
    rot = cam.extrinsics.rotation()
    cam_pts = pts3 @ rot.T + cam.extrinsics.t
    theta = np.arctan2(np.hypot(cam_pts[:, 0], cam_pts[:, 1]), cam_pts[:, 2])
    uv, ok = ground_to_pixels_array(points_xy, cam)
    intr = cam.intrinsics
    ok = ok & (theta <= intr.theta_max - _FOV_MARGIN)
    ok = ok & (uv[:, 0] >= 0.0) & (uv[:, 0] <= intr.width - 1) & (uv[:, 1] >= 0.0) & (uv[:, 1] <= intr.height - 1)
    return uv, ok


def apply_height_noise(gt_points: np.ndarray, spec: RoughnessSpec) -> np.ndarray:
    """Displace ground points vertically according to the roughness model.

    Slope mode raises each point linearly with its distance beyond the
    vehicle footprint on each side (corner zones take the max of the two
    adjacent sides); random mode draws z ~ Uniform[0, delta_z] per point.
    """
    pts = np.asarray(gt_points, dtype=float)
    xy = pts[:, :2]
    if spec.mode == "slope":
        x_min, x_max, y_min, y_max = spec.footprint
        beyond = np.stack(
            [
                xy[:, 0] - x_max,   # front
                x_min - xy[:, 0],   # rear
                xy[:, 1] - y_max,   # left
                y_min - xy[:, 1],   # right
            ],
            axis=-1,
        )
        slope = np.clip(beyond / spec.range_m, 0.0, 1.0).max(axis=-1)
        z = spec.delta_z * slope
    else:
        rng = np.random.default_rng(spec.seed)
        z = rng.uniform(0.0, spec.delta_z, len(xy))
    return np.concatenate([xy, z[:, None]], axis=-1)


def reproject_pairs(rig: CameraRig, pairs: list, points_3d: np.ndarray) -> list:
    """Regenerate pixel observations by full 3D projection of displaced points."""
    points_3d = np.asarray(points_3d, dtype=float)
    if len(pairs) != len(points_3d):
        raise ValueError("pairs and points_3d must align")
    out = []
    for kp, point in zip(pairs, points_3d):
        pixels = {}
        for cam_id in (kp.cam_i, kp.cam_j):
            cam = rig.camera(cam_id)
            rot = cam.extrinsics.rotation()
            p_c = rot @ point + cam.extrinsics.t
            uv, ok = rays_to_pixels(p_c[None, :], cam.intrinsics)
            if not ok[0]:
                raise GeometryError(f"displaced point {point} left the FOV of camera {cam_id}")
            pixels[cam_id] = PixelPoint(float(uv[0, 0]), float(uv[0, 1]))
        out.append(
            KeypointPair(
                frame_id=kp.frame_id,
                cam_i=kp.cam_i,
                cam_j=kp.cam_j,
                pixel_i=pixels[kp.cam_i],
                pixel_j=pixels[kp.cam_j],
                color_tag=kp.color_tag,
            )
        )
    return out


def add_pixel_noise(pairs: list, sigma_px: float, seed: int) -> list:
    """Gaussian pixel noise on both observations of every pair (seeded)."""
    rng = np.random.default_rng(seed)
    out = []
    for kp in pairs:
        noise = rng.normal(0.0, sigma_px, 4)
        out.append(
            KeypointPair(
                frame_id=kp.frame_id,
                cam_i=kp.cam_i,
                cam_j=kp.cam_j,
                pixel_i=PixelPoint(kp.pixel_i.u + noise[0], kp.pixel_i.v + noise[1]),
                pixel_j=PixelPoint(kp.pixel_j.u + noise[2], kp.pixel_j.v + noise[3]),
                color_tag=kp.color_tag,
            )
        )
    return out


def perturb_rig(rig: CameraRig, translation_mag: float, rotation_mag_deg: float, seed: int) -> CameraRig:
    """Random pose offsets within the given magnitudes; heights stay exact.

    Each camera center moves by at most ``translation_mag`` meters in the
    ground plane and each orientation by at most ``rotation_mag_deg``
    degrees (geodesic).  The common rigid-motion component of the draw (a
    yaw of the whole rig plus an XY shift) is removed: that motion is
    invisible to the reprojection objective, so leaving it in would bake an
    unrecoverable offset into recovery experiments.  The removal can shrink
    the draw slightly to keep every camera within its bounds.
    """
    if translation_mag == 0.0 and rotation_mag_deg == 0.0:
        return rig
    rng = np.random.default_rng(seed)
    draws = []
    for cam in rig.cameras:
        direction = rng.uniform(0.0, 2.0 * math.pi)
        mag = rng.uniform(0.0, translation_mag)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = math.radians(rng.uniform(-rotation_mag_deg, rotation_mag_deg))
        draws.append((np.array([mag * math.cos(direction), mag * math.sin(direction), 0.0]), axis, angle))

    def build(scale: float) -> CameraRig:
        extrinsics = {}
        for cam, (delta_c, axis, angle) in zip(rig.cameras, draws):
            center = cam.extrinsics.camera_center() + scale * delta_c
            delta = quat_to_matrix(Quaternion.from_axis_angle(axis, scale * angle))
            cam_to_vehicle = delta @ cam.extrinsics.rotation().T
            q = Quaternion.from_matrix(cam_to_vehicle.T)
            extrinsics[cam.id] = Extrinsics.from_center(q, center)
        return rig.with_extrinsics(extrinsics)

    scale = 1.0
    candidate = rig
    for _ in range(80):
        candidate = build(scale)
        if translation_mag > 0.0:
            yaw, shift = planar_alignment(candidate, rig)
            candidate = apply_planar_motion(candidate, yaw, shift)
        if _within_bounds(candidate, rig, translation_mag, rotation_mag_deg):
            return candidate
        scale *= 0.85
    return candidate


def _within_bounds(candidate: CameraRig, rig: CameraRig, translation_mag: float, rotation_mag_deg: float) -> bool:
    tol = 1e-9
    for cam_id in rig.camera_ids:
        ca = candidate.camera(cam_id).extrinsics
        cb = rig.camera(cam_id).extrinsics
        if np.linalg.norm(ca.camera_center() - cb.camera_center()) > translation_mag + tol:
            return False
        rel = ca.rotation() @ cb.rotation().T
        angle = math.degrees(math.acos(max(-1.0, min(1.0, (np.trace(rel) - 1.0) / 2.0))))
        if angle > rotation_mag_deg + tol:
            return False
    return True


@dataclass(frozen=True, eq=False)
class PoseErrorReport:
    """Per-camera pose deltas plus max/mean aggregation across cameras."""

    per_camera: dict  # cam_id -> {"dtx", "dty", "droll", "dpitch", "dyaw"}

    QUANTITIES = ("dtx", "dty", "droll", "dpitch", "dyaw")

    def aggregate(self) -> dict:
        out = {}
        for q in self.QUANTITIES:
            vals = [abs(v[q]) for v in self.per_camera.values()]
            out[q] = {"max": max(vals), "mean": float(np.mean(vals))}
        return out

    def max_translation(self) -> float:
        agg = self.aggregate()
        return max(agg["dtx"]["max"], agg["dty"]["max"])

    def max_angle(self) -> float:
        agg = self.aggregate()
        return max(agg["droll"]["max"], agg["dpitch"]["max"], agg["dyaw"]["max"])


def pose_error(rig_a: CameraRig, rig_b: CameraRig) -> PoseErrorReport:
    """Center deltas and yaw/pitch/roll of the relative orientation per camera.

    The relative rotation is expressed in the vehicle frame and decomposed
    with the intrinsic Z-Y-X (yaw, pitch, roll) convention, in degrees.
    """
    if set(rig_a.camera_ids) != set(rig_b.camera_ids):
        raise ValueError("rigs have different camera ids")
    per_camera = {}
    for cam_id in rig_a.camera_ids:
        ca = rig_a.camera(cam_id).extrinsics
        cb = rig_b.camera(cam_id).extrinsics
        center_a = ca.camera_center()
        center_b = cb.camera_center()
        rel = ca.rotation().T @ cb.rotation()  # O_a @ O_b^T in vehicle coords
        yaw = math.degrees(math.atan2(rel[1, 0], rel[0, 0]))
        pitch = math.degrees(-math.asin(max(-1.0, min(1.0, rel[2, 0]))))
        roll = math.degrees(math.atan2(rel[2, 1], rel[2, 2]))
        per_camera[cam_id] = {
            "dtx": float(center_a[0] - center_b[0]),
            "dty": float(center_a[1] - center_b[1]),
            "droll": roll,
            "dpitch": pitch,
            "dyaw": yaw,
        }
    return PoseErrorReport(per_camera=per_camera)


def run_roughness_experiment(
    mode: str,
    delta_z: float,
    seed: int,
    rig_spec: SyntheticRigSpec | None = None,
    n_per_zone: int = 12,
    min_range: float = 2.0,
    max_range: float = 15.0,
    slope_range: float = 20.0,
    init_translation: float = 0.10,
    init_rotation_deg: float = 2.0,
    solver=None,
) -> dict:
    """One end-to-end uneven-ground run: generate, displace, calibrate, score.

    Keypoint pixels are regenerated from the displaced 3D points while the
    solver still assumes a flat ground, so the resulting pose error
    quantifies the damage done by the height deviation.  Returns the pose
    error report against the true rig plus the held-out MDE.
    """
    from .calibration import CalibrationProblem, calibrate
    from .metrics import mde as run_mde

    rig = make_rig(rig_spec)
    heights = fixed_heights_of(rig)
    pairs, gt_points = generate_keypoints(rig, n_per_zone, min_range, max_range, seed=seed)
    if delta_z > 0.0:
        spec = RoughnessSpec(mode=mode, delta_z=delta_z, range_m=slope_range, seed=seed)
        displaced = apply_height_noise(gt_points, spec)
        pairs = reproject_pairs(rig, pairs, displaced)
    init = perturb_rig(rig, init_translation, init_rotation_deg, seed=seed + 104729)
    kwargs = {"solver": solver} if solver is not None else {}
    result = calibrate(CalibrationProblem(init, pairs, heights, **kwargs))
    eval_pairs, _ = generate_keypoints(rig, 10, min_range, max_range, seed=seed + 7919)
    report = run_mde(eval_pairs, result.rig_optimized)
    return {
        "mode": mode,
        "delta_z": delta_z,
        "seed": seed,
        "pose_error": pose_error(result.rig_optimized, rig),
        "mde_total": report.total,
        "objective_initial": result.objective_initial,
        "objective_final": result.objective_final,
        "iterations": result.iterations,
        "converged": result.converged,
    }


# Procedural scenes for the renderer and metric tests.  Only geometry and
# simple ground textures; no attempt at photo-realism.

def checkerboard_texture(tile: float = 2.0):
    """Binary checker pattern on the ground plane, tiles of ``tile`` meters."""

    def tex(x, y):
        return ((np.floor(x / tile) + np.floor(y / tile)) % 2.0).astype(float)

    return tex


def smooth_noise_texture(seed: int = 0, cell: float = 1.5, extent: float = 45.0):
    """Seeded band-limited random texture (bilinear over a coarse value grid)."""
    n = int(2 * extent / cell) + 2
    rng = np.random.default_rng(seed)
    grid = rng.uniform(0.1, 0.9, (n, n))

    def tex(x, y):
        gx = np.clip((np.asarray(x) + extent) / cell, 0, n - 2)
        gy = np.clip((np.asarray(y) + extent) / cell, 0, n - 2)
        ix = np.floor(gx).astype(int)
        iy = np.floor(gy).astype(int)
        fx = gx - ix
        fy = gy - iy
        top = grid[ix, iy] * (1 - fy) + grid[ix, iy + 1] * fy
        bottom = grid[ix + 1, iy] * (1 - fy) + grid[ix + 1, iy + 1] * fy
        return top * (1 - fx) + bottom * fx

    return tex


@dataclass(frozen=True)
class RaisedBox:
    """Axis-aligned box whose textured top plane floats above the ground."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    height: float
    shade: float = 0.9


_SKY_SHADE = 0.2


def render_camera_views(rig: CameraRig, texture, boxes: tuple = ()) -> dict:
    """Synthesize one grayscale image per camera of a textured ground plane.

    Rays that hit a raised box top (checked nearest-first) take the box
    shade; descending rays otherwise sample the ground texture; everything
    else is flat sky shade.
    """
    images = {}
    for cam in rig.cameras:
        intr = cam.intrinsics
        uu, vv = np.meshgrid(np.arange(intr.width, dtype=float), np.arange(intr.height, dtype=float))
        uv = np.stack([uu.ravel(), vv.ravel()], axis=-1)
        from .camera_model import pixels_to_rays

        rays, in_circle = pixels_to_rays(uv, intr)
        rot = cam.extrinsics.rotation()
        center = cam.extrinsics.camera_center()
        d = rays @ rot  # row-vector form of R^T @ ray
        dz = d[:, 2]
        descending = in_circle & (dz < -1e-9)
        with np.errstate(divide="ignore", invalid="ignore"):
            lam_ground = np.where(descending, -center[2] / dz, np.nan)
        gx = center[0] + lam_ground * d[:, 0]
        gy = center[1] + lam_ground * d[:, 1]
        shade = np.full(uv.shape[0], _SKY_SHADE)
        ground_vals = np.where(descending, texture(np.nan_to_num(gx), np.nan_to_num(gy)), _SKY_SHADE)
        shade = np.where(descending, ground_vals, shade)
        for box in boxes:
            with np.errstate(divide="ignore", invalid="ignore"):
                lam_box = (box.height - center[2]) / dz
            bx = center[0] + lam_box * d[:, 0]
            by = center[1] + lam_box * d[:, 1]
            hit = (
                in_circle
                & (dz < -1e-9)
                & (lam_box > 0)
                & (bx >= box.x_min)
                & (bx <= box.x_max)
                & (by >= box.y_min)
                & (by <= box.y_max)
            )
            shade = np.where(hit, box.shade, shade)
        images[cam.id] = shade.reshape(intr.height, intr.width)
    return images
