"""Joint pose estimation for the four-camera rig.

The objective is the sum, over all clicked ground correspondences, of the
ground-plane distance between the two cameras' reprojections of the same
point.  Poses are optimized jointly with BFGS over 24 parameters (per
camera: center x, center y and an unconstrained quaternion that is
renormalized on every evaluation); camera heights stay frozen to break the
world-scale ambiguity.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .camera_model import PixelPoint, pixels_to_rays
from .errors import BadInitializationError, SolverFailureError
from .rig_geometry import (
    CameraRig,
    Extrinsics,
    Quaternion,
    EPS_DESCENDING,
    apply_planar_motion,
    pixel_to_ground,
    planar_alignment,
)

logger = logging.getLogger(__name__)

# Distance charged for a keypoint whose ray misses the ground during the
# line search; keeps the objective finite so BFGS can retreat.
INFEASIBLE_PENALTY = 1.0e3

PARAMS_PER_CAMERA = 6  # [cx, cy, qw, qx, qy, qz]

# Accepted decreases below this relative floor terminate the solver; they
# are numerically meaningless polishing.
_STAGNATION_TOL = 1e-14

_WOLFE_C1 = 1e-4
_WOLFE_C2 = 0.9
_LINE_SEARCH_MAX_ITER = 60


@dataclass(frozen=True)
class KeypointPair:
    """One ground point clicked in two adjacent camera images."""

    frame_id: str
    cam_i: str
    cam_j: str
    pixel_i: PixelPoint
    pixel_j: PixelPoint
    color_tag: str | None = None

    def __post_init__(self):
        if self.cam_i == self.cam_j:
            raise ValueError(f"keypoint pair must span two cameras, got {self.cam_i!r} twice")


@dataclass(frozen=True)
class SolverConfig:
    """BFGS settings.

    The objective is a sum of Euclidean norms, so central differences smooth
    it at the scale of the relative step; a coarse step (1e-6 and above)
    stalls orders of magnitude short of the attainable minimum.  1e-10 keeps
    the truncation radius below any precision this problem needs while
    evaluation roundoff (~1e-14 absolute on the objective) stays negligible.
    """

    max_iterations: int = 500
    gradient_tolerance: float = 1e-8
    finite_diff_step: float = 1e-10
    warn_min_keypoints_per_zone: int = 10

    def __post_init__(self):
        for name in ("max_iterations", "gradient_tolerance", "finite_diff_step", "warn_min_keypoints_per_zone"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    """Initial rig, keypoint set and the per-camera fixed heights."""

    rig_initial: CameraRig
    keypoints: list
    fixed_heights: dict
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        rig = self.rig_initial
        for cam in rig.cameras:
            h = self.fixed_heights.get(cam.id)
            if h is None:
                raise ValueError(f"fixed_heights is missing camera {cam.id!r}")
            if h <= 0.0:
                raise ValueError(f"fixed height of camera {cam.id!r} must be positive, got {h}")
        if not self.keypoints:
            raise ValueError("no keypoints given")
        per_zone = {tuple(sorted(pair)): 0 for pair in rig.adjacency}
        for k, kp in enumerate(self.keypoints):
            if not rig.is_adjacent(kp.cam_i, kp.cam_j):
                raise ValueError(f"keypoint {k}: ({kp.cam_i}, {kp.cam_j}) is not an adjacency pair")
            for cam_id, px in ((kp.cam_i, kp.pixel_i), (kp.cam_j, kp.pixel_j)):
                intr = rig.camera(cam_id).intrinsics
                if not (0.0 <= px.u <= intr.width - 1 and 0.0 <= px.v <= intr.height - 1):
                    raise ValueError(
                        f"keypoint {k}: pixel ({px.u:.2f}, {px.v:.2f}) outside {cam_id} image bounds"
                    )
                if math.hypot(px.u - intr.u0, px.v - intr.v0) > intr.r_max:
                    raise ValueError(
                        f"keypoint {k}: pixel ({px.u:.2f}, {px.v:.2f}) beyond the image circle of {cam_id}"
                    )
            per_zone[tuple(sorted((kp.cam_i, kp.cam_j)))] += 1
        for zone, count in per_zone.items():
            if count == 0:
                raise ValueError(f"adjacency pair {zone} has no keypoints")

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoints)

    def keypoints_per_zone(self) -> dict:
        counts = {tuple(sorted(pair)): 0 for pair in self.rig_initial.adjacency}
        for kp in self.keypoints:
            counts[tuple(sorted((kp.cam_i, kp.cam_j)))] += 1
        return counts


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    rig_optimized: CameraRig
    objective_initial: float
    objective_final: float
    iterations: int
    converged: bool
    per_keypoint_errors: list

    def __post_init__(self):
        if self.objective_final > self.objective_initial:
            raise ValueError("objective_final exceeds objective_initial")
        if any(e < 0.0 for e in self.per_keypoint_errors):
            raise ValueError("per-keypoint errors must be nonnegative")
        if abs(self.objective_final - sum(self.per_keypoint_errors)) > 1e-9:
            raise ValueError("objective_final does not decompose into per-keypoint errors")


def encode_params(rig: CameraRig) -> np.ndarray:
    """Flatten a rig into [cx, cy, qw, qx, qy, qz] per camera, rig order."""
    out = np.empty(PARAMS_PER_CAMERA * len(rig.cameras))
    for i, cam in enumerate(rig.cameras):
        center = cam.extrinsics.camera_center()
        out[6 * i : 6 * i + 2] = center[:2]
        out[6 * i + 2 : 6 * i + 6] = cam.extrinsics.q.as_array()
    return out


def decode_params(params: np.ndarray, fixed_heights: dict, template: CameraRig) -> CameraRig:
    """Rebuild a rig from a flat parameter vector.

    Camera-center heights come from ``fixed_heights``, never from the
    vector; quaternions are normalized here.
    """
    params = np.asarray(params, dtype=float)
    expected = PARAMS_PER_CAMERA * len(template.cameras)
    if params.shape != (expected,):
        raise ValueError(f"parameter vector must have shape ({expected},), got {params.shape}")
    extrinsics = {}
    for i, cam in enumerate(template.cameras):
        cx, cy = params[6 * i : 6 * i + 2]
        q = Quaternion.from_array(params[6 * i + 2 : 6 * i + 6])
        center = np.array([cx, cy, fixed_heights[cam.id]])
        extrinsics[cam.id] = Extrinsics.from_center(q, center)
    return template.with_extrinsics(extrinsics)


def reprojection_error(kp: KeypointPair, rig: CameraRig) -> float:
    """Ground-plane distance between the two cameras' reprojections of a pair."""
    g_i = pixel_to_ground(kp.pixel_i, rig.camera(kp.cam_i)).point
    g_j = pixel_to_ground(kp.pixel_j, rig.camera(kp.cam_j)).point
    return math.hypot(g_i.x - g_j.x, g_i.y - g_j.y)


class _ObjectiveEvaluator:
    """Vectorized objective over batches of parameter vectors.

    Pixel unprojections do not depend on the poses, so the unit rays are
    computed once; each evaluation only has to rotate them, intersect with
    the ground plane and sum distances.
    """

    def __init__(self, problem: CalibrationProblem):
        rig = problem.rig_initial
        self.n_cameras = len(rig.cameras)
        self.heights = np.array([problem.fixed_heights[c.id] for c in rig.cameras])
        idx_i, idx_j, rays_i, rays_j = [], [], [], []
        for kp in problem.keypoints:
            idx_i.append(rig.camera_index(kp.cam_i))
            idx_j.append(rig.camera_index(kp.cam_j))
            ri, ok_i = pixels_to_rays(np.array([kp.pixel_i.u, kp.pixel_i.v]), rig.camera(kp.cam_i).intrinsics)
            rj, ok_j = pixels_to_rays(np.array([kp.pixel_j.u, kp.pixel_j.v]), rig.camera(kp.cam_j).intrinsics)
            if not (ok_i and ok_j):
                raise ValueError("keypoint pixel does not unproject; problem validation should have caught this")
            rays_i.append(ri)
            rays_j.append(rj)
        self.idx_i = np.array(idx_i)
        self.idx_j = np.array(idx_j)
        self.rays_i = np.array(rays_i)
        self.rays_j = np.array(rays_j)
        self.n_keypoints = len(problem.keypoints)

    def _decode_batch(self, params: np.ndarray):
        """(B, 6*n_cams) -> rotation matrices (B, n_cams, 3, 3), centers, bad-row mask."""
        B = params.shape[0]
        view = params.reshape(B, self.n_cameras, PARAMS_PER_CAMERA)
        centers = np.empty((B, self.n_cameras, 3))
        centers[..., :2] = view[..., :2]
        centers[..., 2] = self.heights
        q = view[..., 2:6]
        norms = np.linalg.norm(q, axis=-1)
        bad = norms < 1e-8
        q = q / np.where(bad, 1.0, norms)[..., None]
        w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
        rot = np.empty((B, self.n_cameras, 3, 3))
        rot[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
        rot[..., 0, 1] = 2.0 * (x * y - w * z)
        rot[..., 0, 2] = 2.0 * (x * z + w * y)
        rot[..., 1, 0] = 2.0 * (x * y + w * z)
        rot[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
        rot[..., 1, 2] = 2.0 * (y * z - w * x)
        rot[..., 2, 0] = 2.0 * (x * z - w * y)
        rot[..., 2, 1] = 2.0 * (y * z + w * x)
        rot[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
        return rot, centers, bad.any(axis=-1)

    def _ground_hits(self, rot, centers, idx, rays):
        """Reproject one side of every keypoint: (B, n, 2) points + feasibility."""
        r_sel = rot[:, idx]          # (B, n, 3, 3)
        c_sel = centers[:, idx]      # (B, n, 3)
        d = np.einsum("bnji,nj->bni", r_sel, rays)  # R^T @ S
        dz = d[..., 2]
        feasible = dz < -EPS_DESCENDING
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = -c_sel[..., 2] / dz
        feasible &= lam > 0.0
        g = c_sel[..., :2] + lam[..., None] * d[..., :2]
        return g, feasible

    def errors_batch(self, params: np.ndarray) -> np.ndarray:
        """Per-keypoint error (penalty for infeasible ones), shape (B, n)."""
        rot, centers, bad_quat = self._decode_batch(np.asarray(params, dtype=float))
        g_i, feas_i = self._ground_hits(rot, centers, self.idx_i, self.rays_i)
        g_j, feas_j = self._ground_hits(rot, centers, self.idx_j, self.rays_j)
        with np.errstate(invalid="ignore"):
            dist = np.linalg.norm(g_i - g_j, axis=-1)
        errors = np.where(feas_i & feas_j, dist, INFEASIBLE_PENALTY)
        errors[bad_quat] = np.inf
        return errors

    def objective_batch(self, params: np.ndarray) -> np.ndarray:
        return self.errors_batch(params).sum(axis=-1)

    def per_keypoint_errors(self, params: np.ndarray) -> np.ndarray:
        return self.errors_batch(params[None, :])[0]

    def feasible_fraction(self, params: np.ndarray) -> float:
        rot, centers, _ = self._decode_batch(params[None, :])
        _, feas_i = self._ground_hits(rot, centers, self.idx_i, self.rays_i)
        _, feas_j = self._ground_hits(rot, centers, self.idx_j, self.rays_j)
        return float(np.mean(feas_i[0] & feas_j[0]))


def objective(params: np.ndarray, problem: CalibrationProblem) -> float:
    """Total reprojection distance error for a flat parameter vector."""
    params = np.asarray(params, dtype=float)
    expected = PARAMS_PER_CAMERA * len(problem.rig_initial.cameras)
    if params.shape != (expected,):
        raise ValueError(f"parameter vector must have shape ({expected},), got {params.shape}")
    return float(_ObjectiveEvaluator(problem).objective_batch(params[None, :])[0])


def objective_gradient(params: np.ndarray, problem: CalibrationProblem, step: float | None = None) -> np.ndarray:
    """Central-difference gradient with per-parameter step step*max(1, |p|)."""
    ev = _ObjectiveEvaluator(problem)
    if step is None:
        step = problem.solver.finite_diff_step
    return _central_diff_gradient(ev, np.asarray(params, dtype=float), step)


def _central_diff_gradient(ev: _ObjectiveEvaluator, x: np.ndarray, step: float) -> np.ndarray:
    n = x.size
    h = step * np.maximum(1.0, np.abs(x))
    block = np.repeat(x[None, :], 2 * n, axis=0)
    block[np.arange(n), np.arange(n)] += h
    block[n + np.arange(n), np.arange(n)] -= h
    vals = ev.objective_batch(block)
    return (vals[:n] - vals[n:]) / (2.0 * h)


def _wolfe_line_search(fun, grad, x, p, f0, d0):
    """Weak-Wolfe bracketing line search (Armijo c1, curvature c2).

    Returns (t, f_t, g_t) or None when no acceptable step exists.  When the
    curvature condition cannot be met within the budget, the best
    Armijo-satisfying point is returned so progress stays monotone.
    """
    lo, hi = 0.0, math.inf
    t = 1.0
    best = None
    for _ in range(_LINE_SEARCH_MAX_ITER):
        ft = fun(x + t * p)
        if not math.isfinite(ft) or ft > f0 + _WOLFE_C1 * t * d0:
            hi = t
        else:
            gt = grad(x + t * p)
            if gt @ p < _WOLFE_C2 * d0:
                lo = t
                best = (t, ft, gt)
            else:
                return t, ft, gt
        t = 0.5 * (lo + hi) if math.isfinite(hi) else 2.0 * t
    return best


def _minimize_bfgs(fun, grad, x0, gtol, max_iterations, callback=None):
    """BFGS with the standard inverse-Hessian update.

    Stops when the gradient infinity-norm drops below ``gtol``, after
    ``max_iterations``, or when the line search can make no further
    progress.  Returns (x, f, iterations, converged).
    """
    x = np.asarray(x0, dtype=float).copy()
    f = fun(x)
    if not math.isfinite(f):
        raise SolverFailureError(f"objective is non-finite at the initial point (J={f})")
    g = grad(x)
    n = x.size
    identity = np.eye(n)
    h_inv = identity.copy()
    h_is_identity = True
    iterations = 0
    converged = bool(np.max(np.abs(g)) < gtol)
    while not converged and iterations < max_iterations:
        p = -h_inv @ g
        d0 = float(g @ p)
        if d0 >= 0.0:
            h_inv = identity.copy()
            h_is_identity = True
            p = -g
            d0 = float(g @ p)
            if d0 >= 0.0:
                break
        step = _wolfe_line_search(fun, grad, x, p, f, d0)
        if step is None and not h_is_identity:
            # Quasi-Newton metric went stale (common near kinks); restart
            # from steepest descent before giving up.
            h_inv = identity.copy()
            h_is_identity = True
            p = -g
            d0 = float(g @ p)
            if d0 < 0.0:
                step = _wolfe_line_search(fun, grad, x, p, f, d0)
        if step is None:
            break
        t, f_new, g_new = step
        if not math.isfinite(f_new):
            raise SolverFailureError("line search accepted a non-finite objective value")
        s = t * p
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            if h_is_identity:
                # Scale the initial metric to the first curvature estimate.
                h_inv = (sy / float(y @ y)) * identity
                h_is_identity = False
            hy = h_inv @ y
            rho = 1.0 / sy
            h_inv = (
                h_inv
                - rho * (np.outer(s, hy) + np.outer(hy, s))
                + (rho * rho * float(y @ hy) + rho) * np.outer(s, s)
            )
        progress = f - f_new
        x = x + s
        f = f_new
        g = g_new
        iterations += 1
        if callback is not None:
            callback(x.copy())
        converged = bool(np.max(np.abs(g)) < gtol)
        if progress <= _STAGNATION_TOL * max(1.0, abs(f)):
            break
    return x, f, iterations, converged


def calibrate(problem: CalibrationProblem, callback=None) -> CalibrationResult:
    """Minimize the keypoint reprojection objective over all four poses.

    Camera heights are held at ``problem.fixed_heights`` throughout;
    quaternions are renormalized on every evaluation.  The solution is
    re-anchored to the initial rig's ground frame afterwards: a yaw of the
    whole rig about the vehicle origin plus an XY shift moves every
    reprojection rigidly and leaves the objective untouched, so that frame
    can only come from the initial guess.  Deterministic for identical
    inputs.
    """
    cfg = problem.solver
    for zone, count in problem.keypoints_per_zone().items():
        if count < cfg.warn_min_keypoints_per_zone:
            logger.warning(
                "zone %s has only %d keypoints (recommended minimum %d)",
                zone, count, cfg.warn_min_keypoints_per_zone,
            )
    ev = _ObjectiveEvaluator(problem)
    x0 = encode_params(problem.rig_initial)
    feasible = ev.feasible_fraction(x0)
    if feasible < 0.8:
        raise BadInitializationError(
            f"initial rig yields ground intersections for only {feasible:.0%} of keypoints (<80%)"
        )

    def fun(x):
        return float(ev.objective_batch(x[None, :])[0])

    def grad(x):
        return _central_diff_gradient(ev, x, cfg.finite_diff_step)

    x, _, iterations, converged = _minimize_bfgs(
        fun, grad, x0, cfg.gradient_tolerance, cfg.max_iterations, callback=callback
    )
    rig = decode_params(x, problem.fixed_heights, problem.rig_initial)
    yaw, shift = planar_alignment(rig, problem.rig_initial)
    if abs(yaw) > 1e-12 or float(np.max(np.abs(shift))) > 1e-12:
        rig = apply_planar_motion(rig, yaw, shift)
        x = encode_params(rig)
    per_kp0 = ev.per_keypoint_errors(x0)
    per_kp = ev.per_keypoint_errors(x)
    if float(per_kp.sum()) > float(per_kp0.sum()):
        # Line search is monotone so this cannot trigger; belt and braces.
        x, per_kp = x0, per_kp0
        iterations = 0
        rig = decode_params(x, problem.fixed_heights, problem.rig_initial)
    return CalibrationResult(
        rig_optimized=rig,
        objective_initial=float(per_kp0.sum()),
        objective_final=float(per_kp.sum()),
        iterations=iterations,
        converged=converged,
        per_keypoint_errors=[float(e) for e in per_kp],
    )
