"""Fisheye lens geometry: mapping between image pixels and 3D view rays.

The lens is described by a fourth-order radial polynomial r = f(theta) that
gives the image radius in pixels as a function of the incident angle theta
(radians from the optical axis).  The camera frame has +Z along the optical
axis, +X along image u (rightward) and +Y along image v (downward); pixel
coordinates have their origin at the top-left corner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, OutOfDomainError, OutOfViewError

# Generous half-FOV bound (~103 deg) covering a 190 deg lens plus margin.
DEFAULT_THETA_MAX = 1.8

_MONOTONICITY_SAMPLES = 2048
_NEWTON_TOL = 1e-10
_NEWTON_MAX_ITER = 50


@dataclass(frozen=True)
class FisheyeIntrinsics:
    """Per-camera lens parameters for the polynomial fisheye model.

    The radial mapping f(theta) = a1*theta + a2*theta^2 + a3*theta^3 +
    a4*theta^4 must be strictly increasing on [0, theta_max]; this is
    verified at construction by sampling its derivative on a dense grid.
    Coefficients are in pixels per radian^k, the principal point (u0, v0)
    and image size in pixels.
    """

    a1: float
    a2: float
    a3: float
    a4: float
    u0: float
    v0: float
    width: int
    height: int
    theta_max: float = DEFAULT_THETA_MAX

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0.0 <= self.u0 < self.width and 0.0 <= self.v0 < self.height):
            raise ValueError(f"principal point ({self.u0}, {self.v0}) outside image bounds")
        if self.a1 <= 0.0:
            raise ValueError(f"a1 must be positive, got {self.a1}")
        if self.theta_max <= 0.0:
            raise ValueError(f"theta_max must be positive, got {self.theta_max}")
        theta = np.linspace(0.0, self.theta_max, _MONOTONICITY_SAMPLES)
        deriv = self.a1 + 2.0 * self.a2 * theta + 3.0 * self.a3 * theta**2 + 4.0 * self.a4 * theta**3
        if not np.all(deriv > 0.0):
            raise ValueError(
                "radial polynomial is not strictly increasing on [0, theta_max]; "
                "invalid intrinsics"
            )

    @property
    def r_max(self) -> float:
        """Largest valid image radius, f(theta_max)."""
        return float(_poly(self.theta_max, self))


@dataclass(frozen=True)
class PixelPoint:
    """Continuous pixel coordinate (sub-pixel precision, may lie off-image)."""

    u: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise ValueError(f"pixel coordinates must be finite, got ({self.u}, {self.v})")


@dataclass(frozen=True)
class UnitRay:
    """Direction of an unprojected pixel as a point on the unit sphere."""

    xs: float
    ys: float
    zs: float

    def __post_init__(self):
        n2 = self.xs * self.xs + self.ys * self.ys + self.zs * self.zs
        if abs(n2 - 1.0) > 1e-12:
            raise ValueError(f"ray is not unit-norm: |S|^2 = {n2!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.xs, self.ys, self.zs])


def _poly(theta, intr: FisheyeIntrinsics):
    """Evaluate f(theta); accepts scalars or arrays (Horner form)."""
    return theta * (intr.a1 + theta * (intr.a2 + theta * (intr.a3 + theta * intr.a4)))


def _poly_deriv(theta, intr: FisheyeIntrinsics):
    return intr.a1 + theta * (2.0 * intr.a2 + theta * (3.0 * intr.a3 + theta * (4.0 * intr.a4)))


def forward_polynomial(theta: float, intr: FisheyeIntrinsics) -> float:
    """Image radius in pixels for incident angle ``theta`` (radians)."""
    if theta < 0.0 or theta > intr.theta_max:
        raise OutOfDomainError(f"theta={theta} outside [0, {intr.theta_max}]")
    return float(_poly(theta, intr))


def invert_polynomial(r: float, intr: FisheyeIntrinsics) -> float:
    """Incident angle whose image radius is ``r``, via Newton-Raphson.

    Start at theta0 = r/a1 (a1 dominates near zero), iterate clamped to
    [0, theta_max] until |f(theta) - r| < 1e-10 px.  The monotonicity check
    at intrinsics construction guarantees a unique root.
    """
    if r < 0.0 or r > intr.r_max:
        raise OutOfDomainError(f"radius={r} outside [0, {intr.r_max}]")
    theta = min(max(r / intr.a1, 0.0), intr.theta_max)
    for _ in range(_NEWTON_MAX_ITER):
        resid = _poly(theta, intr) - r
        if abs(resid) < _NEWTON_TOL:
            return float(theta)
        theta = min(max(theta - resid / _poly_deriv(theta, intr), 0.0), intr.theta_max)
    if abs(_poly(theta, intr) - r) < _NEWTON_TOL:
        return float(theta)
    raise ConvergenceError(f"polynomial inversion did not converge for r={r}")


def pixel_to_ray(p: PixelPoint, intr: FisheyeIntrinsics) -> UnitRay:
    """Unproject a pixel to its unit view ray in the camera frame."""
    du = p.u - intr.u0
    dv = p.v - intr.v0
    r = math.hypot(du, dv)
    if r > intr.r_max:
        raise OutOfViewError(f"pixel ({p.u}, {p.v}) at radius {r:.3f} beyond r_max={intr.r_max:.3f}")
    theta = invert_polynomial(r, intr)
    # Two-argument arctangent so all four quadrants resolve; at the
    # principal point (r=0) sin(theta)=0 gives exactly [0, 0, 1].
    alpha = math.atan2(dv, du)
    s = math.sin(theta)
    return UnitRay(s * math.cos(alpha), s * math.sin(alpha), math.cos(theta))


def ray_to_pixel(point, intr: FisheyeIntrinsics) -> PixelPoint:
    """Project a 3D point in the camera frame to a pixel.

    Invariant under positive scaling of the point (depth-independent).
    """
    x, y, z = float(point[0]), float(point[1]), float(point[2])
    rho = math.hypot(x, y)
    if rho == 0.0 and z == 0.0:
        raise ValueError("cannot project the camera center")
    theta = math.atan2(rho, z)
    if theta > intr.theta_max:
        raise OutOfViewError(f"point at incident angle {theta:.4f} rad beyond theta_max={intr.theta_max}")
    rr = _poly(theta, intr)
    alpha = math.atan2(y, x)
    return PixelPoint(intr.u0 + rr * math.cos(alpha), intr.v0 + rr * math.sin(alpha))


# Array variants used by the renderer, the synthetic generator and the
# calibration objective.  They return validity masks instead of raising.

def invert_polynomial_array(r: np.ndarray, intr: FisheyeIntrinsics) -> np.ndarray:
    """Vectorized Newton-Raphson inversion; caller ensures r in [0, r_max]."""
    r = np.asarray(r, dtype=float)
    theta = np.clip(r / intr.a1, 0.0, intr.theta_max)
    for _ in range(_NEWTON_MAX_ITER):
        resid = _poly(theta, intr) - r
        if np.all(np.abs(resid) < _NEWTON_TOL):
            return theta
        theta = np.clip(theta - resid / _poly_deriv(theta, intr), 0.0, intr.theta_max)
    if np.all(np.abs(_poly(theta, intr) - r) < _NEWTON_TOL):
        return theta
    raise ConvergenceError("vectorized polynomial inversion did not converge")


def pixels_to_rays(uv: np.ndarray, intr: FisheyeIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Unproject an (n, 2) pixel array; returns (n, 3) rays and a validity mask."""
    uv = np.asarray(uv, dtype=float)
    du = uv[..., 0] - intr.u0
    dv = uv[..., 1] - intr.v0
    r = np.hypot(du, dv)
    valid = r <= intr.r_max
    theta = invert_polynomial_array(np.where(valid, r, 0.0), intr)
    alpha = np.arctan2(dv, du)
    s = np.sin(theta)
    rays = np.stack([s * np.cos(alpha), s * np.sin(alpha), np.cos(theta)], axis=-1)
    return rays, valid


def rays_to_pixels(points: np.ndarray, intr: FisheyeIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project an (n, 3) array of camera-frame points; returns pixels and mask."""
    points = np.asarray(points, dtype=float)
    rho = np.hypot(points[..., 0], points[..., 1])
    theta = np.arctan2(rho, points[..., 2])
    valid = (theta <= intr.theta_max) & ((rho > 0.0) | (points[..., 2] != 0.0))
    rr = _poly(np.where(valid, theta, 0.0), intr)
    alpha = np.arctan2(points[..., 1], points[..., 0])
    uv = np.stack([intr.u0 + rr * np.cos(alpha), intr.v0 + rr * np.sin(alpha)], axis=-1)
    return uv, valid
