"""Bird's-eye-view rendering by flat-world reprojection of camera images.

Every BEV raster pixel corresponds to a ground point; each camera image is
sampled bilinearly where that point projects inside its field of view.
Overlaying the per-camera layers makes misalignment visible as ghosting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .rig_geometry import CameraRig, GroundPoint, ground_to_pixels_array

logger = logging.getLogger(__name__)

BLEND_MODES = ("overlay-average", "per-camera-layers")


@dataclass(frozen=True)
class BevConfig:
    """Metric extent (meters per side, centered on the vehicle) and density."""

    extent: float = 25.0
    resolution: float = 20.0  # pixels per meter
    blend: str = "overlay-average"

    def __post_init__(self):
        if self.extent <= 0.0:
            raise ValueError(f"extent must be positive, got {self.extent}")
        if self.resolution <= 0.0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if self.blend not in BLEND_MODES:
            raise ValueError(f"blend must be one of {BLEND_MODES}, got {self.blend!r}")

    @property
    def size(self) -> int:
        """Raster side length; both extent corners land exactly on pixel centers."""
        return int(round(self.extent * self.resolution)) + 1


@dataclass(frozen=True, eq=False)
class BevLayer:
    """One camera's ground projection: [0,1] raster plus validity mask."""

    image: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True, eq=False)
class BevImage:
    layers: dict
    composite: np.ndarray | None
    meters_per_pixel: float
    config: BevConfig


def bev_pixel_to_ground(px, cfg: BevConfig) -> GroundPoint:
    """Raster (row, col) index to vehicle-frame ground point.

    Row 0 is at +X (vehicle forward up), column 0 at +Y (vehicle left at
    the image's left edge); the mapping is affine and invertible.
    """
    row, col = float(px[0]), float(px[1])
    half = 0.5 * cfg.extent
    return GroundPoint(half - row / cfg.resolution, half - col / cfg.resolution)


def ground_to_bev_pixel(g: GroundPoint, cfg: BevConfig) -> tuple[float, float]:
    """Inverse of bev_pixel_to_ground; indices may fall outside the raster."""
    half = 0.5 * cfg.extent
    return ((half - g.x) * cfg.resolution, (half - g.y) * cfg.resolution)


def bilinear_sample(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample ``image`` at continuous (u, v) positions, u along columns.

    Caller guarantees 0 <= u <= W-1 and 0 <= v <= H-1; exact integer
    coordinates return the source pixel value exactly.
    """
    h, w = image.shape[:2]
    u = uv[..., 0]
    v = uv[..., 1]
    x0 = np.clip(np.floor(u).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(v).astype(int), 0, h - 2)
    fx = u - x0
    fy = v - y0
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = image[y0, x0] * (1.0 - fx) + image[y0, x0 + 1] * fx
    bottom = image[y0 + 1, x0] * (1.0 - fx) + image[y0 + 1, x0 + 1] * fx
    return top * (1.0 - fy) + bottom * fy


def _ground_grid(cfg: BevConfig) -> np.ndarray:
    n = cfg.size
    half = 0.5 * cfg.extent
    coords = half - np.arange(n) / cfg.resolution
    gx, gy = np.meshgrid(coords, coords, indexing="ij")  # gx varies along rows
    return np.stack([gx, gy], axis=-1)


def render_bev(images: dict, rig: CameraRig, cfg: BevConfig | None = None) -> BevImage:
    """Project each camera image onto the ground and blend the overlap.

    ``images`` maps camera id to a [0,1] float raster (HxW gray or HxWx3
    RGB) matching that camera's intrinsic dimensions.  The composite is the
    per-pixel mean of valid layers (absent in per-camera-layers mode).
    """
    if cfg is None:
        cfg = BevConfig()
    for cam in rig.cameras:
        if cam.id not in images:
            raise ValueError(f"missing source image for camera {cam.id!r}")
        img = images[cam.id]
        intr = cam.intrinsics
        if img.shape[0] != intr.height or img.shape[1] != intr.width:
            raise ValueError(
                f"camera {cam.id!r} image is {img.shape[1]}x{img.shape[0]}, "
                f"intrinsics expect {intr.width}x{intr.height}"
            )
    rgb = any(images[c.id].ndim == 3 for c in rig.cameras)
    ground = _ground_grid(cfg)
    flat = ground.reshape(-1, 2)
    n = cfg.size
    layers = {}
    for cam in rig.cameras:
        uv, in_fov = ground_to_pixels_array(flat, cam)
        intr = cam.intrinsics
        in_bounds = (
            (uv[:, 0] >= 0.0)
            & (uv[:, 0] <= intr.width - 1)
            & (uv[:, 1] >= 0.0)
            & (uv[:, 1] <= intr.height - 1)
        )
        valid = in_fov & in_bounds
        src = images[cam.id]
        if rgb and src.ndim == 2:
            src = np.repeat(src[..., None], 3, axis=-1)
        shape = (n, n, 3) if rgb else (n, n)
        layer = np.zeros(shape)
        if valid.any():
            samples = bilinear_sample(src, np.where(valid[:, None], uv, 0.0))
            mask2 = valid.reshape(n, n)
            layer[mask2] = samples.reshape(*shape)[mask2]
        else:
            logger.warning("camera %s projects onto no BEV pixel (degenerate pose?)", cam.id)
        layers[cam.id] = BevLayer(image=layer, mask=valid.reshape(n, n))
    composite = None
    if cfg.blend == "overlay-average":
        stack = np.stack([layers[c.id].image for c in rig.cameras])
        masks = np.stack([layers[c.id].mask for c in rig.cameras])
        counts = masks.sum(axis=0)
        if rgb:
            num = (stack * masks[..., None]).sum(axis=0)
            with np.errstate(invalid="ignore"):
                composite = np.where(counts[..., None] > 0, num / np.maximum(counts, 1)[..., None], 0.0)
        else:
            num = (stack * masks).sum(axis=0)
            composite = np.where(counts > 0, num / np.maximum(counts, 1), 0.0)
        if not masks.any():
            logger.warning("BEV composite is entirely invalid for this rig/config")
    return BevImage(layers=layers, composite=composite, meters_per_pixel=1.0 / cfg.resolution, config=cfg)
