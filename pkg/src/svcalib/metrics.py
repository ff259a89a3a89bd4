"""Calibration quality metrics: binned mean distance error and BEV photometric error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import reprojection_error
from .errors import UndefinedMetricError
from .rig_geometry import CameraRig, pixel_to_ground

DISTANCE_BINS = ("0-5m", "5-10m", ">10m")

# BT.601 luma weights for RGB -> grayscale.
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class MdeReport:
    """Mean reprojection distance error, overall and per distance bin.

    Bins without any keypoint are absent from ``per_bin`` rather than zero.
    """

    per_bin: dict
    total: float
    n_keypoints: int

    def as_dict(self) -> dict:
        return {
            "per_bin": {k: v for k, v in self.per_bin.items()},
            "total": self.total,
            "n_keypoints": self.n_keypoints,
        }

    def as_table(self) -> str:
        cells = [f"{self.per_bin[b]:.4f}" if b in self.per_bin else "-" for b in DISTANCE_BINS]
        header = f"{'':12s}" + "".join(f"{b:>10s}" for b in DISTANCE_BINS) + f"{'Total':>10s}"
        row = f"{'MDE (m)':12s}" + "".join(f"{c:>10s}" for c in cells) + f"{self.total:>10.4f}"
        return header + "\n" + row


def _bin_label(distance: float) -> str:
    if distance < 5.0:
        return "0-5m"
    if distance < 10.0:
        return "5-10m"
    return ">10m"


def mde(eval_keypoints: list, rig: CameraRig) -> MdeReport:
    """Mean distance error of ``rig`` over an evaluation keypoint set.

    Each keypoint contributes the ground-plane distance between the two
    cameras' reprojections; its distance bin is chosen by the XY range of
    the midpoint of those two reprojections from the vehicle origin.
    """
    if not eval_keypoints:
        raise ValueError("evaluation keypoint set is empty")
    binned: dict[str, list] = {}
    errors = []
    for kp in eval_keypoints:
        g_i = pixel_to_ground(kp.pixel_i, rig.camera(kp.cam_i)).point
        g_j = pixel_to_ground(kp.pixel_j, rig.camera(kp.cam_j)).point
        err = reprojection_error(kp, rig)
        mid = 0.5 * (g_i.as_array() + g_j.as_array())
        binned.setdefault(_bin_label(float(np.linalg.norm(mid))), []).append(err)
        errors.append(err)
    per_bin = {label: float(np.mean(v)) for label, v in binned.items()}
    return MdeReport(per_bin=per_bin, total=float(np.mean(errors)), n_keypoints=len(errors))


def photometric_error(layer_i, layer_j) -> tuple[float, int]:
    """RMS grayscale difference over pixels valid in both layers.

    Layers carry a [0, 1] image and a validity mask (any object with
    ``image`` and ``mask`` attributes).  Returns (rms, n_pixels_compared).
    """
    mask = layer_i.mask & layer_j.mask
    n = int(mask.sum())
    if n == 0:
        raise UndefinedMetricError("layers have no overlapping valid pixels")
    a = _to_gray(layer_i.image)[mask]
    b = _to_gray(layer_j.image)[mask]
    return float(np.sqrt(np.mean((a - b) ** 2))), n


def _to_gray(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[-1] == 3:
        return image @ _LUMA
    raise ValueError(f"expected HxW or HxWx3 image, got shape {image.shape}")
