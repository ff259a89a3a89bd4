"""Stable JSON file formats for rigs and keypoints, plus image loading.

Two document types, both versioned:

Rig file::

    {"version": 1,
     "cameras": [{"id": "front",
                  "intrinsics": {"a1":..., "a2":..., "a3":..., "a4":...,
                                 "u0":..., "v0":..., "width":..., "height":...,
                                 "theta_max":...},
                  "extrinsics": {"quaternion": [w, x, y, z],
                                 "translation": [tx, ty, tz]},
                  "fixed_height": 0.7}, ...],
     "adjacency": [["front", "left"], ...]}

Keypoint file::

    {"version": 1,
     "frames": [{"frame_id": "f0", "images": {"front": "images/f0/front.png", ...}}],
     "keypoints": [{"frame_id": "f0", "cam_i": "front", "cam_j": "left",
                    "pixel_i": [u, v], "pixel_j": [u, v], "color_tag": "red"}]}

Floats survive a save/load round trip bit-exactly (shortest-repr JSON
encoding).  Unknown fields raise in strict mode and warn otherwise.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .calibration import KeypointPair
from .camera_model import FisheyeIntrinsics, PixelPoint
from .errors import SchemaError, VersionError
from .rig_geometry import Camera, CameraRig, Extrinsics, Quaternion

logger = logging.getLogger(__name__)

RIG_FILE_VERSION = 1
KEYPOINT_FILE_VERSION = 1

_INTRINSIC_FIELDS = ("a1", "a2", "a3", "a4", "u0", "v0", "width", "height", "theta_max")


@dataclass(frozen=True, eq=False)
class FrameRef:
    """One capture instant: frame id plus per-camera image paths (may be empty)."""

    frame_id: str
    images: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class KeypointDocument:
    frames: list
    keypoints: list

    def frame_ids(self) -> list:
        return [f.frame_id for f in self.frames]


def _expect(obj, typ, path: str):
    if not isinstance(obj, typ):
        name = typ.__name__ if not isinstance(typ, tuple) else "/".join(t.__name__ for t in typ)
        raise SchemaError(path, f"expected {name}, got {type(obj).__name__}")
    return obj


def _get(obj: dict, key: str, typ, path: str):
    if key not in obj:
        raise SchemaError(f"{path}.{key}", "missing required field")
    return _expect(obj[key], typ, f"{path}.{key}")


def _check_unknown(obj: dict, allowed: tuple, path: str, strict: bool):
    for key in obj:
        if key not in allowed:
            if strict:
                raise SchemaError(f"{path}.{key}", "unknown field (strict mode)")
            logger.warning("%s.%s: ignoring unknown field", path, key)


def _check_version(doc: dict, expected: int, path: str):
    version = _get(doc, "version", int, path)
    if version != expected:
        raise VersionError(f"{path}.version", f"unsupported version {version}, expected {expected}")


def _vector(obj, length: int, path: str) -> list:
    _expect(obj, list, path)
    if len(obj) != length:
        raise SchemaError(path, f"expected {length} numbers, got {len(obj)}")
    for i, v in enumerate(obj):
        _expect(v, (int, float), f"{path}[{i}]")
    return [float(v) for v in obj]


def load_rig(path: str, strict: bool = False) -> tuple[CameraRig, dict]:
    """Read a rig file; returns the rig and its fixed-height dict."""
    with open(path) as f:
        doc = json.load(f)
    _expect(doc, dict, "$")
    _check_version(doc, RIG_FILE_VERSION, "$")
    _check_unknown(doc, ("version", "cameras", "adjacency"), "$", strict)
    cams_doc = _get(doc, "cameras", list, "$")
    cameras = []
    heights = {}
    for i, cam_doc in enumerate(cams_doc):
        p = f"$.cameras[{i}]"
        _expect(cam_doc, dict, p)
        _check_unknown(cam_doc, ("id", "intrinsics", "extrinsics", "fixed_height"), p, strict)
        cam_id = _get(cam_doc, "id", str, p)
        intr_doc = _get(cam_doc, "intrinsics", dict, p)
        _check_unknown(intr_doc, _INTRINSIC_FIELDS, f"{p}.intrinsics", strict)
        kwargs = {}
        for name in _INTRINSIC_FIELDS:
            value = _get(intr_doc, name, (int, float), f"{p}.intrinsics")
            kwargs[name] = int(value) if name in ("width", "height") else float(value)
        try:
            intr = FisheyeIntrinsics(**kwargs)
        except ValueError as e:
            raise SchemaError(f"{p}.intrinsics", str(e)) from e
        ext_doc = _get(cam_doc, "extrinsics", dict, p)
        _check_unknown(ext_doc, ("quaternion", "translation"), f"{p}.extrinsics", strict)
        quat = _vector(_get(ext_doc, "quaternion", list, f"{p}.extrinsics"), 4, f"{p}.extrinsics.quaternion")
        trans = _vector(_get(ext_doc, "translation", list, f"{p}.extrinsics"), 3, f"{p}.extrinsics.translation")
        try:
            extr = Extrinsics(q=Quaternion.from_array(quat), t=np.array(trans))
            cameras.append(Camera(id=cam_id, intrinsics=intr, extrinsics=extr))
        except ValueError as e:
            raise SchemaError(p, str(e)) from e
        heights[cam_id] = float(_get(cam_doc, "fixed_height", (int, float), p))
        if heights[cam_id] <= 0.0:
            raise SchemaError(f"{p}.fixed_height", f"must be positive, got {heights[cam_id]}")
    adjacency = []
    adj_doc = _get(doc, "adjacency", list, "$")
    for i, pair in enumerate(adj_doc):
        pair = _vector_str(pair, f"$.adjacency[{i}]")
        adjacency.append(tuple(pair))
    try:
        rig = CameraRig(cameras=tuple(cameras), adjacency=tuple(adjacency))
    except ValueError as e:
        raise SchemaError("$", str(e)) from e
    return rig, heights


def _vector_str(obj, path: str) -> list:
    _expect(obj, list, path)
    if len(obj) != 2:
        raise SchemaError(path, f"expected a pair of camera ids, got {len(obj)} entries")
    for i, v in enumerate(obj):
        _expect(v, str, f"{path}[{i}]")
    return list(obj)


def save_rig(path: str, rig: CameraRig, fixed_heights: dict) -> None:
    doc = {
        "version": RIG_FILE_VERSION,
        "cameras": [
            {
                "id": cam.id,
                "intrinsics": {
                    "a1": cam.intrinsics.a1,
                    "a2": cam.intrinsics.a2,
                    "a3": cam.intrinsics.a3,
                    "a4": cam.intrinsics.a4,
                    "u0": cam.intrinsics.u0,
                    "v0": cam.intrinsics.v0,
                    "width": cam.intrinsics.width,
                    "height": cam.intrinsics.height,
                    "theta_max": cam.intrinsics.theta_max,
                },
                "extrinsics": {
                    "quaternion": list(cam.extrinsics.q.as_array()),
                    "translation": list(cam.extrinsics.t),
                },
                "fixed_height": fixed_heights[cam.id],
            }
            for cam in rig.cameras
        ],
        "adjacency": [list(p) for p in rig.adjacency],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def load_keypoints(path: str, strict: bool = False) -> KeypointDocument:
    with open(path) as f:
        doc = json.load(f)
    _expect(doc, dict, "$")
    _check_version(doc, KEYPOINT_FILE_VERSION, "$")
    _check_unknown(doc, ("version", "frames", "keypoints"), "$", strict)
    frames = []
    for i, frame_doc in enumerate(_get(doc, "frames", list, "$")):
        p = f"$.frames[{i}]"
        _expect(frame_doc, dict, p)
        _check_unknown(frame_doc, ("frame_id", "images"), p, strict)
        frame_id = _get(frame_doc, "frame_id", str, p)
        images = {}
        if "images" in frame_doc:
            for cam_id, img_path in _expect(frame_doc["images"], dict, f"{p}.images").items():
                images[cam_id] = _expect(img_path, str, f"{p}.images.{cam_id}")
        frames.append(FrameRef(frame_id=frame_id, images=images))
    frame_ids = {f.frame_id for f in frames}
    keypoints = []
    for i, kp_doc in enumerate(_get(doc, "keypoints", list, "$")):
        p = f"$.keypoints[{i}]"
        _expect(kp_doc, dict, p)
        _check_unknown(kp_doc, ("frame_id", "cam_i", "cam_j", "pixel_i", "pixel_j", "color_tag"), p, strict)
        frame_id = _get(kp_doc, "frame_id", str, p)
        if frame_id not in frame_ids:
            raise SchemaError(f"{p}.frame_id", f"references unknown frame {frame_id!r}")
        pix_i = _vector(_get(kp_doc, "pixel_i", list, p), 2, f"{p}.pixel_i")
        pix_j = _vector(_get(kp_doc, "pixel_j", list, p), 2, f"{p}.pixel_j")
        color = kp_doc.get("color_tag")
        if color is not None:
            _expect(color, str, f"{p}.color_tag")
        try:
            keypoints.append(
                KeypointPair(
                    frame_id=frame_id,
                    cam_i=_get(kp_doc, "cam_i", str, p),
                    cam_j=_get(kp_doc, "cam_j", str, p),
                    pixel_i=PixelPoint(pix_i[0], pix_i[1]),
                    pixel_j=PixelPoint(pix_j[0], pix_j[1]),
                    color_tag=color,
                )
            )
        except ValueError as e:
            raise SchemaError(p, str(e)) from e
    return KeypointDocument(frames=frames, keypoints=keypoints)


def save_keypoints(path: str, doc: KeypointDocument) -> None:
    payload = {
        "version": KEYPOINT_FILE_VERSION,
        "frames": [{"frame_id": f.frame_id, "images": dict(f.images)} for f in doc.frames],
        "keypoints": [
            {
                "frame_id": kp.frame_id,
                "cam_i": kp.cam_i,
                "cam_j": kp.cam_j,
                "pixel_i": [kp.pixel_i.u, kp.pixel_i.v],
                "pixel_j": [kp.pixel_j.u, kp.pixel_j.v],
                **({"color_tag": kp.color_tag} if kp.color_tag is not None else {}),
            }
            for kp in doc.keypoints
        ],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def load_image(path: str, grayscale: bool = False) -> np.ndarray:
    """Load an 8- or 16-bit PNG/JPEG as a [0, 1] float array (HxW or HxWx3)."""
    try:
        img = Image.open(path)
    except FileNotFoundError:
        raise
    except OSError as e:
        raise OSError(f"cannot read image {path}: {e}") from e
    if img.mode in ("I", "I;16", "I;16B"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
    elif img.mode == "L":
        arr = np.asarray(img, dtype=np.float64) / 255.0
    else:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    if grayscale and arr.ndim == 3:
        arr = arr @ np.array([0.299, 0.587, 0.114])
    return arr


def save_image(path: str, image: np.ndarray) -> None:
    """Write a [0, 1] float raster as an 8-bit PNG/JPEG."""
    data = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((data * 255.0 + 0.5).astype(np.uint8)).save(path)
