"""Local HTTP/JSON backend for the interactive clicking workflow.

A session is a directory holding ``rig.json`` (required), ``keypoints.json``
(created on first mutation), optional ``keypoints_eval.json`` for held-out
evaluation, and the frame images referenced by the keypoint file.  Every
mutation is persisted atomically (write-temp-rename) before the response
goes out, and responses carry a revision counter for optimistic
concurrency.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import tempfile
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.responses import FileResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .bev_renderer import BevConfig, render_bev
from .calibration import CalibrationProblem, KeypointPair, SolverConfig, calibrate
from .camera_model import PixelPoint
from .errors import (
    BadInitializationError,
    CalibrationError,
    NoGroundIntersectionError,
    SolverFailureError,
)
from .io_config import KeypointDocument, load_image, load_keypoints, load_rig, save_keypoints, save_rig
from .metrics import mde

logger = logging.getLogger(__name__)


class KeypointIn(BaseModel):
    frame_id: str
    cam_i: str
    cam_j: str
    pixel_i: tuple[float, float]
    pixel_j: tuple[float, float]
    color_tag: str | None = None
    revision: int | None = None


class CalibrateIn(BaseModel):
    max_iterations: int | None = None
    gradient_tolerance: float | None = None
    finite_diff_step: float | None = None
    revision: int | None = None


class Session:
    """Mutable session state; mutations are serialized by ``mutate_lock``."""

    def __init__(self, directory: str):
        self.dir = Path(directory)
        rig_path = self.dir / "rig.json"
        if not rig_path.exists():
            raise FileNotFoundError(f"session directory has no rig.json: {self.dir}")
        self.rig_initial, self.fixed_heights = load_rig(str(rig_path))
        self.keypoints_path = self.dir / "keypoints.json"
        if self.keypoints_path.exists():
            doc = load_keypoints(str(self.keypoints_path))
            self.frames = list(doc.frames)
            pairs = list(doc.keypoints)
        else:
            self.frames = []
            pairs = []
        self.keypoints: dict[int, KeypointPair] = {i: kp for i, kp in enumerate(pairs)}
        self._next_id = len(pairs)
        self.revision = 0
        self.rig_optimized = None
        self.last_result = None
        opt_path = self.dir / "rig_optimized.json"
        if opt_path.exists():
            self.rig_optimized, _ = load_rig(str(opt_path))
        self.mutate_lock = threading.Lock()
        self.solver_busy = threading.Lock()

    @property
    def session_id(self) -> str:
        return self.dir.name

    def frame(self, frame_id: str):
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        return None

    def persist_keypoints(self) -> None:
        doc = KeypointDocument(frames=self.frames, keypoints=list(self.keypoints.values()))
        self._atomic_save(self.keypoints_path, lambda p: save_keypoints(p, doc))

    def persist_optimized(self) -> None:
        self._atomic_save(self.dir / "rig_optimized.json", lambda p: save_rig(p, self.rig_optimized, self.fixed_heights))

    def _atomic_save(self, path: Path, writer) -> None:
        fd, tmp = tempfile.mkstemp(dir=str(self.dir), suffix=".tmp")
        os.close(fd)
        try:
            writer(tmp)
            os.replace(tmp, str(path))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def validate_keypoint(self, body: KeypointIn) -> KeypointPair:
        rig = self.rig_initial
        if self.frame(body.frame_id) is None:
            raise ValueError(f"unknown frame_id {body.frame_id!r}")
        if body.cam_i == body.cam_j:
            raise ValueError("cam_i and cam_j must differ")
        try:
            rig.camera(body.cam_i)
            rig.camera(body.cam_j)
        except KeyError as e:
            raise ValueError(str(e)) from e
        if not rig.is_adjacent(body.cam_i, body.cam_j):
            raise ValueError(f"({body.cam_i}, {body.cam_j}) is not an adjacency pair")
        for cam_id, (u, v) in ((body.cam_i, body.pixel_i), (body.cam_j, body.pixel_j)):
            intr = rig.camera(cam_id).intrinsics
            if not (0.0 <= u <= intr.width - 1 and 0.0 <= v <= intr.height - 1):
                raise ValueError(f"pixel ({u:.2f}, {v:.2f}) outside {cam_id} image bounds")
            if math.hypot(u - intr.u0, v - intr.v0) > intr.r_max:
                raise ValueError(f"pixel ({u:.2f}, {v:.2f}) beyond the image circle of {cam_id}")
        return KeypointPair(
            frame_id=body.frame_id,
            cam_i=body.cam_i,
            cam_j=body.cam_j,
            pixel_i=PixelPoint(body.pixel_i[0], body.pixel_i[1]),
            pixel_j=PixelPoint(body.pixel_j[0], body.pixel_j[1]),
            color_tag=body.color_tag,
        )

    def rig_for(self, which: str):
        if which == "initial":
            return self.rig_initial
        if which == "optimized":
            return self.rig_optimized
        raise ValueError(f"rig must be 'initial' or 'optimized', got {which!r}")


def _kp_payload(kp_id: int, kp: KeypointPair) -> dict:
    return {
        "id": kp_id,
        "frame_id": kp.frame_id,
        "cam_i": kp.cam_i,
        "cam_j": kp.cam_j,
        "pixel_i": [kp.pixel_i.u, kp.pixel_i.v],
        "pixel_j": [kp.pixel_j.u, kp.pixel_j.v],
        "color_tag": kp.color_tag,
    }


def _check_revision(session: Session, revision: int | None) -> None:
    if revision is not None and revision != session.revision:
        raise HTTPException(status_code=409, detail=f"stale revision {revision}, current is {session.revision}")


def create_app(session_dir: str, frontend_dir: str | None = None) -> FastAPI:
    session = Session(session_dir)
    app = FastAPI(title="svcalib annotation service")
    app.state.session = session

    @app.get("/api/session")
    def get_session():
        rig = session.rig_initial
        return {
            "session_id": session.session_id,
            "revision": session.revision,
            "camera_ids": rig.camera_ids,
            "adjacency": [list(p) for p in rig.adjacency],
            "image_sizes": {
                c.id: {"width": c.intrinsics.width, "height": c.intrinsics.height} for c in rig.cameras
            },
            "frames": [{"frame_id": f.frame_id, "cameras": sorted(f.images)} for f in session.frames],
            "has_optimized": session.rig_optimized is not None,
            "n_keypoints": len(session.keypoints),
        }

    @app.get("/api/frames/{frame_id}/images/{cam_id}")
    def get_frame_image(frame_id: str, cam_id: str):
        frame = session.frame(frame_id)
        if frame is None:
            raise HTTPException(status_code=404, detail=f"unknown frame {frame_id!r}")
        rel = frame.images.get(cam_id)
        if rel is None:
            raise HTTPException(status_code=404, detail=f"frame {frame_id!r} has no image for camera {cam_id!r}")
        path = session.dir / rel
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"image file missing: {rel}")
        media = "image/png" if path.suffix.lower() == ".png" else "image/jpeg"
        return FileResponse(str(path), media_type=media)

    @app.get("/api/keypoints")
    def list_keypoints():
        return {
            "revision": session.revision,
            "keypoints": [_kp_payload(i, kp) for i, kp in sorted(session.keypoints.items())],
        }

    @app.post("/api/keypoints")
    def add_keypoint(body: KeypointIn):
        with session.mutate_lock:
            _check_revision(session, body.revision)
            try:
                kp = session.validate_keypoint(body)
            except ValueError as e:
                raise HTTPException(status_code=400, detail=str(e))
            kp_id = session._next_id
            session._next_id += 1
            session.keypoints[kp_id] = kp
            session.persist_keypoints()
            session.revision += 1
            return {"id": kp_id, "revision": session.revision, "keypoint": _kp_payload(kp_id, kp)}

    @app.delete("/api/keypoints/{kp_id}")
    def delete_keypoint(kp_id: int, revision: int | None = None):
        with session.mutate_lock:
            _check_revision(session, revision)
            if kp_id not in session.keypoints:
                raise HTTPException(status_code=404, detail=f"unknown keypoint id {kp_id}")
            del session.keypoints[kp_id]
            session.persist_keypoints()
            session.revision += 1
            return {"revision": session.revision}

    @app.post("/api/calibrate")
    def run_calibrate(body: CalibrateIn):
        if not session.solver_busy.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="a calibration is already running")
        try:
            with session.mutate_lock:
                _check_revision(session, body.revision)
                pairs = list(session.keypoints.values())
            defaults = SolverConfig()
            solver = SolverConfig(
                max_iterations=body.max_iterations or defaults.max_iterations,
                gradient_tolerance=body.gradient_tolerance or defaults.gradient_tolerance,
                finite_diff_step=body.finite_diff_step or defaults.finite_diff_step,
            )
            try:
                problem = CalibrationProblem(
                    rig_initial=session.rig_initial,
                    keypoints=pairs,
                    fixed_heights=session.fixed_heights,
                    solver=solver,
                )
            except ValueError as e:
                raise HTTPException(status_code=422, detail=str(e))
            try:
                result = calibrate(problem)
            except BadInitializationError as e:
                raise HTTPException(status_code=422, detail=str(e))
            except (SolverFailureError, CalibrationError) as e:
                raise HTTPException(status_code=500, detail=f"solver failure: {e}")
            with session.mutate_lock:
                session.rig_optimized = result.rig_optimized
                session.last_result = result
                session.persist_optimized()
                session.revision += 1
                kp_ids = sorted(session.keypoints)
            return {
                "revision": session.revision,
                "objective_initial": result.objective_initial,
                "objective_final": result.objective_final,
                "iterations": result.iterations,
                "converged": result.converged,
                "per_keypoint": [
                    {"id": kp_id, "error_m": err}
                    for kp_id, err in zip(kp_ids, result.per_keypoint_errors)
                ],
            }
        finally:
            session.solver_busy.release()

    @app.get("/api/bev")
    def get_bev(
        rig: str = "initial",
        extent: float = 25.0,
        ppm: float = 20.0,
        frame_id: str | None = None,
    ):
        try:
            the_rig = session.rig_for(rig)
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))
        if the_rig is None:
            raise HTTPException(status_code=404, detail="no optimized rig yet; run /api/calibrate first")
        frame = session.frame(frame_id) if frame_id else next(
            (f for f in session.frames if set(f.images) >= set(the_rig.camera_ids)), None
        )
        if frame is None:
            raise HTTPException(status_code=404, detail="no frame with images for all cameras")
        images = {}
        for cam_id in the_rig.camera_ids:
            rel = frame.images.get(cam_id)
            if rel is None or not (session.dir / rel).exists():
                raise HTTPException(status_code=404, detail=f"frame {frame.frame_id!r} lacks an image for {cam_id}")
            images[cam_id] = load_image(str(session.dir / rel), grayscale=False)
        try:
            bev = render_bev(images, the_rig, BevConfig(extent=extent, resolution=ppm))
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))
        from PIL import Image

        data = np.clip(bev.composite, 0.0, 1.0)
        if data.ndim == 2:
            data = np.repeat(data[..., None], 3, axis=-1)
        png = io.BytesIO()
        Image.fromarray((data * 255.0 + 0.5).astype(np.uint8)).save(png, format="PNG")
        return Response(content=png.getvalue(), media_type="image/png")

    @app.get("/api/mde")
    def get_mde(rig: str = "initial", eval_set: str = "all"):
        try:
            the_rig = session.rig_for(rig)
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))
        if the_rig is None:
            raise HTTPException(status_code=404, detail="no optimized rig yet; run /api/calibrate first")
        if eval_set == "all":
            pairs = list(session.keypoints.values())
        elif eval_set == "holdout":
            holdout_path = session.dir / "keypoints_eval.json"
            if not holdout_path.exists():
                raise HTTPException(status_code=404, detail="session has no keypoints_eval.json")
            pairs = load_keypoints(str(holdout_path)).keypoints
        else:
            raise HTTPException(status_code=400, detail=f"eval_set must be 'all' or 'holdout', got {eval_set!r}")
        if not pairs:
            raise HTTPException(status_code=422, detail="no keypoints to evaluate")
        try:
            report = mde(pairs, the_rig)
        except NoGroundIntersectionError as e:
            raise HTTPException(status_code=422, detail=f"keypoint not feasible under this rig: {e}")
        return {"rig": rig, "eval_set": eval_set, **report.as_dict()}

    if frontend_dir is not None and Path(frontend_dir).exists():
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="frontend")

    return app
