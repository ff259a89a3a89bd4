"""Batch command-line entry points for the full workflow.

Exit codes: 0 success, 1 solver/metric failure, 2 usage or I/O error.
Log verbosity comes from the SVCALIB_LOG environment variable
(DEBUG/INFO/WARNING/ERROR, default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import synthetic
from .bev_renderer import BevConfig, render_bev
from .calibration import CalibrationProblem, SolverConfig, calibrate
from .errors import (
    BadInitializationError,
    CalibrationError,
    GeometryError,
    SchemaError,
    SolverFailureError,
    UndefinedMetricError,
)
from .io_config import (
    FrameRef,
    KeypointDocument,
    load_image,
    load_keypoints,
    load_rig,
    save_image,
    save_keypoints,
    save_rig,
)
from .metrics import mde

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _parse_range(text: str) -> tuple[float, float]:
    lo, _, hi = text.partition(":")
    return float(lo), float(hi)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svcalib", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="optimize camera poses from clicked keypoints")
    p.add_argument("--rig", required=True, help="initial rig JSON file")
    p.add_argument("--keypoints", required=True, help="keypoint JSON file")
    p.add_argument("--out", required=True, help="where to write the optimized rig JSON")
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--report", action="store_true", help="print per-keypoint errors")
    p.add_argument("--json", action="store_true", help="machine-readable summary on stdout")

    p = sub.add_parser("evaluate", help="mean distance error of a rig over evaluation keypoints")
    p.add_argument("--rig", required=True)
    p.add_argument("--keypoints", required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("render-bev", help="render the ground-projected bird's-eye view")
    p.add_argument("--rig", required=True)
    p.add_argument("--images", required=True, help="directory with one <camera_id>.png/.jpg per camera")
    p.add_argument("--extent", type=float, default=25.0)
    p.add_argument("--ppm", type=float, default=20.0)
    p.add_argument("--out", required=True, help="composite PNG path")
    p.add_argument("--layers", action="store_true", help="also write per-camera layers")
    p.add_argument("--npy", action="store_true", help="also write lossless float rasters (.npy)")

    p = sub.add_parser("synth", help="generate a ground-truth rig, keypoints and sidecar")
    p.add_argument("--spec", default=None, help="optional rig spec JSON (defaults otherwise)")
    p.add_argument("--n-per-zone", type=int, default=12)
    p.add_argument("--range", default="2:15", help="keypoint XY range in meters, min:max")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=1, help="number of calibration frames")
    p.add_argument("--noise-px", type=float, default=0.0, help="Gaussian pixel noise sigma")
    p.add_argument("--perturb", default="0.1:2", help="initial-rig perturbation, meters:degrees")
    p.add_argument("--images", action="store_true", help="render procedural camera images per frame")
    p.add_argument("--session", action="store_true", help="also write session files (rig.json, keypoints.json)")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("simulate-roughness", help="uneven-ground robustness experiment")
    p.add_argument("--mode", choices=["slope", "random", "both"], default="both")
    p.add_argument("--delta-z", type=float, default=None, help="max height deviation (default range*iri/1000)")
    p.add_argument("--iri", type=float, default=6.0)
    p.add_argument("--slope-range", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=1, help="seeds seed..seed+runs-1")
    p.add_argument("--n-per-zone", type=int, default=12)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("serve", help="start the annotation HTTP service")
    p.add_argument("--session", required=True, help="session directory (rig.json + images)")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--frontend", default=None, help="directory with the built web UI to serve at /")

    return parser


def _cmd_calibrate(args) -> int:
    rig, heights = load_rig(args.rig)
    doc = load_keypoints(args.keypoints)
    solver = SolverConfig(max_iterations=args.max_iter) if args.max_iter else SolverConfig()
    problem = CalibrationProblem(rig_initial=rig, keypoints=doc.keypoints, fixed_heights=heights, solver=solver)
    result = calibrate(problem)
    save_rig(args.out, result.rig_optimized, heights)
    summary = {
        "objective_initial": result.objective_initial,
        "objective_final": result.objective_final,
        "iterations": result.iterations,
        "converged": result.converged,
        "n_keypoints": len(doc.keypoints),
        "out": args.out,
    }
    if args.json:
        print(json.dumps(summary))
    else:
        print(
            f"J: {result.objective_initial:.6f} m -> {result.objective_final:.6g} m "
            f"in {result.iterations} iterations (converged={result.converged})"
        )
        print(f"optimized rig written to {args.out}")
        if args.report:
            for i, err in enumerate(result.per_keypoint_errors):
                kp = doc.keypoints[i]
                print(f"  kp {i:3d} {kp.cam_i}-{kp.cam_j} {kp.frame_id}: {err:.6f} m")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    rig, _ = load_rig(args.rig)
    doc = load_keypoints(args.keypoints)
    report = mde(doc.keypoints, rig)
    if args.json:
        print(json.dumps(report.as_dict()))
    else:
        print(report.as_table())
        print(f"({report.n_keypoints} keypoints)")
    return EXIT_OK


def _cmd_render_bev(args) -> int:
    rig, _ = load_rig(args.rig)
    images = {}
    for cam in rig.cameras:
        candidates = [Path(args.images) / f"{cam.id}{ext}" for ext in (".png", ".jpg", ".jpeg")]
        path = next((c for c in candidates if c.exists()), None)
        if path is None:
            raise FileNotFoundError(f"no image for camera {cam.id!r} in {args.images}")
        images[cam.id] = load_image(str(path))
    bev = render_bev(images, rig, BevConfig(extent=args.extent, resolution=args.ppm))
    save_image(args.out, bev.composite)
    print(f"composite written to {args.out}")
    stem = Path(args.out).with_suffix("")
    if args.npy:
        np.save(f"{stem}.npy", bev.composite)
    if args.layers:
        for cam_id, layer in bev.layers.items():
            save_image(f"{stem}_{cam_id}.png", layer.image)
            if args.npy:
                np.save(f"{stem}_{cam_id}.npy", layer.image)
                np.save(f"{stem}_{cam_id}_mask.npy", layer.mask)
        print(f"layers written next to {args.out}")
    return EXIT_OK


def _load_rig_spec(path: str | None) -> synthetic.SyntheticRigSpec:
    if path is None:
        return synthetic.SyntheticRigSpec()
    with open(path) as f:
        doc = json.load(f)
    placements = dict(synthetic.DEFAULT_PLACEMENTS)
    for cam_id, entry in doc.get("cameras", {}).items():
        placements[cam_id] = synthetic.CameraPlacement(
            center=tuple(entry["center"]),
            yaw_deg=float(entry.get("yaw_deg", placements[cam_id].yaw_deg)),
            pitch_deg=float(entry.get("pitch_deg", placements[cam_id].pitch_deg)),
        )
    intr = synthetic.DEFAULT_INTRINSICS
    if "intrinsics" in doc:
        from .camera_model import FisheyeIntrinsics

        intr = FisheyeIntrinsics(**doc["intrinsics"])
    return synthetic.SyntheticRigSpec(placements=placements, intrinsics=intr, seed=int(doc.get("seed", 0)))


def _cmd_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = _load_rig_spec(args.spec)
    rig = synthetic.make_rig(spec)
    heights = synthetic.fixed_heights_of(rig)
    min_range, max_range = _parse_range(args.range)
    tmag, rmag = _parse_range(args.perturb)

    frames = []
    all_pairs = []
    sidecar_points = []
    texture = synthetic.smooth_noise_texture(seed=args.seed)
    for f in range(args.frames):
        frame_id = f"frame_{f:03d}"
        pairs, gt = synthetic.generate_keypoints(
            rig, args.n_per_zone, min_range, max_range, seed=args.seed + 7919 * f, frame_id=frame_id
        )
        if args.noise_px > 0:
            pairs = synthetic.add_pixel_noise(pairs, args.noise_px, seed=args.seed + 31 * f + 1)
        images = {}
        if args.images:
            rendered = synthetic.render_camera_views(rig, texture)
            img_dir = out / "images" / frame_id
            img_dir.mkdir(parents=True, exist_ok=True)
            for cam_id, img in rendered.items():
                rel = f"images/{frame_id}/{cam_id}.png"
                save_image(str(out / rel), img)
                images[cam_id] = rel
        frames.append(FrameRef(frame_id=frame_id, images=images))
        all_pairs.extend(pairs)
        sidecar_points.extend(
            {"frame_id": frame_id, "cam_i": kp.cam_i, "cam_j": kp.cam_j, "ground_xy": [float(p[0]), float(p[1])]}
            for kp, p in zip(pairs, gt)
        )

    eval_pairs, eval_gt = synthetic.generate_keypoints(
        rig, 10, min_range, max_range, seed=args.seed + 104729, frame_id="frame_eval"
    )
    init = synthetic.perturb_rig(rig, tmag, rmag, seed=args.seed + 65537)

    save_rig(str(out / "rig_gt.json"), rig, heights)
    save_rig(str(out / "rig_init.json"), init, heights)
    save_keypoints(str(out / "keypoints_calib.json"), KeypointDocument(frames=frames, keypoints=all_pairs))
    save_keypoints(
        str(out / "keypoints_eval.json"),
        KeypointDocument(frames=[FrameRef(frame_id="frame_eval")], keypoints=eval_pairs),
    )
    with open(out / "gt_sidecar.json", "w") as f:
        json.dump(
            {
                "version": 1,
                "rig_file": "rig_gt.json",
                "points": sidecar_points,
                "eval_points": [
                    {"cam_i": kp.cam_i, "cam_j": kp.cam_j, "ground_xy": [float(p[0]), float(p[1])]}
                    for kp, p in zip(eval_pairs, eval_gt)
                ],
            },
            f,
            indent=2,
        )
    if args.session:
        save_rig(str(out / "rig.json"), init, heights)
        save_keypoints(str(out / "keypoints.json"), KeypointDocument(frames=frames, keypoints=[]))
    print(f"synthetic set written to {out} ({len(all_pairs)} keypoints, {args.frames} frame(s))")
    return EXIT_OK


def _format_roughness_table(rows: list) -> str:
    header = (
        f"{'Ground Type':14s}"
        f"{'Δt_x(max/mean)':>18s}{'Δt_y(max/mean)':>18s}"
        f"{'Δroll(max/mean)':>20s}{'Δpitch(max/mean)':>20s}{'Δyaw(max/mean)':>20s}"
        f"{'MDE':>10s}"
    )
    lines = [header]
    for row in rows:
        lines.append(
            f"{row['label']:14s}"
            f"{row['dtx']['max']:>8.3f}m /{row['dtx']['mean']:.3f}m"
            f"{row['dty']['max']:>8.3f}m /{row['dty']['mean']:.3f}m"
            f"{row['droll']['max']:>9.3f}° /{row['droll']['mean']:.3f}°"
            f"{row['dpitch']['max']:>9.3f}° /{row['dpitch']['mean']:.3f}°"
            f"{row['dyaw']['max']:>9.3f}° /{row['dyaw']['mean']:.3f}°"
            f"{row['mde']:>9.3f}m"
        )
    return "\n".join(lines)


def run_roughness_rows(mode: str, delta_z: float | None, seed: int, runs: int,
                       iri: float = 6.0, slope_range: float = 20.0, n_per_zone: int = 12) -> list:
    """Aggregate roughness runs into Table-style rows (one per ground type)."""
    if delta_z is None:
        delta_z = synthetic.iri_height_bound(slope_range, iri)
    modes = ["slope", "random"] if mode == "both" else [mode]
    rows = []
    for m in modes:
        agg = {q: {"max": 0.0, "means": []} for q in synthetic.PoseErrorReport.QUANTITIES}
        mdes = []
        for r in range(runs):
            out = synthetic.run_roughness_experiment(
                m, delta_z, seed=seed + r, slope_range=slope_range, n_per_zone=n_per_zone
            )
            report = out["pose_error"].aggregate()
            for q in agg:
                agg[q]["max"] = max(agg[q]["max"], report[q]["max"])
                agg[q]["means"].append(report[q]["mean"])
            mdes.append(out["mde_total"])
        label = "No noise" if delta_z == 0.0 else f"{m.capitalize()} noise"
        rows.append(
            {
                "label": label,
                "mode": m,
                "delta_z": delta_z,
                "runs": runs,
                "mde": float(np.mean(mdes)),
                **{q: {"max": agg[q]["max"], "mean": float(np.mean(agg[q]["means"]))} for q in agg},
            }
        )
    return rows


def _cmd_simulate_roughness(args) -> int:
    rows = run_roughness_rows(
        args.mode, args.delta_z, args.seed, args.runs,
        iri=args.iri, slope_range=args.slope_range, n_per_zone=args.n_per_zone,
    )
    if args.json:
        print(json.dumps(rows))
    else:
        print(_format_roughness_table(rows))
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.session, frontend_dir=args.frontend)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


_COMMANDS = {
    "calibrate": _cmd_calibrate,
    "evaluate": _cmd_evaluate,
    "render-bev": _cmd_render_bev,
    "synth": _cmd_synth,
    "simulate-roughness": _cmd_simulate_roughness,
    "serve": _cmd_serve,
}


def main(argv: list | None = None) -> int:
    logging.basicConfig(level=os.environ.get("SVCALIB_LOG", "WARNING").upper())
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverFailureError, BadInitializationError, UndefinedMetricError, GeometryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except (CalibrationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
