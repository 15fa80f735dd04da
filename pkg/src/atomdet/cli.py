"""Command-line pipeline: simulate, calibrate, reconstruct, bench, predict.

Stages compose through files (PGM frames, JSON artifacts, CSV tables) so each
is independently scriptable. Every run drops a manifest JSON next to its
outputs with the fully resolved configuration, enough to re-run the command
bit-identically.

Exit codes: 0 ok, 2 usage/config, 3 window geometry, 4 grid detection,
5 threshold calibration.
"""

from __future__ import annotations

import argparse
import datetime
import glob
import json
import sys
from pathlib import Path

import numpy as np

import atomdet
from atomdet import calibrate as calibmod
from atomdet import core, perf, pgmio, reconstruct, simulate
from atomdet.errors import (
    AtomdetError,
    ConfigError,
    GridDetectFailed,
    NotBimodal,
    WindowOutOfBounds,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_GEOMETRY = 3
EXIT_GRID = 4
EXIT_THRESHOLD = 5


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _write_manifest(path: Path, subcommand: str, config: dict, inputs: list,
                    outputs: list, started: str, seed=None) -> None:
    payload = {
        "subcommand": subcommand,
        "tool_version": atomdet.__version__,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "started_utc": started,
        "finished_utc": _utc_now(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def _manifest_for(out_file: Path) -> Path:
    return out_file.parent / f"{out_file.stem}.manifest.json"


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    started = _utc_now()
    spec = simulate.scene_from_json(args.scene) if args.scene else simulate.default_scene()
    if args.seed is not None:
        spec = simulate.with_seed(spec, args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i in range(args.count):
        image, truth = simulate.sample_image(spec, frame_index=i)
        frame_path = out_dir / f"frame_{i:04d}.pgm"
        truth_path = out_dir / f"truth_{i:04d}.json"
        pgmio.write_pgm(frame_path, image)
        pgmio.write_truth(truth_path, truth)
        outputs.extend([frame_path, truth_path])
    _write_manifest(out_dir / "manifest.json", "simulate",
                    {"scene": simulate.scene_to_dict(spec), "count": args.count},
                    [args.scene] if args.scene else [], outputs, started, seed=spec.seed)
    print(f"wrote {args.count} frames to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    started = _utc_now()
    paths = sorted(glob.glob(args.frames))
    if not paths:
        raise ConfigError(f"frames glob {args.frames!r} matched no files")
    images = [pgmio.read_pgm(p) for p in paths]
    cfg = calibmod.CalibrationConfig(
        rows=args.rows,
        cols=args.cols,
        kernel_size=args.kernel_size,
        min_images=args.min_images,
        occupancy_prefilter=args.occupancy_prefilter,
        threshold_channel=args.threshold_channel,
    )
    try:
        artifact = calibmod.calibrate(images, cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    core.save_artifact(out, artifact, blob_path=args.projector_blob)
    outputs = [out] + ([args.projector_blob] if args.projector_blob else [])
    _write_manifest(_manifest_for(out), "calibrate",
                    {**cfg.__dict__, "frames": args.frames}, paths, outputs, started)
    print(f"calibrated {cfg.rows}x{cfg.cols} grid from {len(images)} frames -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------


def _write_emissions_json(path, em, occ, mode):
    payload = {
        "mode": mode,
        "rows": em.rows,
        "cols": em.cols,
        "raw": em.raw.tolist(),
        "normalized": em.normalized.tolist(),
        "occupancy": occ.occupied.astype(int).tolist(),
    }
    if em.fitted_background is not None:
        payload["fitted_background"] = em.fitted_background
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def _write_matrix_csv(path, matrix):
    with open(path, "w") as fh:
        for row in matrix:
            fh.write(",".join(f"{v:.9g}" for v in row))
            fh.write("\n")


def _write_occupancy_csv(path, occ):
    with open(path, "w") as fh:
        for row in occ.occupied.astype(int):
            fh.write(",".join(str(v) for v in row))
            fh.write("\n")


def _write_occupancy_pgm(path, occ):
    # black = occupied, like a thresholded readout rendering
    px = np.where(occ.occupied, 0, 65535).astype(np.float64)
    pgmio.write_pgm(path, core.Image(px, bit_depth=16))


def cmd_reconstruct(args) -> int:
    started = _utc_now()
    if args.emit_trace and args.mode != "dataflow":
        raise ConfigError("--emit-trace requires --mode dataflow")
    artifact = core.load_artifact(args.calibration)
    image = pgmio.read_pgm(args.image)
    cfg = reconstruct.ReconstructionConfig(
        mode=args.mode,
        subtract_background=not args.no_subtract_background,
        worker_count=args.workers,
    )
    em, traces = reconstruct.reconstruct_frame(image, artifact, cfg)
    occ = reconstruct.threshold(em, artifact)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    outputs = [out]
    if out.suffix.lower() == ".csv":
        _write_matrix_csv(out, em.channel(artifact.threshold_channel))
        occ_csv = out.parent / f"{out.stem}_occupancy.csv"
        _write_occupancy_csv(occ_csv, occ)
        outputs.append(occ_csv)
    else:
        _write_emissions_json(out, em, occ, args.mode)
    occ_pgm = out.parent / f"{out.stem}_occupancy.pgm"
    _write_occupancy_pgm(occ_pgm, occ)
    outputs.append(occ_pgm)
    if args.emit_trace:
        with open(args.emit_trace, "w") as fh:
            json.dump([t.__dict__ for t in traces], fh)
            fh.write("\n")
        outputs.append(args.emit_trace)
    _write_manifest(_manifest_for(out), "reconstruct",
                    {"mode": args.mode, "workers": args.workers,
                     "subtract_background": cfg.subtract_background,
                     "calibration": str(args.calibration), "image": str(args.image)},
                    [args.calibration, args.image], outputs, started)
    print(f"{args.mode}: {int(occ.occupied.sum())}/{occ.occupied.size} sites occupied -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench / predict
# ---------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_bench(args) -> int:
    started = _utc_now()
    sizes = _int_list(args.sizes)
    modes = [m for m in args.modes.split(",") if m]
    for mode in modes:
        if mode not in ("baseline", "optimized", "dataflow"):
            raise ConfigError(f"unknown mode {mode!r}")
    report = perf.run_bench(modes, sizes, trials=args.trials, worker_count=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    _write_manifest(_manifest_for(out), "bench",
                    {"sizes": sizes, "modes": modes, "trials": args.trials,
                     "workers": args.workers, "environment": report.environment},
                    [], [out], started)
    for row in report.rows:
        print(f"{row.size}x{row.size} {row.mode}: {row.mean_s * 1e6:.1f} us "
              f"+/- {row.std_s * 1e6:.1f} us over {row.trials} trials")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = perf.load_latency_model(args.model) if args.model else perf.reference_latency_model()
    seconds = perf.predict_latency(model, args.atoms)
    print(f"{seconds * 1e6:.3f} µs")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atomdet",
        description="Atom-array fluorescence readout: simulate, calibrate, reconstruct, bench, predict.",
    )
    parser.add_argument("--version", action="version", version=f"atomdet {atomdet.__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("simulate", help="render synthetic frames plus ground-truth sidecars")
    p.add_argument("--scene", help="SceneSpec JSON (omit for the built-in 10x10 default)")
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--seed", type=int, help="override the scene seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit grid/PSF/projectors/threshold from exemplary frames")
    p.add_argument("--frames", required=True, help="glob of PGM frames")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--kernel-size", type=int, default=31)
    p.add_argument("--min-images", type=int, default=2)
    p.add_argument("--occupancy-prefilter", type=float, default=0.5)
    p.add_argument("--threshold-channel", choices=("raw", "normalized"), default="normalized")
    p.add_argument("--projector-blob", help="also write projector weights as a binary blob")
    p.add_argument("--out", required=True, help="artifact JSON path")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("reconstruct", help="emission matrix and occupancy from one frame")
    p.add_argument("--mode", choices=("baseline", "optimized", "dataflow"), default="optimized")
    p.add_argument("--calibration", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-subtract-background", action="store_true")
    p.add_argument("--emit-trace", help="write per-site LaneTrace JSON (dataflow mode)")
    p.add_argument("--out", required=True, help=".json or .csv output path")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("bench", help="wall-clock reconstruction benchmark")
    p.add_argument("--sizes", default="10,20,40", help="comma-separated array sizes")
    p.add_argument("--modes", default="baseline,optimized", help="comma-separated modes")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("predict", help="latency from the linear cycle model")
    p.add_argument("--atoms", type=int, required=True)
    p.add_argument("--model", help="LatencyModel JSON (omit for the reference model)")
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except WindowOutOfBounds as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GEOMETRY
    except GridDetectFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.component_count is not None:
            print(f"  bright components found: {exc.component_count}", file=sys.stderr)
        if exc.residual_rms is not None:
            print(f"  fit residual RMS: {exc.residual_rms:.3f} px", file=sys.stderr)
        return EXIT_GRID
    except NotBimodal as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.variance_ratio is not None:
            print(f"  inter-class variance ratio: {exc.variance_ratio:.3f}", file=sys.stderr)
        return EXIT_THRESHOLD
    except AtomdetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
