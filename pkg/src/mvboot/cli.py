"""``mvboot`` command line: triangulate, label, bootstrap, plan, eval and simulate.

Exit codes: 0 success, 2 parse error, 3 invariant violation, 4 no keypoint
reached consensus in any frame.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import io as mio
from .config import ConfigError, ConfigInvariantError, PipelineConfig, dump_defaults, load_config
from .detector import DetectorQualityState, detect
from .geometry import CameraRig, GeometryError
from .metrics import detection_outcomes, head_scale, pck_by_joint_class, pck_curve, view_angle_heatmap
from .montecarlo import mc_false_triangulation, mc_point_rates
from .pipeline import FrameRecord, emit_labels, filter_records, run_bootstrap, score_frame, select_best_per_window
from .planning import CSV_COLUMNS, PRESET_PCKS, DomainError, make_grid, plan_grid, table_row
from .scene import Scene
from .skeleton import HAND
from .triangulation import triangulate_frame

log = logging.getLogger("mvboot")

EXIT_OK, EXIT_PARSE, EXIT_INVARIANT, EXIT_NO_CONSENSUS = 0, 2, 3, 4


class NoConsensusAnywhere(RuntimeError):
    pass


def default_jobs() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _config(path: str | None) -> PipelineConfig:
    return load_config(path) if path else PipelineConfig()


@contextmanager
def _open_out(path: str | None):
    if path is None or path == "-":
        yield sys.stdout
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        yield fh


def parse_grid(text: str, kind=float) -> list:
    """Comma-separated values and inclusive ranges ``lo:hi`` or ``lo:hi:step``."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            raise DomainError(f"empty item in grid {text!r}")
        parts = item.split(":")
        try:
            nums = [kind(p) for p in parts]
        except ValueError as e:
            raise DomainError(f"bad grid item {item!r}: {e}") from e
        if len(nums) == 1:
            out.append(nums[0])
            continue
        if len(nums) > 3:
            raise DomainError(f"bad grid item {item!r}")
        lo, hi = nums[0], nums[1]
        step = nums[2] if len(nums) == 3 else kind(1)
        if step <= 0 or hi < lo:
            raise DomainError(f"grid range {item!r} needs lo <= hi and a positive step")
        count = int(round((hi - lo) / step))
        if kind is int:
            out.extend(range(lo, hi + 1, step))
        else:
            out.extend(round(lo + i * step, 12) for i in range(count + 1) if lo + i * step <= hi + 1e-12)
    return out


def _grid_arg(values: Sequence[str] | None, kind, default) -> list:
    if not values:
        return list(default)
    return [v for text in values for v in parse_grid(text, kind)]


# triangulate


def _triangulate_chunk(args) -> list[FrameRecord]:
    cams, cfg, items = args
    rig = CameraRig(cams)
    out = []
    for frame, dets in items:
        rec = FrameRecord(frame, (), triangulate_frame(dets, rig, HAND, cfg, frame=frame))
        rec.score = score_frame(rec)
        out.append(rec)
    return out


def triangulate_detections(cams, detections, cfg, jobs: int = 1) -> list[FrameRecord]:
    rig = CameraRig(cams)
    for frame, dets in detections.items():
        for d in dets:
            if d.view not in rig.index:
                raise mio.InvariantError(f"frame {frame}: detection for unknown view {d.view}")
            if not 0 <= d.keypoint < HAND.keypoint_count:
                raise mio.InvariantError(f"frame {frame}: keypoint {d.keypoint} out of range")
    items = sorted(detections.items())
    if jobs <= 1 or len(items) < 2:
        return _triangulate_chunk((cams, cfg, items))
    chunks = [items[i::jobs] for i in range(jobs) if items[i::jobs]]
    with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(_triangulate_chunk, [(cams, cfg, c) for c in chunks]))
    return sorted((r for p in parts for r in p), key=lambda r: r.frame)


def cmd_triangulate(args) -> int:
    cfg = _config(args.config)
    calibration = args.calibration or cfg.paths.calibration
    detections = args.detections or cfg.paths.detections
    if calibration is None or detections is None:
        raise ConfigError("triangulate needs --calibration and --detections (or paths in the config)")
    cams = mio.load_calibration(calibration)
    dets = mio.read_detections(detections)
    records = triangulate_detections(cams, dets, cfg.ransac, args.jobs)
    with _open_out(args.output) as fh:
        for rec in records:
            fh.write(mio.frame_to_json(rec) + "\n")
    if records and not any(r.valid for rec in records for r in rec.triangulations):
        raise NoConsensusAnywhere("no keypoint reached consensus in any frame")
    return EXIT_OK


# label


def cmd_label(args) -> int:
    cfg = _config(args.config)
    calibration = args.calibration or cfg.paths.calibration
    if calibration is None:
        raise ConfigError("label needs --calibration (or paths.calibration in the config)")
    cams = mio.load_calibration(calibration)
    records = mio.read_triangulations(args.triangulations)
    rig = CameraRig(cams)
    filter_records(records, cfg.filters, rig)
    selected = select_best_per_window(records, cfg.filters)[: cfg.filters.n_best]
    tri = {r.frame: r.triangulations for r in records}
    examples = emit_labels(selected, tri, rig, cfg.filters.occluders)
    with _open_out(args.output) as fh:
        for ex in examples:
            fh.write(mio.label_to_json(ex) + "\n")
    # frames for optional manual review, best first
    by_frame = {r.frame: r for r in records}
    print("frame,score", file=sys.stderr)
    for f in selected:
        print(f"{f},{by_frame[f].score!r}", file=sys.stderr)
    if records and not any(r.valid for rec in records for r in rec.triangulations):
        raise NoConsensusAnywhere("no keypoint reached consensus in any frame")
    return EXIT_OK


# bootstrap


def cmd_bootstrap(args) -> int:
    cfg = _config(args.config)
    iterations = args.iterations or cfg.run.iterations
    out_dir = Path(args.output_dir) if args.output_dir else cfg.paths.output_dir
    scene = Scene.from_config(cfg.scene)
    state = DetectorQualityState(tuple(cfg.detector.pck_vector(scene.skeleton.keypoint_count)))
    result = run_bootstrap(iterations, state, scene, cfg.detector, cfg.ransac, cfg.filters, cfg.trainer, args.jobs)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="", encoding="utf-8") as fh:
        mio.write_report(fh, result.reports)
    for i, examples in enumerate(result.labels):
        mio.write_labels(out_dir / f"labels_iter{i}.jsonl", examples)
    mio.write_report(sys.stdout, result.reports)
    return EXIT_OK


# plan


def _mc_columns(spec, trials: int, seed: int) -> dict:
    ft = mc_false_triangulation(spec.views, spec.min_inliers, spec.sigma, int(spec.width), trials, seed)
    rates = mc_point_rates(spec.views, spec.min_inliers, spec.sigma, spec.pck, int(spec.width), trials, seed + 1)
    return {"mc_ft": ft.p, "mc_ft_se": ft.se, "mc_tp_point": rates.tp.p, "mc_tp_point_se": rates.tp.se,
            "mc_fp_point": rates.fp.p, "mc_fp_point_se": rates.fp.se}


MC_COLUMNS = ("mc_ft", "mc_ft_se", "ft_ok", "mc_tp_point", "mc_tp_point_se", "tp_ok", "mc_fp_point", "mc_fp_point_se", "fp_ok")


def _parse_verify(text: str) -> int:
    key, _, value = text.partition("=")
    if key != "trials" or not value:
        raise DomainError(f"--verify-mc expects trials=N, got {text!r}")
    try:
        trials = int(float(value))
    except ValueError as e:
        raise DomainError(f"--verify-mc: bad trial count {value!r}") from e
    if trials < 1:
        raise DomainError("--verify-mc: trials must be positive")
    return trials


def cmd_plan(args) -> int:
    views = _grid_arg(args.views, int, (5, 31))
    inliers = _grid_arg(args.inliers, int, range(2, 9))
    sigmas = _grid_arg(args.sigma, float, (4.0,))
    widths = _grid_arg(args.width, float, (368.0,))
    pcks = _grid_arg(args.pck, float, PRESET_PCKS)
    keypoints = _grid_arg(args.keypoints, int, (21,))
    trials = _parse_verify(args.verify_mc) if args.verify_mc else None
    rows = plan_grid(make_grid(views, inliers, sigmas, widths, pcks, keypoints))
    columns = CSV_COLUMNS + (MC_COLUMNS if trials else ())
    with _open_out(args.output) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for spec, report in rows:
            row = table_row(spec, report)
            if trials:
                if spec.width != int(spec.width):
                    raise DomainError("--verify-mc needs an integer image width")
                mc = _mc_columns(spec, trials, args.seed)
                row.update(mc)
                # closed forms are upper bounds for the spurious rates, central for the true rate
                row["ft_ok"] = int(mc["mc_ft"] <= report.ft_n + 3 * mc["mc_ft_se"])
                row["tp_ok"] = int(abs(mc["mc_tp_point"] - report.tp_point) <= 3 * mc["mc_tp_point_se"])
                row["fp_ok"] = int(mc["mc_fp_point"] <= report.fp_point + 3 * mc["mc_fp_point_se"])
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    return EXIT_OK


# eval


def _read_points(path, with_scale: bool = False):
    """``{example: {keypoint: (x, y)}}`` plus optional per-example head lengths."""
    points: dict[int, dict[int, tuple[float, float]]] = {}
    heads: dict[int, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        base = ["example", "keypoint", "x", "y"]
        if header not in (base, base + ["head_length"]) or (header != base and not with_scale):
            raise mio.ParseError(f"{path}:1: header must be {','.join(base)}" + (" [,head_length]" if with_scale else ""))
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise mio.ParseError(f"{path}:{reader.line_num}: expected {len(header)} fields")
            try:
                ex, kp = int(row[0]), int(row[1])
                points.setdefault(ex, {})[kp] = (float(row[2]), float(row[3]))
                if len(row) == 5:
                    heads[ex] = float(row[4])
            except ValueError as e:
                raise mio.ParseError(f"{path}:{reader.line_num}: {e}") from e
    return points, heads


def cmd_eval(args) -> int:
    wrote = False
    if args.predictions or args.truth:
        if not (args.predictions and args.truth):
            raise ConfigError("eval needs both --predictions and --truth")
        truth, heads = _read_points(args.truth, with_scale=True)
        preds, _ = _read_points(args.predictions)
        examples = sorted(truth)
        if not examples:
            raise mio.InvariantError("truth file has no keypoints")
        K = 1 + max(k for t in truth.values() for k in t)
        gt = np.full((len(examples), K, 2), np.nan)
        pr = np.full_like(gt, np.nan)
        for i, ex in enumerate(examples):
            for k, xy in truth[ex].items():
                gt[i, k] = xy
            for k, xy in preds.get(ex, {}).items():
                if k < K:
                    pr[i, k] = xy
        if np.isnan(gt).any():
            raise mio.InvariantError("truth must give every keypoint of every example")
        scale = head_scale([heads[e] for e in examples]) if heads else args.scale
        thresholds = parse_grid(args.thresholds, float)
        curves = {"all": pck_curve(pr, gt, thresholds, scale)}
        if K == HAND.keypoint_count:
            curves.update(pck_by_joint_class(pr, gt, thresholds, scale))
        with _open_out(args.output) as fh:
            mio.write_pck_curves(fh, curves)
        wrote = True
    if args.triangulations:
        if not (args.detections and args.calibration):
            raise ConfigError("heatmap needs --triangulations, --detections and --calibration")
        cams = mio.load_calibration(args.calibration)
        dets = mio.read_detections(args.detections)
        records = mio.read_triangulations(args.triangulations)
        for rec in records:
            rec.detections = dets.get(rec.frame, [])
        # the hand frame comes from the accepted reconstruction itself
        anchors = (HAND.wrist, HAND.finger_groups[1][0], HAND.finger_groups[2][0], HAND.finger_groups[4][0])
        poses = {}
        usable = []
        for rec in records:
            pos = rec.positions()
            if all(a in pos for a in anchors):
                pose = np.full((HAND.keypoint_count, 3), np.nan)
                for k, x in pos.items():
                    pose[k] = x
                poses[rec.frame] = pose
                usable.append(rec)
        bins = view_angle_heatmap(detection_outcomes(usable, poses, cams), args.bin_size)
        with _open_out(args.heatmap) as fh:
            mio.write_heatmap(fh, bins)
        wrote = True
    if not wrote:
        raise ConfigError("eval needs --predictions/--truth and/or --triangulations")
    return EXIT_OK


# simulate


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    scene_cfg = cfg.scene
    if args.views:
        scene_cfg = replace(scene_cfg, views=args.views)
    if args.frames:
        scene_cfg = replace(scene_cfg, frames=args.frames)
    if args.no_occluders:
        scene_cfg = replace(scene_cfg, occluders=())
    scene = Scene.from_config(scene_cfg)
    model = cfg.detector
    if args.exact:
        model = replace(model, pck=1.0, correct_noise_sigma=0.0, confidence_correct=(1.0, 1.0))
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    mio.save_calibration(scene.cameras, out / "cameras.json")
    detections = {}
    for f in range(scene.frames):
        uv, visible = scene.pixels(f)
        dets = []
        for i, cam in enumerate(scene.cameras):
            found = detect(model, np.nan_to_num(uv[i]), f, cam.id, visible[i])
            # exact mode reports only what the camera can see
            dets.extend(d for d in found if not args.exact or visible[i, d.keypoint])
        detections[f] = dets
    mio.write_detections(out / "detections.csv", detections)
    with open(out / "keypoints3d.csv", "w", newline="", encoding="utf-8") as fh:
        rows = ((f, k, *map(float, scene.keypoints(f)[k])) for f in range(scene.frames) for k in range(HAND.keypoint_count))
        mio.write_rows(fh, ("frame", "keypoint", "x", "y", "z"), rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvboot", description="Multiview bootstrapping for keypoint detectors.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--dump-defaults", action="store_true", help="print the default config as TOML and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    def jobs(sp):
        sp.add_argument("--jobs", type=int, default=default_jobs(), help="worker processes (default: available CPUs)")

    t = sub.add_parser("triangulate", help="RANSAC-triangulate a detections CSV")
    t.add_argument("--calibration")
    t.add_argument("--detections")
    t.add_argument("--config")
    t.add_argument("-o", "--output", help="JSONL output (default stdout)")
    jobs(t)
    t.set_defaults(func=cmd_triangulate)

    l = sub.add_parser("label", help="filter triangulated frames and emit reprojected labels")
    l.add_argument("--triangulations", required=True)
    l.add_argument("--calibration")
    l.add_argument("--config")
    l.add_argument("-o", "--output", help="labels JSONL (default stdout)")
    l.set_defaults(func=cmd_label)

    b = sub.add_parser("bootstrap", help="run the bootstrapping loop on the synthetic scene")
    b.add_argument("--config")
    b.add_argument("--iterations", type=int)
    b.add_argument("--output-dir")
    jobs(b)
    b.set_defaults(func=cmd_bootstrap)

    pl = sub.add_parser("plan", help="closed-form planning table; flags repeat and accept lo:hi[:step]")
    for flag in ("views", "inliers", "sigma", "width", "pck", "keypoints"):
        pl.add_argument(f"--{flag}", action="append")
    pl.add_argument("--verify-mc", metavar="trials=N", help="add Monte Carlo columns and agreement flags")
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("-o", "--output")
    pl.set_defaults(func=cmd_plan)

    e = sub.add_parser("eval", help="PCK curves and view-angle outlier heatmaps")
    e.add_argument("--predictions")
    e.add_argument("--truth", help="CSV example,keypoint,x,y[,head_length]")
    e.add_argument("--thresholds", default="0:0.2:0.01")
    e.add_argument("--scale", type=float, default=1.0, help="pixel normaliser when truth has no head_length")
    e.add_argument("-o", "--output", help="PCK CSV (default stdout)")
    e.add_argument("--triangulations")
    e.add_argument("--detections")
    e.add_argument("--calibration")
    e.add_argument("--bin-size", type=float, default=20.0)
    e.add_argument("--heatmap", help="heatmap CSV (default stdout)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="write cameras, detections and 3D truth for the synthetic scene")
    s.add_argument("--config")
    s.add_argument("--views", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--exact", action="store_true", help="noise-free detections of visible keypoints only")
    s.add_argument("--no-occluders", action="store_true")
    s.add_argument("--output-dir", required=True)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.dump_defaults:
        sys.stdout.write(dump_defaults())
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_PARSE
    try:
        return args.func(args)
    except (mio.ParseError, ConfigError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except (mio.InvariantError, ConfigInvariantError, GeometryError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except NoConsensusAnywhere as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NO_CONSENSUS
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
