"""Readers and writers for calibration, detections, triangulations, labels and tables.

Parse problems raise :class:`ParseError`; well-formed input that breaks a
domain rule raises :class:`InvariantError`. Both carry the file and, where
it makes sense, the 1-based line number.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import CameraView, GeometryError
from .metrics import PckCurve, ViewAngleBin
from .pipeline import FrameRecord, IterationReport, LabeledTrainingExample
from .triangulation import Detection2D, NoConsensus, TriangulatedKeypoint


class ParseError(ValueError):
    pass


class InvariantError(ValueError):
    pass


def _where(path, line: int | None = None) -> str:
    return f"{path}:{line}" if line is not None else str(path)


# calibration

CAMERA_FIELDS = ("id", "K", "R", "t", "width", "height")
CALIBRATION_R_TOL = 1e-6


def _snap_rotation(R: np.ndarray) -> np.ndarray:
    """Nearest orthonormal matrix; files often store rotations to a few digits."""
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def load_calibration(path) -> list[CameraView]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{_where(path, e.lineno)}: invalid JSON: {e.msg}") from e
    if not isinstance(data, list):
        raise ParseError(f"{path}: expected a JSON array of cameras")
    cams, seen = [], set()
    for i, entry in enumerate(data):
        if not isinstance(entry, dict) or set(entry) != set(CAMERA_FIELDS):
            raise ParseError(f"{path}: camera #{i} must have exactly the fields {', '.join(CAMERA_FIELDS)}")
        try:
            K = np.array(entry["K"], dtype=float)
            R = np.array(entry["R"], dtype=float)
            t = np.array(entry["t"], dtype=float)
            cam_id, width, height = int(entry["id"]), int(entry["width"]), int(entry["height"])
        except (TypeError, ValueError) as e:
            raise ParseError(f"{path}: camera #{i}: {e}") from e
        if K.shape != (9,) or R.shape != (9,) or t.shape != (3,):
            raise ParseError(f"{path}: camera #{i}: K and R need 9 entries, t needs 3")
        if cam_id in seen:
            raise InvariantError(f"{path}: duplicate camera id {cam_id}")
        seen.add(cam_id)
        R = R.reshape(3, 3)
        if not np.all(np.isfinite(R)) or np.max(np.abs(R.T @ R - np.eye(3))) > CALIBRATION_R_TOL:
            raise InvariantError(f"{path}: camera {cam_id}: R is not orthonormal")
        if np.linalg.det(R) < 0:
            raise InvariantError(f"{path}: camera {cam_id}: R is a reflection")
        R = _snap_rotation(R)
        try:
            cams.append(CameraView(cam_id, K, R, t, width, height))
        except GeometryError as e:
            raise InvariantError(f"{path}: {e}") from e
    return cams


def camera_to_dict(cam: CameraView) -> dict:
    return {
        "id": int(cam.id),
        "K": [float(v) for v in cam.K.ravel()],
        "R": [float(v) for v in cam.R.ravel()],
        "t": [float(v) for v in cam.t],
        "width": int(cam.width),
        "height": int(cam.height),
    }


def save_calibration(cams: Iterable[CameraView], path) -> None:
    Path(path).write_text(json.dumps([camera_to_dict(c) for c in cams], indent=1) + "\n", encoding="utf-8")


# detections

DETECTION_HEADER = ("frame", "view", "keypoint", "x", "y", "confidence")


def read_detections(path) -> dict[int, list[Detection2D]]:
    """Detections grouped by frame, in file order."""
    out: dict[int, list[Detection2D]] = defaultdict(list)
    seen: set[tuple[int, int, int]] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return {}
        if tuple(h.strip() for h in header) != DETECTION_HEADER:
            raise ParseError(f"{_where(path, 1)}: header must be {','.join(DETECTION_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(DETECTION_HEADER):
                raise ParseError(f"{_where(path, line)}: expected 6 fields, got {len(row)}")
            try:
                frame, view, kp = (int(c) for c in row[:3])
                x, y, conf = (float(c) for c in row[3:])
            except ValueError as e:
                raise ParseError(f"{_where(path, line)}: {e}") from e
            if not (math.isfinite(x) and math.isfinite(y)):
                raise InvariantError(f"{_where(path, line)}: non-finite location")
            key = (frame, view, kp)
            if key in seen:
                raise InvariantError(f"{_where(path, line)}: duplicate detection for frame {frame}, view {view}, keypoint {kp}")
            seen.add(key)
            try:
                out[frame].append(Detection2D(view, kp, (x, y), conf))
            except ValueError as e:
                raise InvariantError(f"{_where(path, line)}: {e}") from e
    return dict(out)


def write_detections(path, detections: Mapping[int, Sequence[Detection2D]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_HEADER)
        for frame in sorted(detections):
            for d in detections[frame]:
                w.writerow([frame, d.view, d.keypoint, repr(d.location[0]), repr(d.location[1]), repr(d.confidence)])


# triangulations


def _keypoint_to_dict(r) -> dict:
    if not r.valid:
        return {"keypoint": r.keypoint, "valid": False, "reason": r.reason, "best_inliers": r.best_inliers}
    return {
        "keypoint": r.keypoint,
        "valid": True,
        "position": [float(v) for v in r.position],
        "inliers": [int(v) for v in r.inliers],
        "mean_reproj_error": float(r.mean_reproj_error),
        "inlier_confidences": [float(c) for c in r.inlier_confidences],
        "reproj_errors": [float(e) for e in r.reproj_errors],
    }


def _keypoint_from_dict(d: dict):
    if not d["valid"]:
        return NoConsensus(int(d["keypoint"]), str(d["reason"]), int(d["best_inliers"]))
    return TriangulatedKeypoint(
        int(d["keypoint"]),
        np.array(d["position"], dtype=float),
        tuple(int(v) for v in d["inliers"]),
        float(d["mean_reproj_error"]),
        tuple(float(c) for c in d["inlier_confidences"]),
        tuple(float(e) for e in d.get("reproj_errors", ())),
    )


def frame_to_json(rec: FrameRecord) -> str:
    # json writes floats with repr, so values round-trip exactly
    obj = {"frame": rec.frame, "score": rec.score, "keypoints": [_keypoint_to_dict(r) for r in rec.triangulations]}
    return json.dumps(obj, separators=(",", ":"))


def write_triangulations(path, records: Iterable[FrameRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(frame_to_json(rec) + "\n")


def read_triangulations(path) -> list[FrameRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line, text in enumerate(fh, 1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
                tri = [_keypoint_from_dict(d) for d in obj["keypoints"]]
                out.append(FrameRecord(int(obj["frame"]), (), tri, float(obj["score"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ParseError(f"{_where(path, line)}: malformed triangulation record: {e}") from e
    return out


# labels


def label_to_dict(ex: LabeledTrainingExample) -> dict:
    return {
        "frame": ex.frame,
        "view": ex.view,
        "labels": [None if l is None else [l[0], l[1]] for l in ex.labels],
        "weights": list(ex.weights),
    }


def label_to_json(ex: LabeledTrainingExample) -> str:
    return json.dumps(label_to_dict(ex), separators=(",", ":"))


def write_labels(path, examples: Iterable[LabeledTrainingExample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(label_to_json(ex) + "\n")


def read_labels(path) -> list[LabeledTrainingExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line, text in enumerate(fh, 1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
                labels = tuple(None if l is None else (float(l[0]), float(l[1])) for l in obj["labels"])
                out.append(LabeledTrainingExample(int(obj["frame"]), int(obj["view"]), labels, tuple(int(w) for w in obj["weights"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as e:
                raise ParseError(f"{_where(path, line)}: malformed label record: {e}") from e
    return out


# tables

REPORT_HEADER = ("iteration", "pck_before", "frames_selected", "labels_emitted", "pck_after")
HEATMAP_HEADER = ("phi_lo", "phi_hi", "theta_lo", "theta_hi", "outliers", "total", "fraction")


def write_rows(fh, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_report(fh, reports: Iterable[IterationReport]) -> None:
    write_rows(fh, REPORT_HEADER, ([getattr(r, k) for k in REPORT_HEADER] for r in reports))


def write_heatmap(fh, bins: Iterable[ViewAngleBin]) -> None:
    write_rows(
        fh,
        HEATMAP_HEADER,
        ((b.phi_lo, b.phi_hi, b.theta_lo, b.theta_hi, b.outliers, b.total, b.fraction) for b in bins),
    )


def write_pck_curves(fh, curves: Mapping[str, PckCurve]) -> None:
    rows = ((name, s, v) for name, c in curves.items() for s, v in zip(c.thresholds, c.values))
    write_rows(fh, ("class", "sigma", "pck"), rows)
