"""Frame scoring, heuristic filtering, N-best selection and label emission.

``run_bootstrap`` ties these together with the synthetic detector and the
trainer rule to run the full detect -> triangulate -> select -> relabel loop.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .detector import DetectorModel, DetectorQualityState, QualityRule, SaturatingRule, detect, trainer_update
from .geometry import CameraRig, CameraView, Capsule, as_rig, segments_blocked
from .scene import Scene
from .skeleton import BONE_CLASSES, HAND, HandSkeleton
from .triangulation import Detection2D, RansacConfig, TriangulationResult, triangulate_frame

log = logging.getLogger(__name__)

VERDICTS = ("inliers", "reprojection", "confidence", "velocity", "bone_length", "occlusion")

DEFAULT_BONE_LIMITS = {"metacarpal": 15.0, "proximal": 9.0, "other": 5.0}


@dataclass(frozen=True)
class FilterConfig:
    min_avg_inliers: float = 5.0
    max_avg_reproj_error: float = 5.0
    min_mean_confidence: float = 0.5
    velocity_outlier_threshold: float = 3.0
    bone_length_max: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_BONE_LIMITS))
    occluders: tuple[Capsule, ...] = ()
    window_size: int = 15
    n_best: int = 100

    def __post_init__(self) -> None:
        positive = (
            self.min_avg_inliers,
            self.max_avg_reproj_error,
            self.min_mean_confidence,
            self.velocity_outlier_threshold,
            *self.bone_length_max.values(),
        )
        if any(v <= 0 for v in positive):
            raise ValueError("filter thresholds must be positive")
        if set(self.bone_length_max) != set(BONE_CLASSES):
            raise ValueError(f"bone_length_max needs exactly the classes {BONE_CLASSES}")
        if self.window_size < 1 or self.n_best < 1:
            raise ValueError("window_size and n_best must be at least 1")
        object.__setattr__(self, "occluders", tuple(self.occluders))


@dataclass
class FrameRecord:
    frame: int
    detections: Sequence[Detection2D] = ()
    triangulations: Sequence[TriangulationResult] = ()
    score: float = 0.0
    window: int = 0
    filter_verdicts: dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.filter_verdicts) and all(self.filter_verdicts.values())

    def positions(self) -> dict[int, np.ndarray]:
        return {r.keypoint: r.position for r in self.triangulations if r.valid}


@dataclass(frozen=True)
class LabeledTrainingExample:
    frame: int
    view: int
    labels: tuple[tuple[float, float] | None, ...]
    weights: tuple[int, ...]


def score_frame(frame: FrameRecord) -> float:
    """Sum of inlier confidences over validly triangulated keypoints."""
    return float(sum(sum(r.inlier_confidences) for r in frame.triangulations if r.valid))


def apply_filters(
    frame: FrameRecord,
    prev_frame: FrameRecord | None,
    cfg: FilterConfig,
    cams: Sequence[CameraView] | CameraRig,
    skeleton: HandSkeleton = HAND,
) -> dict[str, bool]:
    """Evaluate every heuristic; a frame with no valid keypoint only fails ``inliers``."""
    valid = [r for r in frame.triangulations if r.valid]
    verdicts = dict.fromkeys(VERDICTS, True)
    if not valid:
        verdicts["inliers"] = False
        return verdicts

    verdicts["inliers"] = float(np.mean([len(r.inliers) for r in valid])) >= cfg.min_avg_inliers
    verdicts["reprojection"] = float(np.mean([r.mean_reproj_error for r in valid])) <= cfg.max_avg_reproj_error
    confidences = [c for r in valid for c in r.inlier_confidences]
    verdicts["confidence"] = float(np.mean(confidences)) >= cfg.min_mean_confidence

    if prev_frame is not None:
        now, before = frame.positions(), prev_frame.positions()
        common = sorted(set(now) & set(before))
        if common:
            disp = np.array([now[k] - before[k] for k in common])
            deviation = np.linalg.norm(disp - np.median(disp, axis=0), axis=1)
            verdicts["velocity"] = bool(np.all(deviation <= cfg.velocity_outlier_threshold))

    pos = frame.positions()
    for parent, child, bone in skeleton.bone_edges:
        if parent in pos and child in pos:
            if np.linalg.norm(pos[parent] - pos[child]) > cfg.bone_length_max[bone]:
                verdicts["bone_length"] = False
                break

    if cfg.occluders:
        rig = as_rig(cams)
        X = np.array([r.position for r in valid])
        blocked = segments_blocked(rig.centers, X, cfg.occluders)
        for j, r in enumerate(valid):
            if blocked[rig.rows(r.inliers), j].any():
                verdicts["occlusion"] = False
                break
    return verdicts


def select_best_per_window(frames: Sequence[FrameRecord], cfg: FilterConfig) -> list[int]:
    """Best passing frame of each window, sorted by descending score then frame."""
    best: dict[int, FrameRecord] = {}
    for rec in frames:
        if not rec.passed:
            continue
        w = rec.frame // cfg.window_size
        cur = best.get(w)
        if cur is None or (rec.score, -rec.frame) > (cur.score, -cur.frame):
            best[w] = rec
    ordered = sorted(best.values(), key=lambda r: (-r.score, r.frame))
    return [r.frame for r in ordered]


def emit_labels(
    selected: Sequence[int],
    triangulations: Mapping[int, Sequence[TriangulationResult]],
    cams: Sequence[CameraView] | CameraRig,
    occluders: Sequence[Capsule] = (),
    keypoint_count: int = 21,
) -> list[LabeledTrainingExample]:
    """Reproject accepted 3D keypoints into every view that sees at least one of them.

    A label is present when the keypoint triangulated, lies in front of the
    camera, projects inside the image and is not hidden by an occluder.
    """
    rig = as_rig(cams)
    rows = np.arange(len(rig))
    out = []
    for f in selected:
        pos = {r.keypoint: r.position for r in triangulations[f] if r.valid}
        if not pos:
            continue
        kps = sorted(pos)
        X = np.array([pos[k] for k in kps])
        uv, depth = rig.reproject(rows[:, None], X[None])
        w, h = rig.sizes[:, 0:1], rig.sizes[:, 1:2]
        with np.errstate(invalid="ignore"):
            ok = (depth > 0) & (uv[..., 0] >= 0) & (uv[..., 0] < w) & (uv[..., 1] >= 0) & (uv[..., 1] < h)
        if occluders:
            ok &= ~segments_blocked(rig.centers, X, occluders)
        for i in np.flatnonzero(ok.any(axis=1)):
            labels: list[tuple[float, float] | None] = [None] * keypoint_count
            for j, k in enumerate(kps):
                if ok[i, j]:
                    labels[k] = (float(uv[i, j, 0]), float(uv[i, j, 1]))
            weights = tuple(int(l is not None) for l in labels)
            out.append(LabeledTrainingExample(f, int(rig.ids[i]), tuple(labels), weights))
    return out


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    pck_before: float
    frames_selected: int
    labels_emitted: int
    pck_after: float


@dataclass
class BootstrapResult:
    reports: list[IterationReport]
    labels: list[list[LabeledTrainingExample]]
    state: DetectorQualityState
    records: list[list[FrameRecord]]


def process_frame(
    scene: Scene,
    model: DetectorModel,
    ransac: RansacConfig,
    frame: int,
) -> FrameRecord:
    """Detect in every view and triangulate one frame of the scene."""
    uv, visible = scene.pixels(frame)
    truth = np.nan_to_num(uv)
    dets = []
    for i, cam in enumerate(scene.cameras):
        dets.extend(detect(model, truth[i], frame, cam.id, visible[i]))
    tri = triangulate_frame(dets, scene.rig, scene.skeleton, ransac, frame=frame)
    rec = FrameRecord(frame, dets, tri)
    rec.score = score_frame(rec)
    return rec


def _process_chunk(args) -> list[FrameRecord]:
    scene, model, ransac, frames = args
    return [process_frame(scene, model, ransac, f) for f in frames]


def triangulate_scene(
    scene: Scene,
    model: DetectorModel,
    ransac: RansacConfig,
    jobs: int = 1,
    keep_detections: bool = False,
) -> list[FrameRecord]:
    frames = list(range(scene.frames))
    if jobs <= 1:
        records = [process_frame(scene, model, ransac, f) for f in frames]
    else:
        chunks = [frames[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_process_chunk, [(scene, model, ransac, c) for c in chunks]))
        records = sorted((r for part in parts for r in part), key=lambda r: r.frame)
    if not keep_detections:
        for r in records:
            r.detections = ()
    return records


def filter_records(
    records: Sequence[FrameRecord],
    cfg: FilterConfig,
    cams: Sequence[CameraView] | CameraRig,
    skeleton: HandSkeleton = HAND,
) -> None:
    """Fill in window and verdicts in place; the previous frame feeds the velocity check."""
    by_frame = {r.frame: r for r in records}
    for rec in records:
        rec.window = rec.frame // cfg.window_size
        rec.filter_verdicts = apply_filters(rec, by_frame.get(rec.frame - 1), cfg, cams, skeleton)


def run_bootstrap(
    iterations: int,
    state: DetectorQualityState,
    scene: Scene,
    detector: DetectorModel = DetectorModel(),
    ransac: RansacConfig = RansacConfig(),
    filters: FilterConfig | None = None,
    rule: QualityRule = SaturatingRule(),
    jobs: int = 1,
) -> BootstrapResult:
    """Run the bootstrapping loop for ``iterations`` rounds.

    The detector for round ``i`` uses the current per-keypoint PCKs with the
    same random stream, so a better detector is correct wherever a worse one was.
    """
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    if filters is None:
        filters = FilterConfig(occluders=scene.occluders)
    reports, labels, all_records = [], [], []
    for i in range(iterations):
        model = replace(detector, pck=state.pck_per_keypoint)
        records = triangulate_scene(scene, model, ransac, jobs)
        filter_records(records, filters, scene.rig, scene.skeleton)
        selected = select_best_per_window(records, filters)[: filters.n_best]
        tri = {r.frame: r.triangulations for r in records}
        examples = emit_labels(selected, tri, scene.rig, filters.occluders, scene.skeleton.keypoint_count)
        before = state.mean_pck
        state = trainer_update(state, len(examples), rule)
        reports.append(IterationReport(i, before, len(selected), len(examples), state.mean_pck))
        log.info("iteration %d: %d frames, %d labels, pck %.4f -> %.4f", i, len(selected), len(examples), before, state.mean_pck)
        labels.append(examples)
        all_records.append(records)
    return BootstrapResult(reports, labels, state, all_records)
