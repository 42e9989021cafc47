"""RANSAC triangulation of per-view keypoint detections.

Single points use view-pair hypotheses scored by per-view reprojection error.
Fingers are triangulated four joints at a time: a view joins the consensus
only when the mean reprojection error over the finger's joints is within the
threshold, so all four joints share one inlier set.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from math import comb
from typing import Iterable, Sequence

import numpy as np

from .geometry import CameraRig, CameraView, LMOptions, as_rig, dlt_batch, refine_stacked
from .skeleton import HAND, HandSkeleton


class InsufficientCandidates(Exception):
    """Fewer than two detections passed the confidence threshold."""


@dataclass(frozen=True)
class Detection2D:
    view: int
    keypoint: int
    location: tuple[float, float]
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        x, y = self.location
        object.__setattr__(self, "location", (float(x), float(y)))


@dataclass(frozen=True, eq=False)
class TriangulatedKeypoint:
    keypoint: int
    position: np.ndarray
    inliers: tuple[int, ...]
    mean_reproj_error: float
    inlier_confidences: tuple[float, ...]
    reproj_errors: tuple[float, ...] = field(default=(), repr=False)

    valid = True


@dataclass(frozen=True)
class NoConsensus:
    """Marker for a keypoint without a valid triangulation in this frame."""

    keypoint: int
    reason: str = "below_min_inliers"
    best_inliers: int = 0

    valid = False


TriangulationResult = TriangulatedKeypoint | NoConsensus


@dataclass(frozen=True)
class RansacConfig:
    confidence_threshold: float = 0.2
    reproj_inlier_sigma: float = 4.0
    min_inliers: int = 3
    max_ransac_iterations: int = 200
    rng_seed: int = 0
    group_fingers: bool = True
    refine: LMOptions = LMOptions()

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must lie in [0, 1]")
        if self.reproj_inlier_sigma <= 0:
            raise ValueError("reproj_inlier_sigma must be positive")
        if self.min_inliers < 2:
            raise ValueError("min_inliers must be at least 2")
        if self.max_ransac_iterations < 1:
            raise ValueError("max_ransac_iterations must be positive")


def _rng(cfg: RansacConfig, frame: int, group: int) -> np.random.Generator:
    return np.random.default_rng([cfg.rng_seed & 0xFFFFFFFF, frame & 0xFFFFFFFF, group])


def hypothesis_pairs(m: int, budget: int, rng: np.random.Generator) -> np.ndarray:
    """Candidate index pairs: all of them when affordable, else a uniform sample."""
    total = comb(m, 2)
    if total <= budget:
        return np.array(list(combinations(range(m), 2)), dtype=int).reshape(-1, 2)
    chosen = np.sort(rng.choice(total, size=budget, replace=False))
    # unrank pair indices in lexicographic order
    starts = np.array([comb(m, 2) - comb(m - a, 2) for a in range(m)])
    i = np.searchsorted(starts, chosen, side="right") - 1
    j = chosen - starts[i] + i + 1
    return np.stack([i, j], axis=1)


def _candidates(dets: Iterable[Detection2D], threshold: float) -> list[Detection2D]:
    seen: set[int] = set()
    out = []
    for d in sorted(dets, key=lambda d: d.view):
        if d.view in seen:
            raise ValueError(f"more than one detection of keypoint {d.keypoint} in view {d.view}")
        seen.add(d.view)
        if d.confidence > threshold:
            out.append(d)
    return out


def _select(counts: np.ndarray, mean_err: np.ndarray, first_view: np.ndarray) -> int:
    # most inliers, then lowest mean error, then lowest smallest-view index
    order = np.lexsort((np.arange(len(counts)), first_view, mean_err, -counts))
    return int(order[0])


def _score(err: np.ndarray, ok: np.ndarray, sigma: float, views: np.ndarray):
    inl = (err <= sigma) & ok[:, None]
    counts = inl.sum(axis=1)
    counts[~ok] = -1
    mean_err = np.where(inl, err, 0.0).sum(axis=1) / np.maximum(counts, 1)
    first = np.where(inl, views[None, :], np.iinfo(np.int64).max).min(axis=1)
    return inl, counts, mean_err, first


def _errors(rig: CameraRig, rows: np.ndarray, uv: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Reprojection error of points ``X[..., 3]`` in views ``rows``; inf behind cameras."""
    proj, _ = rig.reproject(rows, X)
    err = np.linalg.norm(proj - uv, axis=-1)
    return np.where(np.isnan(err), np.inf, err)


def _polish(rig, rows, uv, masks, cfg, seed_points):
    """Refine each joint over a shared inlier mask until the mask is stable.

    ``uv`` is ``(J, m, 2)`` for J jointly-tested joints. Returns the final
    mask, refined points ``(J, 3)`` and per-joint errors ``(J, m)``, or None
    when the consensus falls below ``min_inliers``.
    """
    J = uv.shape[0]
    mask = masks
    history: list[bytes] = []
    points = seed_points
    for _ in range(10):
        idx = np.flatnonzero(mask)
        points = np.empty((J, 3))
        for j in range(J):
            X0, ok = dlt_batch(rig.E[rows[idx]], rig.normalize(rows[idx], uv[j, idx]))
            start = X0 if ok and np.all(np.isfinite(_errors(rig, rows[idx], uv[j, idx], X0))) else seed_points[j]
            points[j] = refine_stacked(start, rig.P[rows[idx]], rig.E[rows[idx]], uv[j, idx], cfg.refine).point
        err = _errors(rig, rows[None, :], uv, points[:, None, :])
        new_mask = err.mean(axis=0) <= cfg.reproj_inlier_sigma
        if np.array_equal(new_mask, mask):
            return mask, points, err
        if new_mask.sum() < cfg.min_inliers:
            return None
        key = new_mask.tobytes()
        if key in history:
            # oscillating consensus: keep views accepted in both states
            mask = new_mask & mask
            if mask.sum() < cfg.min_inliers:
                return None
            break
        history.append(mask.tobytes())
        mask = new_mask
    idx = np.flatnonzero(mask)
    for j in range(J):
        points[j] = refine_stacked(points[j], rig.P[rows[idx]], rig.E[rows[idx]], uv[j, idx], cfg.refine).point
    err = _errors(rig, rows[None, :], uv, points[:, None, :])
    mask = mask & (err.mean(axis=0) <= cfg.reproj_inlier_sigma)
    if mask.sum() < cfg.min_inliers:
        return None
    return mask, points, err


def _build(keypoint, point, mask, err_row, cands) -> TriangulatedKeypoint:
    idx = np.flatnonzero(mask)
    errs = tuple(float(err_row[i]) for i in idx)
    return TriangulatedKeypoint(
        keypoint=keypoint,
        position=point,
        inliers=tuple(cands[i].view for i in idx),
        mean_reproj_error=float(np.mean(errs)),
        inlier_confidences=tuple(cands[i].confidence for i in idx),
        reproj_errors=errs,
    )


def ransac_triangulate_point(
    dets: Sequence[Detection2D],
    cams: Sequence[CameraView] | CameraRig,
    cfg: RansacConfig = RansacConfig(),
    *,
    frame: int = 0,
) -> TriangulationResult:
    """Robustly triangulate one keypoint from its detections across views.

    Raises InsufficientCandidates when fewer than two detections exceed the
    confidence threshold; returns NoConsensus when the best hypothesis has
    fewer than ``min_inliers`` supporting views.
    """
    keypoints = {d.keypoint for d in dets}
    if len(keypoints) > 1:
        raise ValueError("detections must share one keypoint index")
    cands = _candidates(dets, cfg.confidence_threshold)
    keypoint = next(iter(keypoints)) if keypoints else -1
    if len(cands) < 2:
        raise InsufficientCandidates(f"keypoint {keypoint}: {len(cands)} candidate(s) above threshold")
    rig = as_rig(cams)
    views = np.array([d.view for d in cands])
    rows = rig.rows(views)
    uv = np.array([d.location for d in cands])
    xn = rig.normalize(rows, uv)

    pairs = hypothesis_pairs(len(cands), cfg.max_ransac_iterations, _rng(cfg, frame, keypoint))
    X, ok = dlt_batch(rig.E[rows[pairs]], xn[pairs])
    err = _errors(rig, rows[None, :], uv[None, :, :], X[:, None, :])
    inl, counts, mean_err, first = _score(err, ok, cfg.reproj_inlier_sigma, views)
    best = _select(counts, mean_err, first)
    if counts[best] < cfg.min_inliers:
        return NoConsensus(keypoint, "below_min_inliers", max(int(counts[best]), 0))

    polished = _polish(rig, rows, uv[None], inl[best], cfg, X[best][None])
    if polished is None:
        return NoConsensus(keypoint, "below_min_inliers", int(counts[best]))
    mask, points, perr = polished
    return _build(keypoint, points[0], mask, perr[0], cands)


def ransac_triangulate_finger(
    dets: Sequence[Detection2D],
    cams: Sequence[CameraView] | CameraRig,
    group: Sequence[int],
    cfg: RansacConfig = RansacConfig(),
    *,
    frame: int = 0,
) -> list[TriangulationResult]:
    """Triangulate the joints of one finger with a shared inlier view set.

    A view is a candidate only if every joint of the finger passes the
    confidence threshold there. A view is an inlier when the mean reprojection
    error over the joints is at most ``reproj_inlier_sigma``.
    """
    group = tuple(group)
    by_kp: dict[int, list[Detection2D]] = defaultdict(list)
    for d in dets:
        if d.keypoint not in group:
            raise ValueError(f"keypoint {d.keypoint} is not part of finger {group}")
        by_kp[d.keypoint].append(d)
    per_kp = {k: {d.view: d for d in _candidates(by_kp[k], cfg.confidence_threshold)} for k in group}
    shared = sorted(set.intersection(*(set(v) for v in per_kp.values())))
    if len(shared) < 2:
        raise InsufficientCandidates(f"finger {group}: {len(shared)} view(s) with all joints above threshold")
    rig = as_rig(cams)
    views = np.array(shared)
    rows = rig.rows(views)
    uv = np.array([[per_kp[k][v].location for v in shared] for k in group])  # (4, m, 2)
    xn = rig.normalize(rows[None, :], uv)

    pairs = hypothesis_pairs(len(shared), cfg.max_ransac_iterations, _rng(cfg, frame, 1000 + group[0]))
    X, ok = dlt_batch(rig.E[rows[pairs]][:, None], np.swapaxes(xn[:, pairs], 0, 1))  # (H, 4, 3)
    ok = ok.all(axis=1)
    err = _errors(rig, rows[None, None, :], uv[None], X[:, :, None, :])  # (H, 4, m)
    inl, counts, mean_err, first = _score(err.mean(axis=1), ok, cfg.reproj_inlier_sigma, views)
    best = _select(counts, mean_err, first)
    if counts[best] < cfg.min_inliers:
        return [NoConsensus(k, "below_min_inliers", max(int(counts[best]), 0)) for k in group]

    polished = _polish(rig, rows, uv, inl[best], cfg, X[best])
    if polished is None:
        return [NoConsensus(k, "below_min_inliers", int(counts[best])) for k in group]
    mask, points, perr = polished
    out = []
    for j, k in enumerate(group):
        cands = [per_kp[k][v] for v in shared]
        out.append(_build(k, points[j], mask, perr[j], cands))
    return out


def triangulate_frame(
    detections: Iterable[Detection2D],
    cams: Sequence[CameraView] | CameraRig,
    skeleton: HandSkeleton = HAND,
    cfg: RansacConfig = RansacConfig(),
    *,
    frame: int = 0,
) -> list[TriangulationResult]:
    """Triangulate every keypoint of one frame, ordered by keypoint index."""
    rig = as_rig(cams)
    by_kp: dict[int, list[Detection2D]] = defaultdict(list)
    for d in detections:
        if d.view in rig.index:
            by_kp[d.keypoint].append(d)
    results: dict[int, TriangulationResult] = {}

    def single(k: int) -> TriangulationResult:
        try:
            return ransac_triangulate_point(by_kp[k], rig, cfg, frame=frame)
        except InsufficientCandidates:
            return NoConsensus(k, "insufficient_candidates")

    results[skeleton.wrist] = single(skeleton.wrist)
    for group in skeleton.finger_groups:
        if not cfg.group_fingers:
            for k in group:
                results[k] = single(k)
            continue
        finger_dets = [d for k in group for d in by_kp[k]]
        try:
            for r in ransac_triangulate_finger(finger_dets, rig, group, cfg, frame=frame):
                results[r.keypoint] = r
        except InsufficientCandidates:
            for k in group:
                results[k] = NoConsensus(k, "insufficient_candidates")
    return [results[k] for k in range(skeleton.keypoint_count)]
