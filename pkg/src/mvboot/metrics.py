"""Keypoint evaluation: PCK curves, per-joint-class breakdowns, view-angle
outlier heatmaps and the body-to-hand crop heuristic."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .skeleton import HAND, JOINT_CLASSES, HandSkeleton

HEAD_SCALE = 0.7


class EmptyTestSet(ValueError):
    pass


class DegenerateArm(ValueError):
    pass


def _normalized_errors(predictions, truth, scale) -> np.ndarray:
    pred = np.asarray(predictions, dtype=float)
    gt = np.asarray(truth, dtype=float)
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise ValueError(f"predictions {pred.shape} and truth {gt.shape} must match with last axis 2")
    if gt.size == 0:
        raise EmptyTestSet("no keypoints to evaluate")
    scale = np.asarray(scale, dtype=float)
    if np.any(scale <= 0):
        raise ValueError("normalisation scale must be positive")
    # scale is per example: broadcast over any trailing keypoint axes
    while scale.ndim and scale.ndim < pred.ndim - 1:
        scale = scale[..., None]
    err = np.linalg.norm(pred - gt, axis=-1) / scale
    return np.where(np.isnan(err), np.inf, err)


def pck(predictions, truth, sigma: float, scale=1.0) -> float:
    """Fraction of keypoints whose normalised error is below ``sigma``.

    ``predictions`` and ``truth`` are ``(..., 2)``; ``scale`` is a scalar or one
    value per example (leading axis). Missing predictions (NaN) count as wrong.
    """
    err = _normalized_errors(predictions, truth, scale)
    return float(np.mean(err < sigma))


@dataclass(frozen=True)
class PckCurve:
    thresholds: tuple[float, ...]
    values: tuple[float, ...]


def pck_curve(predictions, truth, thresholds: Sequence[float], scale=1.0) -> PckCurve:
    err = _normalized_errors(predictions, truth, scale).ravel()
    t = tuple(float(x) for x in thresholds)
    return PckCurve(t, tuple(float(np.mean(err < s)) for s in t))


def head_scale(head_length) -> np.ndarray:
    """Per-example normaliser: a fixed fraction of the head length."""
    return HEAD_SCALE * np.asarray(head_length, dtype=float)


def pck_by_joint_class(
    predictions,
    truth,
    thresholds: Sequence[float],
    scale=1.0,
    skeleton: HandSkeleton = HAND,
) -> dict[str, PckCurve]:
    """PCK curves per joint class; inputs are ``(examples, keypoints, 2)``."""
    pred = np.asarray(predictions, dtype=float)
    gt = np.asarray(truth, dtype=float)
    if pred.ndim != 3 or pred.shape[1] != skeleton.keypoint_count:
        raise ValueError("expected (examples, keypoints, 2) arrays")
    classes = np.array([skeleton.joint_class(k) for k in range(skeleton.keypoint_count)])
    return {c: pck_curve(pred[:, classes == c], gt[:, classes == c], thresholds, scale) for c in JOINT_CLASSES}


def hand_frame(keypoints: np.ndarray, skeleton: HandSkeleton = HAND) -> tuple[np.ndarray, np.ndarray]:
    """Origin and rows-as-axes rotation of the hand's local frame.

    x points from the wrist to the middle knuckle; z is the palm normal from
    the wrist, index knuckle and little knuckle; y completes a right-handed frame.
    """
    X = np.asarray(keypoints, dtype=float)
    wrist = X[skeleton.wrist]
    index_mcp = X[skeleton.finger_groups[1][0]]
    middle_mcp = X[skeleton.finger_groups[2][0]]
    little_mcp = X[skeleton.finger_groups[4][0]]
    x = middle_mcp - wrist
    x /= np.linalg.norm(x)
    n = np.cross(index_mcp - wrist, little_mcp - wrist)
    z = n - (n @ x) * x
    z /= np.linalg.norm(z)
    y = np.cross(z, x)
    return wrist, np.stack([x, y, z])


def view_angles(camera_center, keypoints, skeleton: HandSkeleton = HAND) -> tuple[float, float]:
    """Azimuth and elevation (degrees) of a camera seen from the hand frame."""
    origin, R = hand_frame(keypoints, skeleton)
    d = R @ (np.asarray(camera_center, dtype=float) - origin)
    phi = math.degrees(math.atan2(d[1], d[0]))
    theta = math.degrees(math.atan2(d[2], math.hypot(d[0], d[1])))
    return phi, theta


@dataclass(frozen=True)
class ViewAngleBin:
    phi_lo: float
    phi_hi: float
    theta_lo: float
    theta_hi: float
    outliers: int
    total: int

    @property
    def fraction(self) -> float:
        """Outlier fraction; NaN flags an empty bin."""
        return self.outliers / self.total if self.total else math.nan

    @property
    def empty(self) -> bool:
        return self.total == 0


def angle_bin(phi: float, theta: float, bin_size: float = 20.0) -> tuple[int, int]:
    """Grid cell for an angle pair; phi wraps into [-180, 180), theta = 90 joins the top row."""
    if not -180.0 <= phi < 180.0:
        phi = (phi + 180.0) % 360.0 - 180.0
    n_phi = int(round(360.0 / bin_size))
    n_theta = int(round(180.0 / bin_size))
    return _cell(phi, -180.0, bin_size, n_phi), _cell(theta, -90.0, bin_size, n_theta)


def _cell(value: float, start: float, size: float, count: int) -> int:
    i = int(math.floor((value - start) / size))
    # the shifted division can round across an edge; settle it against the edges themselves
    if i > 0 and value < start + i * size:
        i -= 1
    elif i < count - 1 and value >= start + (i + 1) * size:
        i += 1
    return min(max(i, 0), count - 1)


def view_angle_heatmap(
    samples: Sequence[tuple[float, float, bool]],
    bin_size: float = 20.0,
) -> list[ViewAngleBin]:
    """Outlier fractions on an azimuth/elevation grid.

    ``samples`` are ``(phi, theta, is_outlier)`` triples, one per (view,
    frame) detection. Every grid cell is returned, empty ones included.
    """
    if bin_size <= 0 or abs(180.0 / bin_size - round(180.0 / bin_size)) > 1e-9:
        raise ValueError("bin_size must divide 180 degrees")
    n_phi = int(round(360.0 / bin_size))
    n_theta = int(round(180.0 / bin_size))
    outliers = np.zeros((n_phi, n_theta), dtype=int)
    totals = np.zeros((n_phi, n_theta), dtype=int)
    for phi, theta, bad in samples:
        i, j = angle_bin(phi, theta, bin_size)
        totals[i, j] += 1
        outliers[i, j] += bool(bad)
    return [
        ViewAngleBin(
            -180.0 + i * bin_size,
            -180.0 + (i + 1) * bin_size,
            -90.0 + j * bin_size,
            -90.0 + (j + 1) * bin_size,
            int(outliers[i, j]),
            int(totals[i, j]),
        )
        for i in range(n_phi)
        for j in range(n_theta)
    ]


def hand_bbox_from_body(wrist, elbow, head_length: float) -> tuple[np.ndarray, float]:
    """Square hand crop ``(center, side)`` from 2D wrist, elbow and head length.

    The hand is assumed to extend the forearm by 15% of its length; the crop
    side is 2.2 times the expected hand size of 0.7 head lengths.
    """
    wrist = np.asarray(wrist, dtype=float)
    elbow = np.asarray(elbow, dtype=float)
    if head_length <= 0:
        raise ValueError("head length must be positive")
    if np.array_equal(wrist, elbow):
        raise DegenerateArm("wrist and elbow coincide")
    center = wrist + 0.15 * (wrist - elbow)
    return center, 2.2 * HEAD_SCALE * float(head_length)


def detection_outcomes(frame_records, hand_poses, cams) -> list[tuple[float, float, bool]]:
    """``(phi, theta, is_outlier)`` per detection of a validly triangulated keypoint.

    ``hand_poses`` maps frame index to the ``(21, 3)`` keypoints that define
    the hand frame (generator truth in simulation, accepted reconstructions
    otherwise). A detection is an outlier when its view is not in the inlier set.
    """
    centers = {c.id: c.center for c in cams}
    out = []
    for rec in frame_records:
        pose = hand_poses[rec.frame]
        angles = {v: view_angles(c, pose) for v, c in centers.items()}
        inliers = {r.keypoint: set(r.inliers) for r in rec.triangulations if r.valid}
        for d in rec.detections:
            if d.keypoint in inliers and d.view in angles:
                phi, theta = angles[d.view]
                out.append((phi, theta, d.view not in inliers[d.keypoint]))
    return out
