"""Synthetic multi-camera hand scenes with known 3D poses and occluders.

World units are centimetres. The hand moves slowly in front of a body made
of capsules, and cameras sit on a dome around the working volume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import CameraRig, CameraView, Capsule, look_at_camera, segments_blocked
from .skeleton import HAND, HandSkeleton

# Hand template in the hand frame: x toward the fingers, y toward the thumb,
# z the palm normal. Rows: knuckle base and three phalanx lengths per finger.
_FINGER_BASES = np.array(
    [
        [3.0, 3.5, -1.0],  # thumb
        [8.5, 2.4, 0.0],
        [9.0, 0.4, 0.0],
        [8.5, -1.5, 0.0],
        [7.6, -3.3, 0.0],
    ]
)
_PHALANGES = np.array(
    [
        [3.2, 2.6, 2.3],
        [4.6, 2.7, 2.0],
        [5.0, 3.0, 2.2],
        [4.6, 2.8, 2.1],
        [3.7, 2.2, 1.9],
    ]
)
_THUMB_DIRECTION = np.array([0.6, 0.75, -0.25])


def _rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cz, sz = math.cos(yaw), math.sin(yaw)
    cy, sy = math.cos(pitch), math.sin(pitch)
    cx, sx = math.cos(roll), math.sin(roll)
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return Rz @ Ry @ Rx


def hand_template(curl: float = 0.0) -> np.ndarray:
    """21 keypoints in the hand frame for a given finger curl (radians per joint)."""
    pts = np.zeros((21, 3))
    for f in range(5):
        base = _FINGER_BASES[f]
        if f == 0:
            d = _THUMB_DIRECTION / np.linalg.norm(_THUMB_DIRECTION)
            bend_axis = np.array([0.0, 0.0, 1.0])
        else:
            d = np.array([1.0, 0.0, 0.0])
            bend_axis = np.array([0.0, 1.0, 0.0])
        pts[1 + 4 * f] = base
        p = base.copy()
        for j, length in enumerate(_PHALANGES[f]):
            angle = curl * (j + 1)
            d_j = _rotate_about(d, bend_axis, angle)
            p = p + length * d_j
            pts[2 + 4 * f + j] = p
    return pts


def _rotate_about(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    return (
        v * math.cos(angle)
        + np.cross(axis, v) * math.sin(angle)
        + axis * np.dot(axis, v) * (1 - math.cos(angle))
    )


def hand_pose(frame: int, frames: int) -> np.ndarray:
    """World keypoints for one frame of a smooth, slow hand trajectory."""
    s = 2 * math.pi * frame / max(frames, 1)
    yaw = s + 0.3 * math.sin(3 * s)
    pitch = 0.45 * math.sin(2 * s)
    roll = 0.35 * math.sin(5 * s)
    curl = 0.25 + 0.2 * math.sin(7 * s)
    offset = np.array([8 * math.sin(s), 6 * math.sin(2 * s + 0.4), 10 + 5 * math.sin(3 * s)])
    R = _rotation(yaw, pitch, roll)
    local = hand_template(curl) - np.array([5.0, 0.0, 0.0])
    return local @ R.T + offset


def dome_cameras(
    views: int,
    radius: float = 200.0,
    focal: float = 1200.0,
    width: int = 368,
    height: int = 368,
    elevation_range: tuple[float, float] = (-25.0, 55.0),
    target=(0.0, 0.0, 0.0),
) -> list[CameraView]:
    """Cameras spread over a dome band by a golden-angle spiral, all facing ``target``."""
    lo, hi = (math.radians(e) for e in elevation_range)
    golden = math.pi * (3 - math.sqrt(5))
    cams = []
    for v in range(views):
        frac = (v + 0.5) / views
        z = math.sin(lo) + frac * (math.sin(hi) - math.sin(lo))
        elev = math.asin(z)
        az = v * golden
        center = np.asarray(target) + radius * np.array(
            [math.cos(elev) * math.cos(az), math.cos(elev) * math.sin(az), math.sin(elev)]
        )
        cams.append(look_at_camera(v, center, target, focal, width, height))
    return cams


def default_occluders() -> tuple[Capsule, ...]:
    """A torso, a post and a tabletop; together they hide the hand from about half the dome."""
    torso = Capsule((0.0, -60.0, -90.0), (0.0, -60.0, 40.0), 35.0)
    post = Capsule((55.0, 30.0, -90.0), (55.0, 30.0, 60.0), 28.0)
    table = tuple(Capsule((-150.0, y, -12.0), (150.0, y, -12.0), 6.0) for y in range(-150, 151, 11))
    return (torso, post) + table


@dataclass(frozen=True)
class SceneConfig:
    views: int = 31
    frames: int = 900
    radius: float = 200.0
    focal: float = 1200.0
    width: int = 368
    height: int = 368
    occluders: tuple[Capsule, ...] = field(default_factory=default_occluders)

    def __post_init__(self) -> None:
        if self.views < 2 or self.frames < 1:
            raise ValueError("need at least 2 views and 1 frame")
        if self.radius <= 0 or self.focal <= 0:
            raise ValueError("radius and focal must be positive")


@dataclass(frozen=True, eq=False)
class Scene:
    """Cameras plus a deterministic 3D hand trajectory."""

    cameras: tuple[CameraView, ...]
    frames: int
    occluders: tuple[Capsule, ...] = ()
    skeleton: HandSkeleton = HAND

    @classmethod
    def from_config(cls, cfg: SceneConfig = SceneConfig()) -> "Scene":
        cams = dome_cameras(cfg.views, cfg.radius, cfg.focal, cfg.width, cfg.height)
        return cls(tuple(cams), cfg.frames, tuple(cfg.occluders))

    @cached_property
    def rig(self) -> CameraRig:
        return CameraRig(self.cameras)

    def keypoints(self, frame: int) -> np.ndarray:
        return hand_pose(frame, self.frames)

    def pixels(self, frame: int) -> tuple[np.ndarray, np.ndarray]:
        """``(V, 21, 2)`` projections and a ``(V, 21)`` visibility mask."""
        X = self.keypoints(frame)
        rows = np.arange(len(self.cameras))
        uv, depth = self.rig.reproject(rows[:, None], X[None])
        inside = (
            (depth > 0)
            & (uv[..., 0] >= 0)
            & (uv[..., 0] < self.rig.sizes[:, None, 0])
            & (uv[..., 1] >= 0)
            & (uv[..., 1] < self.rig.sizes[:, None, 1])
        )
        if self.occluders:
            inside &= ~segments_blocked(self.rig.centers, X, self.occluders)
        return uv, inside
