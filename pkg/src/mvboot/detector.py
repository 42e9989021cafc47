"""Synthetic keypoint detector with a PCK-parameterised error model.

A detection is correct with probability ``pck`` (truth plus small Gaussian
jitter) and otherwise lands uniformly at random in the image. The trainer is
a rule object mapping added label counts to new per-keypoint PCKs; it stands
in for retraining a network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .triangulation import Detection2D

# Rayleigh quantile: P(|N(0, s I)| <= q s) = 0.99
_RAYLEIGH_Q99 = math.sqrt(2.0 * math.log(100.0))


def _interval(value) -> tuple[float, float]:
    lo, hi = (float(v) for v in value)
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"confidence interval {value} must satisfy 0 <= lo <= hi <= 1")
    return lo, hi


@dataclass(frozen=True)
class DetectorModel:
    pck: float | tuple[float, ...] = 0.6
    sigma_pck: float = 10.0
    correct_noise_sigma: float = 1.0
    confidence_correct: tuple[float, float] = (0.5, 1.0)
    confidence_wrong: tuple[float, float] = (0.0, 0.6)
    width: float = 368.0
    height: float = 368.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        pck = np.atleast_1d(np.asarray(self.pck, dtype=float))
        if np.any(pck < 0) or np.any(pck > 1):
            raise ValueError("pck must lie in [0, 1]")
        if self.sigma_pck <= 0 or self.correct_noise_sigma < 0:
            raise ValueError("sigma_pck must be positive and correct_noise_sigma non-negative")
        if self.correct_noise_sigma * _RAYLEIGH_Q99 > self.sigma_pck:
            raise ValueError(
                "correct_noise_sigma too large: fewer than 99% of correct detections "
                f"would land within sigma_pck={self.sigma_pck}"
            )
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        object.__setattr__(self, "confidence_correct", _interval(self.confidence_correct))
        object.__setattr__(self, "confidence_wrong", _interval(self.confidence_wrong))
        if pck.size > 1:
            object.__setattr__(self, "pck", tuple(float(v) for v in pck))

    def pck_vector(self, keypoints: int) -> np.ndarray:
        pck = np.atleast_1d(np.asarray(self.pck, dtype=float))
        if pck.size == 1:
            return np.full(keypoints, pck[0])
        if pck.size != keypoints:
            raise ValueError(f"pck has {pck.size} entries for {keypoints} keypoints")
        return pck


def detect(
    model: DetectorModel,
    truth: np.ndarray,
    frame: int,
    view: int,
    visible: Sequence[bool] | None = None,
) -> list[Detection2D]:
    """Simulate one detector pass over a single view.

    ``truth`` holds the ``(P, 2)`` true keypoint pixels. Keypoints flagged as
    not visible always receive a wrong (uniform) detection. The random stream
    is keyed on ``(rng_seed, frame, view)`` and keypoint ``p`` always consumes
    the same slots, so each detection is a fixed function of its indices.
    """
    truth = np.asarray(truth, dtype=float).reshape(-1, 2)
    P = len(truth)
    rng = np.random.default_rng([model.rng_seed & 0xFFFFFFFF, frame & 0xFFFFFFFF, view & 0xFFFFFFFF])
    u = rng.random(P)
    jitter = rng.standard_normal((P, 2)) * model.correct_noise_sigma
    wrong = rng.random((P, 2)) * [model.width, model.height]
    cu = rng.random(P)

    correct = u < model.pck_vector(P)
    if visible is not None:
        correct &= np.asarray(visible, dtype=bool)
    lo_c, hi_c = model.confidence_correct
    lo_w, hi_w = model.confidence_wrong
    loc = np.where(correct[:, None], truth + jitter, wrong)
    conf = np.where(correct, lo_c + (hi_c - lo_c) * cu, lo_w + (hi_w - lo_w) * cu)
    return [Detection2D(view, p, (loc[p, 0], loc[p, 1]), float(conf[p])) for p in range(P)]


@dataclass(frozen=True)
class DetectorQualityState:
    pck_per_keypoint: tuple[float, ...]
    training_set_size: int = 0

    def __post_init__(self) -> None:
        pck = tuple(float(v) for v in self.pck_per_keypoint)
        if any(not 0.0 <= v <= 1.0 for v in pck):
            raise ValueError("per-keypoint PCK must lie in [0, 1]")
        if self.training_set_size < 0:
            raise ValueError("training_set_size must be non-negative")
        object.__setattr__(self, "pck_per_keypoint", pck)

    @classmethod
    def uniform(cls, pck: float, keypoints: int = 21) -> "DetectorQualityState":
        return cls((pck,) * keypoints)

    @property
    def mean_pck(self) -> float:
        return float(np.mean(self.pck_per_keypoint))


@dataclass(frozen=True)
class SaturatingRule:
    """``pck' = 1 - (1 - pck) * exp(-labels / kappa)``."""

    kappa: float = 1000.0

    def __post_init__(self) -> None:
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")

    def __call__(self, pck: np.ndarray, new_labels: int) -> np.ndarray:
        return 1.0 - (1.0 - pck) * math.exp(-new_labels / self.kappa)


QualityRule = Callable[[np.ndarray, int], np.ndarray]


def trainer_update(
    state: DetectorQualityState,
    new_labels: int,
    rule: QualityRule = SaturatingRule(),
) -> DetectorQualityState:
    if new_labels < 0:
        raise ValueError("new_labels must be non-negative")
    if new_labels == 0:
        return state
    old = np.asarray(state.pck_per_keypoint)
    new = np.clip(rule(old, new_labels), 0.0, 1.0)
    if np.any(new < old):
        raise ValueError("quality rule decreased a keypoint's PCK")
    return replace(
        state,
        pck_per_keypoint=tuple(float(v) for v in new),
        training_set_size=state.training_set_size + new_labels,
    )
