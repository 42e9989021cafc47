"""Geometric Monte Carlo estimates of the spurious-triangulation rates.

These simulate cameras and detections directly and count outcomes, so they
serve as independent checks on the closed forms in :mod:`mvboot.planning`.
All estimators are vectorised over trials; consensus search enumerates every
view pair, so results do not depend on RANSAC sampling luck.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .geometry import CameraRig, CameraView, dlt_batch, look_at_camera


@dataclass(frozen=True)
class Estimate:
    successes: int
    trials: int

    @property
    def p(self) -> float:
        return self.successes / self.trials

    @property
    def se(self) -> float:
        """Binomial standard error of ``p``; never below the one-success level."""
        p = max(self.p, 1.0 / self.trials)
        return math.sqrt(p * (1.0 - p) / self.trials)

    def agrees(self, value: float, k: float = 3.0, one_sided: bool = False) -> bool:
        """True when ``value`` is within ``k`` standard errors of the estimate.

        ``one_sided`` treats ``value`` as an upper bound: only estimates
        exceeding it by more than ``k`` standard errors disagree.
        """
        if one_sided:
            return self.p <= value + k * self.se
        return abs(self.p - value) <= k * self.se


def ring_cameras(
    views: int,
    radius: float = 200.0,
    width: int = 368,
    focal: float = 1200.0,
    elevation: float = 12.0,
) -> list[CameraView]:
    """Evenly spaced cameras on a ring, alternating above and below the horizon."""
    cams = []
    for v in range(views):
        az = 2 * math.pi * v / views
        el = math.radians(elevation if v % 2 else -elevation)
        center = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(look_at_camera(v, center, (0.0, 0.0, 0.0), focal, width, width))
    return cams


def rectified_pair(width: int = 368, focal: float = 1000.0, baseline: float = 20.0) -> tuple[CameraView, CameraView]:
    K = np.array([[focal, 0.0, width / 2], [0.0, focal, width / 2], [0.0, 0.0, 1.0]])
    left = CameraView(0, K, np.eye(3), np.zeros(3), width, width)
    right = CameraView(1, K, np.eye(3), np.array([-baseline, 0.0, 0.0]), width, width)
    return left, right


def mc_spurious_pair(
    sigma: float,
    width: int = 368,
    trials: int = 1_000_000,
    seed: int = 0,
    batch: int = 200_000,
) -> Estimate:
    """Fraction of uniform point pairs in a rectified pair that some 3D point explains.

    For each pair a witness point is built that minimises the larger of the
    two reprojection errors over all points in front of the cameras. The
    witness is then projected through both cameras and accepted when both
    errors are at most ``sigma``. Because the witness is minimax-optimal, this
    decides existence exactly.
    """
    left, right = rectified_pair(width)
    rig = CameraRig([left, right])
    f, b = left.K[0, 0], -right.t[0]
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < trials:
        m = min(batch, trials - done)
        x1 = rng.random((m, 2)) * width
        x2 = rng.random((m, 2)) * width
        # right image shifts by -disparity; the best disparity is the horizontal gap, kept positive
        d = np.maximum(x1[:, 0] - x2[:, 0], 1e-9)
        u = (x1[:, 0] + x2[:, 0] + d) / 2
        v = (x1[:, 1] + x2[:, 1]) / 2
        Z = f * b / d
        ray = np.einsum("ij,nj->ni", np.linalg.inv(left.K), np.stack([u, v, np.ones(m)], axis=1))
        X = ray * Z[:, None]
        uv, depth = rig.reproject(np.array([[0, 1]]), X[:, None, :])
        err = np.linalg.norm(uv - np.stack([x1, x2], axis=1), axis=-1)
        ok = np.all(depth > 0, axis=1) & np.all(err <= sigma, axis=1)
        hits += int(ok.sum())
        done += m
    return Estimate(hits, trials)


def _fundamental(Pa: np.ndarray, Pb: np.ndarray) -> np.ndarray:
    """F with ``xb^T F xa = 0``."""
    _, _, vt = np.linalg.svd(Pa)
    C = vt[-1]
    e = Pb @ C
    ex = np.array([[0, -e[2], e[1]], [e[2], 0, -e[0]], [-e[1], e[0], 0]])
    return ex @ Pb @ np.linalg.pinv(Pa)


class PairConsensus:
    """Exhaustive pair-hypothesis consensus search over a fixed rig.

    ``gate`` is a multiple of ``sigma`` applied to the Sampson distance of
    each pair before triangulation. A pair whose two points are both within
    ``sigma`` of some projection has total error at most ``sqrt(2) sigma``,
    which the Sampson distance approximates to first order; the default
    leaves a wide margin and ``None`` disables the gate.
    """

    def __init__(self, cams, sigma: float, gate: float | None = 2.0):
        self.rig = CameraRig(cams)
        self.sigma = float(sigma)
        V = len(self.rig)
        self.pairs = np.array(list(combinations(range(V), 2)), dtype=int)
        self.F = np.stack([_fundamental(self.rig.P[i], self.rig.P[j]) for i, j in self.pairs])
        self.P_flat = self.rig.P.reshape(-1, 4)
        self.Ft = np.ascontiguousarray(np.swapaxes(self.F, 1, 2))
        self.gate = gate

    def sampson(self, uv: np.ndarray) -> np.ndarray:
        """``(T, pairs)`` Sampson distances in pixels."""
        T, V, _ = uv.shape
        h = np.concatenate([uv, np.ones((T, V, 1))], axis=-1)
        hi, hj = h[:, self.pairs[:, 0]], h[:, self.pairs[:, 1]]
        line_j = (self.F @ hi[..., None])[..., 0]
        line_i = (self.Ft @ hj[..., None])[..., 0]
        num = np.abs(np.sum(line_j * hj, axis=-1))
        den = np.sqrt(line_j[..., 0] ** 2 + line_j[..., 1] ** 2 + line_i[..., 0] ** 2 + line_i[..., 1] ** 2)
        return num / den

    def best_counts(self, uv: np.ndarray) -> np.ndarray:
        """Largest inlier count per trial over hypotheses that support their own pair.

        ``uv`` is ``(T, V, 2)``. Trials with no self-consistent pair report 0.
        """
        return self.search(uv)[0]

    def search(self, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Best count, hypothesis point and inlier mask per trial.

        Ties go to the lower pair index. Points are NaN and masks empty where
        no pair is self-consistent.
        """
        T, V, _ = uv.shape
        best = np.zeros(T, dtype=int)
        points = np.full((T, 3), np.nan)
        masks = np.zeros((T, V), dtype=bool)
        if self.gate is None:
            t_idx, p_idx = np.divmod(np.arange(T * len(self.pairs)), len(self.pairs))
        else:
            t_idx, p_idx = np.nonzero(self.sampson(uv) <= self.gate * self.sigma)
        if len(t_idx) == 0:
            return best, points, masks
        a, b = self.pairs[p_idx, 0], self.pairs[p_idx, 1]
        rows = np.stack([a, b], axis=1)
        obs = np.stack([uv[t_idx, a], uv[t_idx, b]], axis=1)
        X, ok = dlt_batch(self.rig.E[rows], self.rig.normalize(rows, obs))
        ph = (np.concatenate([X, np.ones((len(X), 1))], axis=1) @ self.P_flat.T).reshape(-1, V, 3)
        with np.errstate(divide="ignore", invalid="ignore"):
            proj = ph[..., :2] / ph[..., 2:3]
            inl = (ph[..., 2] > 0) & (np.sum((proj - uv[t_idx]) ** 2, axis=-1) <= self.sigma**2)
        k = np.arange(len(a))
        counts = np.where(ok & inl[k, a] & inl[k, b], inl.sum(axis=1), 0)
        order = np.lexsort((p_idx, -counts, t_idx))
        first = order[np.unique(t_idx[order], return_index=True)[1]]
        chosen = first[counts[first] > 0]
        best[t_idx[first]] = counts[first]
        points[t_idx[chosen]] = X[chosen]
        masks[t_idx[chosen]] = inl[chosen]
        return best, points, masks


def _uniform(rng: np.random.Generator, shape, width: float) -> np.ndarray:
    return rng.random(shape + (2,)) * width


def mc_false_triangulation(
    views: int,
    min_inliers: int,
    sigma: float,
    width: int = 368,
    trials: int = 100_000,
    seed: int = 0,
    batch: int = 2_000,
    cams=None,
) -> Estimate:
    """Fraction of all-uniform detection sets whose best consensus reaches ``min_inliers``."""
    search = PairConsensus(cams or ring_cameras(views, width=width), sigma)
    rng = np.random.default_rng(seed)
    hits = done = 0
    while done < trials:
        m = min(batch, trials - done)
        best = search.best_counts(_uniform(rng, (m, views), width))
        hits += int(np.sum(best >= min_inliers))
        done += m
    return Estimate(hits, trials)


@dataclass(frozen=True)
class RateEstimate:
    tp: Estimate
    fp: Estimate


def mc_point_rates(
    views: int,
    min_inliers: int,
    sigma: float,
    pck: float,
    width: int = 368,
    trials: int = 100_000,
    seed: int = 0,
    noise: float = 1.0,
    volume: float = 10.0,
    batch: int = 2_000,
    cams=None,
) -> RateEstimate:
    """Closed-loop true/false triangulation rates for one keypoint.

    Each trial places a point uniformly in a ball of radius ``volume`` at the
    rig centre; every view sees it correctly with probability ``pck`` (with
    Gaussian pixel jitter ``noise``) or reports a uniform point. When the best
    consensus reaches ``min_inliers`` the trial is a true positive if the
    consensus rests on at least two correct detections (which pins it to the
    true point) and a false positive otherwise.
    """
    search = PairConsensus(cams or ring_cameras(views, width=width), sigma)
    rig = search.rig
    rng = np.random.default_rng(seed)
    tp = fp = done = 0
    while done < trials:
        m = min(batch, trials - done)
        direction = rng.standard_normal((m, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        X = direction * (volume * rng.random(m) ** (1 / 3))[:, None]
        truth, _ = rig.reproject(np.arange(views)[None, :], X[:, None, :])
        correct = rng.random((m, views)) < pck
        jitter = rng.standard_normal((m, views, 2)) * noise
        wrong = _uniform(rng, (m, views), width)
        uv = np.where(correct[..., None], truth + jitter, wrong)
        best, _, inliers = search.search(uv)
        accepted = best >= min_inliers
        near = np.sum(inliers & correct, axis=1) >= 2
        tp += int(np.sum(accepted & near))
        fp += int(np.sum(accepted & ~near))
        done += m
    return RateEstimate(Estimate(tp, trials), Estimate(fp, trials))
