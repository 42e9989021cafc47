"""Closed-form false-positive analysis for multiview triangulation.

Answers "how many cameras and how good a detector?" from a handful of
binomial expressions. Spurious detections are modelled as uniform points in
a ``w x w`` image; a spurious pair triangulates within ``sigma`` with
probability ``2 sigma / w`` and each further view supports it with
probability at most ``pi sigma^2 / w^2``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence


class DomainError(ValueError):
    """Argument outside the domain of a probability function."""


def _logsumexp(values: Sequence[float]) -> float:
    m = max(values)
    if m == -math.inf:
        return -math.inf
    return m + math.log(math.fsum(math.exp(v - m) for v in values))


def _log_pmf(N: int, p: float, l: int) -> float:
    return (
        math.lgamma(N + 1)
        - math.lgamma(l + 1)
        - math.lgamma(N - l + 1)
        + l * math.log(p)
        + (N - l) * math.log1p(-p)
    )


def _check(N: int, p: float, k: int) -> None:
    if N < 0 or int(N) != N:
        raise DomainError(f"N must be a non-negative integer, got {N}")
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise DomainError(f"p must lie in [0, 1], got {p}")
    if not 0 <= k <= N + 1 or int(k) != k:
        raise DomainError(f"k must be an integer in [0, N + 1], got {k}")


def _tails(N: int, p: float, k: int) -> tuple[float, float]:
    """``(Pr(X >= k), Pr(X < k))`` for ``X ~ B(N, p)``, each summed directly when small."""
    if k == 0:
        return 1.0, 0.0
    if k == N + 1:
        return 0.0, 1.0
    if p == 0.0:
        return 0.0, 1.0
    if p == 1.0:
        return 1.0, 0.0
    # sum whichever side holds the smaller mass; the other is its complement
    if k > N * p:
        upper = math.exp(_logsumexp([_log_pmf(N, p, l) for l in range(k, N + 1)]))
        upper = min(upper, 1.0)
        lower = math.exp(_logsumexp([_log_pmf(N, p, l) for l in range(0, k)])) if upper > 0.5 else 1.0 - upper
        return upper, min(lower, 1.0)
    lower = min(math.exp(_logsumexp([_log_pmf(N, p, l) for l in range(0, k)])), 1.0)
    upper = math.exp(_logsumexp([_log_pmf(N, p, l) for l in range(k, N + 1)])) if lower > 0.5 else 1.0 - lower
    return min(upper, 1.0), lower


def binom_tail(N: int, p: float, k: int) -> float:
    """``Pr(X >= k)`` for ``X ~ B(N, p)``, evaluated in log space."""
    _check(N, p, k)
    return _tails(int(N), float(p), int(k))[0]


def binom_below(N: int, p: float, k: int) -> float:
    """``Pr(X < k)``, summed directly rather than as ``1 - binom_tail``."""
    _check(N, p, k)
    return _tails(int(N), float(p), int(k))[1]


@dataclass(frozen=True)
class SetupSpec:
    views: int
    min_inliers: int
    sigma: float
    width: float
    pck: float
    keypoints: int = 21

    def __post_init__(self) -> None:
        if self.views < 2:
            raise DomainError("need at least 2 views")
        if not 2 <= self.min_inliers <= self.views:
            raise DomainError(f"min_inliers must lie in [2, {self.views}], got {self.min_inliers}")
        if not 0 <= self.sigma < self.width:
            raise DomainError("sigma must satisfy 0 <= sigma < width")
        if not 0.0 <= self.pck <= 1.0:
            raise DomainError("pck must lie in [0, 1]")
        if self.keypoints < 1:
            raise DomainError("need at least one keypoint")


@dataclass(frozen=True)
class PlanningReport:
    q2: float
    p_rest: float
    qn: float
    ft_n: float
    tp_point: float
    fp_point: float
    tp_frame: float
    fp_frame: float
    fdr: float


def spurious_pair_prob(spec: SetupSpec) -> float:
    # capped at 1: beyond sigma = w / 2 the band covers the whole image
    return min(2.0 * spec.sigma / spec.width, 1.0)


def third_view_prob(spec: SetupSpec) -> float:
    return min(math.pi * spec.sigma**2 / spec.width**2, 1.0)


def spurious_support_prob(spec: SetupSpec) -> tuple[float, float]:
    """``(p_rest, qn)``: support by ``n - 2`` further views, and the pair rate times it."""
    if spec.min_inliers == 2:
        p_rest = 1.0
    else:
        p_rest = binom_tail(spec.views - 2, third_view_prob(spec), spec.min_inliers - 2)
    return p_rest, spurious_pair_prob(spec) * p_rest


def false_triangulation_prob(spec: SetupSpec) -> float:
    """Chance that some view pair yields a spurious point with ``n`` supporters."""
    qn = spurious_support_prob(spec)[1]
    if qn >= 1.0:
        return 1.0
    return -math.expm1(math.comb(spec.views, 2) * math.log1p(-qn))


def point_rates(spec: SetupSpec) -> tuple[float, float]:
    tp = binom_tail(spec.views, spec.pck, spec.min_inliers)
    fp = binom_below(spec.views, spec.pck, spec.min_inliers) * false_triangulation_prob(spec)
    return tp, fp


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def frame_rates_from_point(tp_point: float, fp_point: float, keypoints: int) -> tuple[float, float, float]:
    """Whole-hand rates: all keypoints true, or all accepted with at least one false."""
    P = keypoints
    ltp, lfp = _log(tp_point), _log(fp_point)
    tp = math.exp(P * ltp) if ltp > -math.inf else 0.0
    if lfp == -math.inf:
        fp = 0.0
    else:
        # skip 0 * log(0) when every keypoint is false
        terms = [
            math.log(math.comb(P, k)) + ((P - k) * ltp if k < P else 0.0) + k * lfp
            for k in range(1, P + 1)
            if not (P - k > 0 and ltp == -math.inf)
        ]
        fp = min(math.exp(_logsumexp(terms)), 1.0)
    fdr = fp / (tp + fp) if tp + fp > 0 else 0.0
    return tp, fp, fdr


def frame_rates(spec: SetupSpec) -> tuple[float, float, float]:
    return frame_rates_from_point(*point_rates(spec), spec.keypoints)


def plan(spec: SetupSpec) -> PlanningReport:
    p_rest, qn = spurious_support_prob(spec)
    tp_p, fp_p = point_rates(spec)
    tp, fp, fdr = frame_rates_from_point(tp_p, fp_p, spec.keypoints)
    return PlanningReport(
        q2=spurious_pair_prob(spec),
        p_rest=p_rest,
        qn=qn,
        ft_n=false_triangulation_prob(spec),
        tp_point=tp_p,
        fp_point=fp_p,
        tp_frame=tp,
        fp_frame=fp,
        fdr=fdr,
    )


def plan_grid(specs: Iterable[SetupSpec]) -> list[tuple[SetupSpec, PlanningReport]]:
    specs = list(specs)
    if not specs:
        raise DomainError("empty planning grid")
    return [(s, plan(s)) for s in specs]


def make_grid(
    views: Sequence[int],
    inliers: Sequence[int],
    sigmas: Sequence[float] = (4.0,),
    widths: Sequence[float] = (368.0,),
    pcks: Sequence[float] = (0.5,),
    keypoints: Sequence[int] = (21,),
) -> list[SetupSpec]:
    """Cartesian grid of setups; combinations with ``n > V`` are skipped."""
    return [
        SetupSpec(V, n, s, w, p, P)
        for V, n, s, w, p, P in itertools.product(views, inliers, sigmas, widths, pcks, keypoints)
        if n <= V
    ]


PRESET_PCKS = tuple(round(0.05 * i, 2) for i in range(1, 21))


def preset_grid(views: Sequence[int] = (5, 31), max_inliers: int = 8) -> list[SetupSpec]:
    """Curve families for small and large camera rigs at the detector crop size."""
    return make_grid(views, range(2, max_inliers + 1), (4.0,), (368.0,), PRESET_PCKS, (21,))


CSV_COLUMNS = ("V", "n", "sigma", "w", "pck", "P", "q2", "qn", "ft", "tp_point", "fp_point", "tp", "fp", "fdr")


def table_row(spec: SetupSpec, report: PlanningReport) -> dict[str, float]:
    return {
        "V": spec.views,
        "n": spec.min_inliers,
        "sigma": spec.sigma,
        "w": spec.width,
        "pck": spec.pck,
        "P": spec.keypoints,
        "q2": report.q2,
        "qn": report.qn,
        "ft": report.ft_n,
        "tp_point": report.tp_point,
        "fp_point": report.fp_point,
        "tp": report.tp_frame,
        "fp": report.fp_frame,
        "fdr": report.fdr,
    }


def trend_violations(rows: Sequence[tuple[SetupSpec, PlanningReport]]) -> dict[str, list[str]]:
    """Scan a grid for breaks in the expected monotone trends.

    Keys: ``tp_vs_pck``, ``tp_vs_views``, ``fp_vs_n``, ``fdr_vs_n``, ``fdr_vs_pck``,
    ``ft_vs_n``, ``large_rig_dominates``. Each maps to human-readable
    descriptions of the offending neighbour pairs (empty when the trend holds).
    """
    out: dict[str, list[str]] = {
        k: []
        for k in ("tp_vs_pck", "tp_vs_views", "fp_vs_n", "fdr_vs_n", "fdr_vs_pck", "ft_vs_n", "large_rig_dominates")
    }
    table = {(s.views, s.min_inliers, s.sigma, s.width, s.pck, s.keypoints): r for s, r in rows}

    def neighbours(axis: int):
        keys = sorted(table)
        groups: dict[tuple, list[tuple]] = {}
        for k in keys:
            groups.setdefault(k[:axis] + k[axis + 1 :], []).append(k)
        for seq in groups.values():
            seq.sort(key=lambda k: k[axis])
            yield from zip(seq[:-1], seq[1:])

    def fmt(a, b, name, va, vb):
        return f"{name}: {a} -> {b}: {va!r} -> {vb!r}"

    for a, b in neighbours(4):  # along pck
        ra, rb = table[a], table[b]
        if rb.tp_frame < ra.tp_frame:
            out["tp_vs_pck"].append(fmt(a, b, "tp", ra.tp_frame, rb.tp_frame))
        if rb.fdr > ra.fdr:
            out["fdr_vs_pck"].append(fmt(a, b, "fdr", ra.fdr, rb.fdr))
    for a, b in neighbours(0):  # along views
        ra, rb = table[a], table[b]
        if rb.tp_frame < ra.tp_frame:
            out["tp_vs_views"].append(fmt(a, b, "tp", ra.tp_frame, rb.tp_frame))
    for a, b in neighbours(1):  # along n
        ra, rb = table[a], table[b]
        if rb.fp_frame > ra.fp_frame:
            out["fp_vs_n"].append(fmt(a, b, "fp", ra.fp_frame, rb.fp_frame))
        if rb.fdr > ra.fdr:
            out["fdr_vs_n"].append(fmt(a, b, "fdr", ra.fdr, rb.fdr))
        if rb.ft_n > ra.ft_n:
            out["ft_vs_n"].append(fmt(a, b, "ft", ra.ft_n, rb.ft_n))
    small = min((k[0] for k in table), default=None)
    large = max((k[0] for k in table), default=None)
    if small is not None and small != large:
        for k, r in table.items():
            if k[0] != small:
                continue
            other = table.get((large,) + k[1:])
            if other is not None and other.tp_frame < r.tp_frame:
                out["large_rig_dominates"].append(fmt(k, (large,) + k[1:], "tp", r.tp_frame, other.tp_frame))
    return out


def report_fields() -> tuple[str, ...]:
    return tuple(f.name for f in fields(PlanningReport))


def as_dict(report: PlanningReport) -> dict[str, float]:
    return asdict(report)
