import math

import numpy as np
import pytest

from mvboot.montecarlo import (
    Estimate,
    PairConsensus,
    mc_false_triangulation,
    mc_point_rates,
    mc_spurious_pair,
    rectified_pair,
    ring_cameras,
)
from mvboot.geometry import project
from mvboot.planning import SetupSpec, false_triangulation_prob, spurious_pair_prob
from mvboot.triangulation import Detection2D, RansacConfig, ransac_triangulate_point


def test_estimate_arithmetic():
    e = Estimate(25, 100)
    assert e.p == 0.25
    assert e.se == pytest.approx(math.sqrt(0.25 * 0.75 / 100))
    assert e.agrees(0.25 + 2.9 * e.se) and not e.agrees(0.25 + 3.1 * e.se)
    assert e.agrees(0.0, one_sided=True) is False
    assert e.agrees(0.5, one_sided=True)
    assert Estimate(0, 1000).se > 0


def test_ring_cameras_see_centre():
    for cam in ring_cameras(9):
        assert np.allclose(project(cam, (0.0, 0.0, 0.0)), (184.0, 184.0))
    left, right = rectified_pair()
    assert np.allclose(left.R, right.R)


def test_gate_never_drops_a_winner(rng):
    cams = ring_cameras(7)
    gated = PairConsensus(cams, 4.0)
    full = PairConsensus(cams, 4.0, gate=None)
    # mix of uniform points and near-consistent sets so both branches get exercised
    uv = rng.random((400, 7, 2)) * 368
    X = rng.standard_normal((200, 3)) * 5
    for i in range(200):
        for v, c in enumerate(cams):
            if rng.random() < 0.6:
                uv[i, v] = project(c, X[i]) + rng.standard_normal(2)
    a, b = gated.best_counts(uv), full.best_counts(uv)
    assert np.array_equal(a, b)


def test_consensus_matches_full_ransac(rng):
    """The vectorised search decides acceptance like the real triangulator."""
    V, n = 6, 3
    cams = ring_cameras(V)
    search = PairConsensus(cams, 4.0)
    cfg = RansacConfig(min_inliers=n, group_fingers=False)
    agree = 0
    trials = 150
    for t in range(trials):
        X = rng.standard_normal(3) * 5
        uv = np.array([project(c, X) + rng.standard_normal(2) if rng.random() < 0.4 else rng.random(2) * 368 for c in cams])
        best = search.best_counts(uv[None])[0]
        dets = [Detection2D(v, 0, tuple(uv[v]), 1.0) for v in range(V)]
        res = ransac_triangulate_point(dets, cams, cfg, frame=t)
        agree += (best >= n) == res.valid
    assert agree / trials >= 0.95


def test_pair_mc_near_closed_form():
    est = mc_spurious_pair(4.0, trials=200_000, seed=3)
    assert est.agrees(spurious_pair_prob(SetupSpec(2, 2, 4.0, 368.0, 0.5)))


def test_false_triangulation_small_run():
    spec = SetupSpec(5, 3, 4.0, 368.0, 0.5)
    est = mc_false_triangulation(5, 3, 4.0, trials=20_000, seed=1)
    assert est.agrees(false_triangulation_prob(spec), one_sided=True)
    assert mc_false_triangulation(5, 3, 4.0, trials=2_000, seed=1) == mc_false_triangulation(5, 3, 4.0, trials=2_000, seed=1)


def test_point_rates_extremes():
    perfect = mc_point_rates(5, 3, 4.0, 1.0, trials=2_000, seed=0)
    assert perfect.tp.p == 1.0 and perfect.fp.p == 0.0
    blind = mc_point_rates(5, 3, 4.0, 0.0, trials=2_000, seed=0)
    assert blind.tp.p == 0.0
