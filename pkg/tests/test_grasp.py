from __future__ import annotations

import json
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from oracles import brute_ball, fps_violations, greedy_nms
from mgrecon.errors import DegenerateRegion, EmptyCloud
from mgrecon.grasp import (
    FileScorer,
    GraspConfig,
    GraspPose,
    RegionProposal,
    ball_query,
    fps,
    generate_grasps,
    load_grasps,
    nms_se3,
    save_grasps,
    score_region,
)


def test_fps_unit_square():
    sq = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    assert fps(sq, 4, 0) == [0, 3, 1, 2]
    assert fps(sq, 10, 0) == [0, 3, 1, 2]


@pytest.mark.parametrize("seed", range(4))
def test_fps_picks_are_maximal(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(300, 3))
    if seed % 2:
        # integer lattice points produce many exact ties
        pts = np.round(pts * 4)
    picks = fps(pts, 60)
    assert fps_violations(pts, picks) == []


def test_fps_errors():
    with pytest.raises(EmptyCloud):
        fps(np.zeros((0, 3)), 3)
    with pytest.raises(ValueError):
        fps(np.zeros((3, 3)), 0)


def test_ball_query_matches_brute_force():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-0.1, 0.1, size=(1000, 3))
    for _ in range(50):
        c = pts[rng.integers(len(pts))]
        r = rng.uniform(0.01, 0.06)
        assert np.array_equal(ball_query(pts, c, r), brute_ball(pts, c, r))
        assert np.array_equal(ball_query(pts, c, r, cap=7), brute_ball(pts, c, r, 7))


def test_ball_query_boundary_is_excluded():
    pts = np.array([[0, 0, 0], [0.05, 0, 0], [0.0499, 0, 0]])
    assert ball_query(pts, pts[0], 0.05).tolist() == [0, 2]


def test_plate_region_closes_across_thickness():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-0.03, 0.03, 400), rng.uniform(-0.03, 0.03, 400), rng.uniform(0, 0.01, 400)])
    grasps = score_region(RegionProposal(np.zeros(3), np.arange(400), pts))
    assert len(grasps) == 2
    for g in grasps:
        assert abs(abs(g.closing_axis[2]) - 1) < 1e-3
        assert abs(g.approach[2]) < 1e-2
        assert g.width == pytest.approx(0.01, abs=5e-4)
        assert 0.8 < g.score <= 1.0
        R = g.rotation
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-12) and np.linalg.det(R) == pytest.approx(1.0)


def test_sphere_region_is_too_wide():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(500, 3))
    pts = 0.06 * d / np.linalg.norm(d, axis=1, keepdims=True)
    assert score_region(RegionProposal(np.zeros(3), np.arange(500), pts)) == []


def test_degenerate_regions():
    pts = np.zeros((20, 3))
    pts[:, 0] = np.linspace(0, 0.02, 20)
    with pytest.raises(DegenerateRegion):
        score_region(RegionProposal(np.zeros(3), np.arange(20), pts))
    with pytest.raises(DegenerateRegion):
        score_region(RegionProposal(np.zeros(3), np.arange(3), np.eye(3)))


def random_grasps(rng, n):
    bases = Rotation.random(4, random_state=rng)
    out = []
    for _ in range(n):
        # clustered poses and coarse scores, so suppression and ties both occur
        R = bases[int(rng.integers(4))] * Rotation.from_rotvec(rng.normal(scale=0.3, size=3))
        out.append(GraspPose(rng.uniform(-0.03, 0.03, 3), R.as_euler("xyz"), 0.03, round(rng.uniform(), 1)))
    return out


def test_nms_matches_greedy_oracle():
    rng = np.random.default_rng(9)
    for _ in range(5):
        gs = random_grasps(rng, 200)
        ts = [g.t for g in gs]
        es = [g.euler_xyz for g in gs]
        sc = [g.score for g in gs]
        for keep in (None, 10):
            want = greedy_nms(ts, es, sc, 0.02, math.radians(30), keep)
            got = nms_se3(gs, 0.02, math.radians(30), keep)
            assert [id(g) for g in got] == [id(gs[k]) for k in want]


def test_nms_needs_both_conditions():
    a = GraspPose([0, 0, 0], [0, 0, 0], 0.02, 0.9)
    near_rotated = GraspPose([0.001, 0, 0], [0, 0, math.radians(45)], 0.02, 0.8)
    far_same = GraspPose([0.1, 0, 0], [0, 0, 0], 0.02, 0.7)
    twin = GraspPose([0.001, 0, 0], [0, 0, math.radians(10)], 0.02, 0.6)
    assert nms_se3([a, near_rotated, far_same, twin]) == [a, near_rotated, far_same]
    with pytest.raises(ValueError):
        nms_se3([a], delta_t=0)


def test_euler_round_trip_and_range():
    rng = np.random.default_rng(2)
    for _ in range(200):
        R = Rotation.random(random_state=rng).as_matrix()
        g = GraspPose.from_matrix(np.zeros(3), R, 0.01, 0.5)
        assert np.all(g.euler_xyz > -np.pi) and np.all(g.euler_xyz <= np.pi)
        assert np.allclose(g.rotation, R, atol=1e-12)
    g = GraspPose(np.zeros(3), [-np.pi, 0, 0], 0.01, 0.5)
    assert g.euler_xyz[0] == pytest.approx(np.pi)


def test_grasps_json_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    gs = random_grasps(rng, 5)
    save_grasps(tmp_path / "g.json", gs)
    back = load_grasps(tmp_path / "g.json")
    for a, b in zip(gs, back):
        assert np.array_equal(a.t, b.t) and np.array_equal(a.euler_xyz, b.euler_xyz)
        assert a.score == b.score and a.width == b.width


def box_cloud(rng, n=3000):
    half = np.array([0.04, 0.03, 0.015])
    pts = rng.uniform(-half, half, size=(n, 3))
    face = rng.integers(0, 3, n)
    sign = rng.choice([-1.0, 1.0], n)
    pts[np.arange(n), face] = sign * half[face]
    return pts


def test_generate_grasps_on_box():
    rng = np.random.default_rng(4)
    pts = box_cloud(rng)
    grasps, regions = generate_grasps(pts, GraspConfig(n_c=40))
    assert len(regions) == 40
    assert 0 < len(grasps) <= 100
    scores = [g.score for g in grasps]
    assert scores == sorted(scores, reverse=True)
    threaded, _ = generate_grasps(pts, GraspConfig(n_c=40), threads=4)
    assert [g.to_dict() for g in threaded] == [g.to_dict() for g in grasps]


def test_file_scorer(tmp_path):
    path = tmp_path / "pred.json"
    path.write_text(json.dumps({"regions": [[{"dt": [0, 0, 0.01], "euler_xyz": [0, 0, 0], "width": 0.02, "score": 0.7}]]}))
    scorer = FileScorer(path)
    region = RegionProposal(np.array([1.0, 2, 3]), np.arange(20), np.zeros((20, 3)))
    (g,) = scorer(region, 0)
    assert np.allclose(g.t, [1, 2, 3.01]) and g.score == 0.7
    assert scorer(region, 5) == []
