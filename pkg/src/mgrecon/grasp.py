"""Region-level grasp generation on a fused cloud.

Region centres come from furthest point sampling, each region is a ball
query around its centre, a scorer turns a region into candidate grasps and
SE(3) non-maximum suppression keeps the best distinct ones.

The scorer shipped here is a geometric stand-in for a learned local grasp
decoder: it fits a local plane and proposes parallel-jaw grasps that close
across the plane normal. A learned model's predictions can be plugged in
through :class:`FileScorer`.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import rotation_angle
from .errors import DegenerateRegion, EmptyCloud
from .spatial import SpatialGrid

W_MAX = 0.085
W_MIN = 0.004
BALL_RADIUS = 0.05
N_PTS_MIN = 16


def _wrap_angles(e):
    e = np.asarray(e, dtype=np.float64)
    return np.where(e <= -np.pi, e + 2 * np.pi, e)


@dataclass
class GraspPose:
    t: np.ndarray
    euler_xyz: np.ndarray  # extrinsic X-Y-Z, radians
    width: float
    score: float

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.euler_xyz = _wrap_angles(np.asarray(self.euler_xyz, dtype=np.float64).reshape(3))
        self.width = float(self.width)
        self.score = float(self.score)

    @classmethod
    def from_matrix(cls, t, R, width, score) -> GraspPose:
        return cls(t, Rotation.from_matrix(R).as_euler("xyz"), width, score)

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_euler("xyz", self.euler_xyz).as_matrix()

    @property
    def approach(self) -> np.ndarray:
        return self.rotation[:, 0]

    @property
    def closing_axis(self) -> np.ndarray:
        return self.rotation[:, 1]

    def to_dict(self) -> dict:
        return {
            "t": [float(x) for x in self.t],
            "euler_xyz": [float(x) for x in self.euler_xyz],
            "width": self.width,
            "score": self.score,
        }

    @classmethod
    def from_dict(cls, d) -> GraspPose:
        return cls(d["t"], d["euler_xyz"], d["width"], d["score"])


@dataclass
class RegionProposal:
    center: np.ndarray
    indices: np.ndarray
    points: np.ndarray

    @property
    def dt(self) -> np.ndarray:
        return self.points.mean(axis=0) - self.center


def fps(points, k: int, seed_index: int = 0) -> list[int]:
    """Furthest point sampling; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        raise EmptyCloud("cannot sample an empty cloud")
    if k < 1:
        raise ValueError("k must be at least 1")
    k = min(k, n)
    picked = [int(seed_index)]
    d2 = np.sum((points - points[seed_index]) ** 2, axis=1)
    d2[seed_index] = -1.0
    for _ in range(k - 1):
        nxt = int(np.argmax(d2))
        picked.append(nxt)
        d2 = np.minimum(d2, np.sum((points - points[nxt]) ** 2, axis=1))
        d2[picked] = -1.0
    return picked


def ball_query(points, center, radius: float, cap: int | None = None, grid: SpatialGrid | None = None) -> np.ndarray:
    """Indices of points strictly within ``radius`` of ``center``, ascending, at most ``cap``."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    if grid is None:
        grid = SpatialGrid(points, radius)
    idx = grid.query(center, radius)
    return idx if cap is None else idx[:cap]


def _orient(v, prefer_down=False):
    if prefer_down and abs(v[2]) > 1e-12:
        return -v if v[2] > 0 else v
    return -v if v[np.argmax(np.abs(v))] < 0 else v


def score_region(region: RegionProposal, w_max: float = W_MAX, n_pts_min: int = N_PTS_MIN, w_min: float = W_MIN) -> list[GraspPose]:
    """Geometric stand-in scorer.

    The least-squares plane of the region gives a normal (smallest principal
    axis) and two tangents. Each tangent yields one proposal that approaches
    along it and closes across the normal; the opening is the region's extent
    along the normal. Score is ``(1 - width / w_max) * flatness`` clamped to
    [0, 1], with ``flatness = 1 - lambda_min / lambda_mid``; openings below
    ``w_min`` (single-sided surfaces) score 0 and openings above ``w_max`` are
    not proposed.
    """
    X = np.asarray(region.points, dtype=np.float64)
    if len(X) < n_pts_min:
        raise DegenerateRegion(f"{len(X)} points, need {n_pts_min}")
    centroid = X.mean(axis=0)
    cov = np.cov((X - centroid).T, bias=True)
    lam, vec = np.linalg.eigh(cov)
    if lam[1] <= 1e-12 * max(lam[2], 1e-300):
        raise DegenerateRegion("region covariance has rank < 2")
    normal = _orient(vec[:, 0])
    along = (X - centroid) @ normal
    width = float(along.max() - along.min())
    if width > w_max:
        return []
    flatness = 1.0 - lam[0] / lam[1]
    score = 0.0 if width < w_min else float(np.clip((1.0 - width / w_max) * flatness, 0.0, 1.0))
    grasps = []
    for k in (2, 1):
        approach = _orient(vec[:, k], prefer_down=True)
        R = np.column_stack([approach, normal, np.cross(approach, normal)])
        grasps.append(GraspPose.from_matrix(centroid, R, width, score))
    return grasps


class Scorer(Protocol):
    def __call__(self, region: RegionProposal, index: int) -> list[GraspPose]: ...


class GeometricScorer:
    def __init__(self, w_max: float = W_MAX, n_pts_min: int = N_PTS_MIN):
        self.w_max = w_max
        self.n_pts_min = n_pts_min

    def __call__(self, region: RegionProposal, index: int) -> list[GraspPose]:
        return score_region(region, self.w_max, self.n_pts_min)


class FileScorer:
    """Grasps predicted offline, one list per region index.

    File format: ``{"regions": [[{"dt": [...], "euler_xyz": [...], "width": w,
    "score": s}, ...], ...]}`` where ``dt`` is relative to the region centre.
    """

    def __init__(self, path):
        data = json.loads(Path(path).read_text())
        self.regions = data["regions"]

    def __call__(self, region: RegionProposal, index: int) -> list[GraspPose]:
        if index >= len(self.regions):
            return []
        return [
            GraspPose(region.center + np.asarray(g["dt"]), g["euler_xyz"], g["width"], g["score"])
            for g in self.regions[index]
        ]


def nms_se3(grasps: Sequence[GraspPose], delta_t: float = 0.02, delta_r: float = math.radians(30), keep: int | None = None) -> list[GraspPose]:
    """Greedy suppression of grasps close in both translation and rotation."""
    if not (delta_t > 0 and delta_r > 0):
        raise ValueError("NMS thresholds must be positive")
    order = sorted(range(len(grasps)), key=lambda k: (-grasps[k].score, k))
    kept: list[GraspPose] = []
    kept_t, kept_R = [], []
    for k in order:
        g = grasps[k]
        R = g.rotation
        suppressed = False
        for t2, R2 in zip(kept_t, kept_R):
            if np.linalg.norm(g.t - t2) < delta_t and rotation_angle(R, R2) < delta_r:
                suppressed = True
                break
        if not suppressed:
            kept.append(g)
            kept_t.append(g.t)
            kept_R.append(R)
            if keep is not None and len(kept) >= keep:
                break
    return kept


@dataclass
class GraspConfig:
    n_c: int = 500
    radius: float = BALL_RADIUS
    cap: int = 1024
    n_pts_min: int = N_PTS_MIN
    w_max: float = W_MAX
    delta_t: float = 0.02
    delta_r: float = math.radians(30)
    keep: int = 100


def generate_grasps(points, config: GraspConfig | None = None, scorer: Scorer | None = None, threads: int = 1):
    """FPS centres, ball-query regions, score, then SE(3) NMS.

    Returns ``(grasps, regions)``.
    """
    config = config or GraspConfig()
    scorer = scorer or GeometricScorer(config.w_max, config.n_pts_min)
    points = np.asarray(points, dtype=np.float64)
    centers = fps(points, config.n_c, 0)
    grid = SpatialGrid(points, config.radius)
    regions = []
    for c in centers:
        idx = ball_query(points, points[c], config.radius, config.cap, grid)
        regions.append(RegionProposal(points[c], idx, points[idx]))

    def run(args):
        k, region = args
        if len(region.indices) < config.n_pts_min:
            return []
        try:
            return scorer(region, k)
        except DegenerateRegion:
            return []

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            per_region = list(pool.map(run, enumerate(regions)))
    else:
        per_region = [run(a) for a in enumerate(regions)]
    candidates = [g for gs in per_region for g in gs]
    return nms_se3(candidates, config.delta_t, config.delta_r, config.keep), regions


def save_grasps(path, grasps: Sequence[GraspPose]) -> None:
    Path(path).write_text(json.dumps([g.to_dict() for g in grasps], indent=1))


def load_grasps(path) -> list[GraspPose]:
    return [GraspPose.from_dict(d) for d in json.loads(Path(path).read_text())]
