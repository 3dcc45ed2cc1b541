"""Ground-truth tabletop scenes built from analytic primitives.

The harness renders exact depth by ray casting, perturbs it into up-to-scale
"network" predictions, emits oracle matches between views and scores fused
clouds against the true surfaces.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .camera import Intrinsics, Pose, pixel_rays, project_points
from .errors import EmptyCloud
from .observation import (
    CorrespondenceSet,
    PairPrediction,
    View,
    match_confidence,
    write_pair,
    write_views,
)
from . import io

TABLE_ID = 0


# -- primitives -------------------------------------------------------------


@dataclass
class Table:
    """Rectangular patch of the plane z = 0."""

    half_x: float = 0.3
    half_y: float = 0.3
    color: tuple = (170, 150, 120)

    def intersect(self, origin, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -origin[2] / dirs[:, 2]
        x = origin[0] + t * dirs[:, 0]
        y = origin[1] + t * dirs[:, 1]
        hit = (dirs[:, 2] < 0) & (t > 0) & (np.abs(x) <= self.half_x) & (np.abs(y) <= self.half_y)
        return np.where(hit, t, np.inf)

    def normal(self, p):
        return np.broadcast_to([0.0, 0.0, 1.0], p.shape).copy()

    def distance(self, p):
        dx = np.maximum(np.abs(p[:, 0]) - self.half_x, 0.0)
        dy = np.maximum(np.abs(p[:, 1]) - self.half_y, 0.0)
        return np.sqrt(dx * dx + dy * dy + p[:, 2] ** 2)

    def albedo(self, p):
        checker = (np.floor(p[:, 0] / 0.04) + np.floor(p[:, 1] / 0.04)) % 2
        base = np.asarray(self.color, dtype=np.float64)
        return base[None, :] * (0.8 + 0.2 * checker[:, None])

    def to_dict(self):
        return {"type": "table", "half_x": self.half_x, "half_y": self.half_y, "color": list(self.color)}


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: tuple = (200, 60, 60)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def intersect(self, origin, dirs):
        oc = origin - self.center
        a = np.sum(dirs * dirs, axis=1)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - root) / (2 * a)
        t1 = (-b + root) / (2 * a)
        t = np.where(t0 > 0, t0, t1)
        return np.where((disc >= 0) & (t > 0), t, np.inf)

    def normal(self, p):
        n = p - self.center
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def distance(self, p):
        return np.abs(np.linalg.norm(p - self.center, axis=1) - self.radius)

    def albedo(self, p):
        return np.broadcast_to(np.asarray(self.color, dtype=np.float64), p.shape)

    def sample_surface(self, rng, n):
        d = rng.normal(size=(n, 3))
        return self.center + self.radius * d / np.linalg.norm(d, axis=1, keepdims=True)

    @property
    def area(self):
        return 4 * math.pi * self.radius**2

    def to_dict(self):
        return {"type": "sphere", "center": self.center.tolist(), "radius": self.radius, "color": list(self.color)}


@dataclass
class Box:
    """Axis-aligned box given by centre and half extents."""

    center: np.ndarray
    half: np.ndarray
    color: tuple = (60, 120, 200)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half = np.asarray(self.half, dtype=np.float64)
        if not np.all(self.half > 0):
            raise ValueError("box extents must be positive")

    def intersect(self, origin, dirs):
        lo = self.center - self.half - origin
        hi = self.center + self.half - origin
        tmin = np.full(len(dirs), -np.inf)
        tmax = np.full(len(dirs), np.inf)
        for k in range(3):
            d = dirs[:, k]
            par = d == 0
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = lo[k] / d
                t2 = hi[k] / d
            a = np.where(par, -np.inf, np.minimum(t1, t2))
            b = np.where(par, np.inf, np.maximum(t1, t2))
            outside = par & ((lo[k] > 0) | (hi[k] < 0))
            a = np.where(outside, np.inf, a)
            tmin = np.maximum(tmin, a)
            tmax = np.minimum(tmax, b)
        hit = (tmax >= tmin) & (tmin > 0)
        return np.where(hit, tmin, np.inf)

    def normal(self, p):
        q = (p - self.center) / self.half
        axis = np.argmax(np.abs(q), axis=1)
        n = np.zeros_like(p)
        n[np.arange(len(p)), axis] = np.sign(q[np.arange(len(p)), axis])
        return n

    @staticmethod
    def face_index(n):
        axis = np.argmax(np.abs(n), axis=1)
        return 2 * axis + (n[np.arange(len(n)), axis] > 0)

    def distance(self, p):
        q = np.abs(p - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)

    def albedo(self, p):
        return np.broadcast_to(np.asarray(self.color, dtype=np.float64), p.shape)

    def faces(self):
        """(axis, sign, area) of the five faces not resting on the table."""
        out = []
        for axis in range(3):
            a, b = [k for k in range(3) if k != axis]
            area = 4 * self.half[a] * self.half[b]
            for sign in (-1.0, 1.0):
                if axis == 2 and sign < 0:
                    continue
                out.append((axis, sign, area))
        return out

    @property
    def area(self):
        return sum(f[2] for f in self.faces())

    def sample_surface(self, rng, n):
        faces = self.faces()
        areas = np.array([f[2] for f in faces])
        which = rng.choice(len(faces), size=n, p=areas / areas.sum())
        u = rng.uniform(-1, 1, size=(n, 3))
        pts = self.center + u * self.half
        for k, (axis, sign, _) in enumerate(faces):
            sel = which == k
            pts[sel, axis] = self.center[axis] + sign * self.half[axis]
        return pts

    def to_dict(self):
        return {"type": "box", "center": self.center.tolist(), "half_extents": self.half.tolist(), "color": list(self.color)}


def primitive_from_dict(d):
    kind = d["type"]
    if kind == "table":
        return Table(d["half_x"], d["half_y"], tuple(d["color"]))
    if kind == "sphere":
        return Sphere(d["center"], d["radius"], tuple(d["color"]))
    if kind == "box":
        return Box(d["center"], d["half_extents"], tuple(d["color"]))
    raise ValueError(f"unknown primitive type {kind!r}")


@dataclass
class Scene:
    """A table (primitive 0) with objects resting on it."""

    objects: list
    table: Table = field(default_factory=Table)

    def __post_init__(self):
        for obj in self.objects:
            bottom = obj.center[2] - (obj.radius if isinstance(obj, Sphere) else obj.half[2])
            if bottom < -1e-9:
                raise ValueError("objects must sit above the table")

    @property
    def primitives(self):
        return [self.table, *self.objects]

    @property
    def centroid(self) -> np.ndarray:
        if not self.objects:
            return np.zeros(3)
        return np.mean([o.center for o in self.objects], axis=0)

    def to_dict(self):
        return {"primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d) -> Scene:
        prims = [primitive_from_dict(p) for p in d["primitives"]]
        table = next(p for p in prims if isinstance(p, Table))
        return cls([p for p in prims if not isinstance(p, Table)], table)

    def surface_distance(self, points) -> np.ndarray:
        """Unsigned distance from each point to the nearest primitive surface."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.min(np.stack([p.distance(points) for p in self.primitives]), axis=0)

    def cast(self, origin, dirs):
        """Nearest hit along ``origin + t * dirs``; returns ``(t, primitive_id)`` (inf, -1 on miss)."""
        origin = np.asarray(origin, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        ts = np.stack([p.intersect(origin, dirs) for p in self.primitives])
        ids = np.argmin(ts, axis=0)
        t = ts[ids, np.arange(len(dirs))]
        ids = np.where(np.isfinite(t), ids, -1)
        return t, ids

    def coverage_samples(self, spacing: float = 0.0025, seed: int = 0) -> np.ndarray:
        """Points on the exposed object surfaces, about one per ``spacing**2``."""
        rng = np.random.default_rng(seed)
        chunks = []
        for k, obj in enumerate(self.objects):
            n = max(16, int(round(obj.area / spacing**2)))
            pts = obj.sample_surface(rng, n)
            keep = pts[:, 2] > 1e-3
            for m, other in enumerate(self.objects):
                if m == k:
                    continue
                if isinstance(other, Sphere):
                    keep &= np.linalg.norm(pts - other.center, axis=1) > other.radius
                else:
                    keep &= np.any(np.abs(pts - other.center) > other.half, axis=1)
            chunks.append(pts[keep])
        return np.concatenate(chunks) if chunks else np.zeros((0, 3))


_PALETTE = [(200, 60, 60), (60, 160, 80), (60, 100, 210), (220, 180, 40), (150, 70, 180), (40, 180, 190), (230, 120, 40)]


def generate_scene(seed: int = 0, n_objects: int | None = None, spread: float = 0.13) -> Scene:
    """Random non-overlapping boxes and spheres on the table."""
    rng = np.random.default_rng([seed, 101])
    n_objects = int(rng.integers(3, 6)) if n_objects is None else n_objects
    objects, footprints = [], []
    attempts = 0
    while len(objects) < n_objects and attempts < 1000:
        attempts += 1
        xy = rng.uniform(-spread, spread, size=2)
        color = _PALETTE[len(objects) % len(_PALETTE)]
        if rng.random() < 0.35:
            r = rng.uniform(0.022, 0.035)
            obj, foot = Sphere([xy[0], xy[1], r], r, color), r
        else:
            half = np.array([rng.uniform(0.015, 0.04), rng.uniform(0.015, 0.04), rng.uniform(0.015, 0.045)])
            obj, foot = Box([xy[0], xy[1], half[2]], half, color), float(np.hypot(half[0], half[1]))
        if all(np.linalg.norm(xy - c) > foot + f + 0.01 for c, f in footprints):
            objects.append(obj)
            footprints.append((xy, foot))
    return Scene(objects)


# -- cameras and rendering --------------------------------------------------


def default_intrinsics(size: int = 256, focal_factor: float = 1.5) -> Intrinsics:
    f = focal_factor * size
    c = (size - 1) / 2.0
    return Intrinsics(f, f, c, c, size, size)


def sample_views(
    n: int,
    seed: int = 0,
    size: int = 256,
    target=(0.0, 0.0, 0.03),
    distance: float = 0.6,
    elevation_deg: tuple[float, float] = (45.0, 65.0),
    jitter: float = 0.15,
) -> list[tuple[Intrinsics, Pose]]:
    """Cameras on a ring of the upper hemisphere looking at ``target``, with jitter.

    Pass ``scene.centroid`` as ``target`` to aim at the objects.
    """
    rng = np.random.default_rng([seed, 202, n])
    K = default_intrinsics(size)
    phase = rng.uniform(0, 2 * np.pi)
    cams = []
    for k in range(n):
        az = phase + 2 * np.pi * k / n + rng.uniform(-jitter, jitter)
        el = math.radians(rng.uniform(*elevation_deg))
        d = distance * rng.uniform(0.95, 1.05)
        aim = np.asarray(target, dtype=np.float64) + rng.uniform(-0.01, 0.01, size=3)
        eye = aim + d * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append((K, Pose.look_at(eye, aim)))
    return cams


@dataclass
class Render:
    depth: np.ndarray  # NaN background
    rgb: np.ndarray
    prim_id: np.ndarray  # -1 background
    normal: np.ndarray
    patch: np.ndarray  # smooth surface patch id (box faces split), -1 background


_LIGHT = np.array([0.3, -0.4, 0.87]) / np.linalg.norm([0.3, -0.4, 0.87])


def render_depth(scene: Scene, K: Intrinsics, pose: Pose) -> Render:
    """Exact per-pixel depth by analytic ray casting (nearest hit)."""
    v, u = np.mgrid[0 : K.height, 0 : K.width]
    uv = np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)
    rays = pixel_rays(uv, K, pose)
    t, ids = scene.cast(pose.center, rays)
    hit = ids >= 0
    depth = np.where(hit, t, np.nan)
    points = pose.center + t[hit, None] * rays[hit]
    normals = np.zeros((len(uv), 3))
    rgb = np.zeros((len(uv), 3))
    patch = np.full(len(uv), -1, dtype=np.int64)
    for k, prim in enumerate(scene.primitives):
        sel = ids[hit] == k
        if not sel.any():
            continue
        where = np.flatnonzero(hit)[sel]
        n = prim.normal(points[sel])
        normals[where] = n
        patch[where] = 8 * k + (prim.face_index(n) if isinstance(prim, Box) else 0)
        shade = 0.35 + 0.65 * np.clip(n @ _LIGHT, 0.0, 1.0)
        rgb[where] = prim.albedo(points[sel]) * shade[:, None]
    shape = K.shape
    return Render(
        depth.reshape(shape),
        np.clip(np.round(rgb), 0, 255).astype(np.uint8).reshape(*shape, 3),
        ids.reshape(shape),
        normals.reshape(*shape, 3),
        patch.reshape(shape),
    )


# -- perturbed observations -------------------------------------------------


@dataclass
class PerturbationSpec:
    alpha: float | Sequence[float] | None = 1.0  # None: draw per view from alpha_range
    sigma_d: float = 0.0
    sigma_px: float = 0.0
    outlier_frac: float = 0.0
    alpha_range: tuple[float, float] = (0.3, 3.0)

    def __post_init__(self):
        if min(self.sigma_d, self.sigma_px, self.outlier_frac) < 0 or self.outlier_frac >= 1:
            raise ValueError("perturbation magnitudes must be non-negative (outlier_frac < 1)")
        if self.alpha is not None and np.any(np.asarray(self.alpha) <= 0):
            raise ValueError("alpha must be positive")

    @classmethod
    def noiseless(cls) -> PerturbationSpec:
        return cls()

    @classmethod
    def standard(cls) -> PerturbationSpec:
        return cls(alpha=None, sigma_d=0.02, sigma_px=0.5, outlier_frac=0.1)

    def alphas(self, n_views: int, seed: int) -> np.ndarray:
        if self.alpha is None:
            rng = np.random.default_rng([seed, 303])
            lo, hi = np.log(self.alpha_range[0]), np.log(self.alpha_range[1])
            return np.exp(rng.uniform(lo, hi, size=n_views))
        a = np.broadcast_to(np.asarray(self.alpha, dtype=np.float64), (n_views,))
        return a.copy()


def _smooth_field(rng, shape, n_waves: int = 4):
    """Zero-mean, unit-variance low-frequency random field."""
    h, w = shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros(shape)
    for _ in range(n_waves):
        a, b = rng.uniform(-1.5, 1.5, size=2)
        phi = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * (a * u / w + b * v / h) + phi)
    return out * math.sqrt(2.0 / n_waves)


@dataclass
class SyntheticCapture:
    scene: Scene
    cameras: list[tuple[Intrinsics, Pose]]
    renders: list[Render]

    @classmethod
    def create(cls, scene: Scene, cameras) -> SyntheticCapture:
        return cls(scene, list(cameras), [render_depth(scene, K, T) for K, T in cameras])

    @property
    def gt_depths(self) -> list[np.ndarray]:
        return [r.depth for r in self.renders]

    def views(self, masks=None) -> list[View]:
        return [
            View(r.rgb, K, T, None if masks is None else masks[k])
            for k, (r, (K, T)) in enumerate(zip(self.renders, self.cameras))
        ]


class OracleBackend:
    """Provider backed by a synthetic capture.

    Every pair is generated from its own seed-derived random stream, so
    results do not depend on the order or concurrency of calls. Matches are
    anchored at a ``stride``-spaced pixel grid of the lower-index view.
    """

    def __init__(self, capture: SyntheticCapture, spec: PerturbationSpec | None = None, seed: int = 0, stride: int = 2,
                 max_matches: int | None = None):
        self.capture = capture
        self.spec = spec or PerturbationSpec.noiseless()
        self.seed = seed
        self.stride = stride
        self.max_matches = max_matches
        self.alphas = self.spec.alphas(len(capture.cameras), seed)
        self.outliers: dict[tuple[int, int], np.ndarray] = {}
        self.gt_points: dict[tuple[int, int], np.ndarray] = {}

    def _prediction(self, rng, view):
        r = self.capture.renders[view]
        K, T = self.capture.cameras[view]
        valid = np.isfinite(r.depth)
        noise = 1.0 + self.spec.sigma_d * _smooth_field(rng, r.depth.shape) if self.spec.sigma_d > 0 else 1.0
        depth = np.where(valid, self.alphas[view] * r.depth * noise, np.nan)
        v, u = np.mgrid[0 : K.height, 0 : K.width]
        rays = pixel_rays(np.stack([u, v], axis=-1).astype(np.float64), K, T)
        rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
        incidence = np.abs(np.sum(rays * r.normal, axis=-1))
        texture = 0.75 + 0.25 * 0.5 * (1 + np.clip(_smooth_field(rng, r.depth.shape), -2, 2) / 2)
        conf = np.where(valid, (1.0 + 9.0 * incidence) * texture, 0.0)
        return depth, conf

    def _same_surface(self, view, uv, patch):
        # the 2x2 interpolation stencil must not straddle a silhouette or a crease
        r = self.capture.renders[view]
        h, w = r.depth.shape
        u0 = np.floor(uv[:, 0]).astype(np.int64)
        v0 = np.floor(uv[:, 1]).astype(np.int64)
        ok = np.ones(len(uv), dtype=bool)
        for du in (0, 1):
            for dv in (0, 1):
                uu = np.minimum(u0 + du, w - 1)
                vv = np.minimum(v0 + dv, h - 1)
                ok &= r.patch[vv, uu] == patch
        return ok

    def produce_pair(self, i: int, j: int) -> tuple[PairPrediction, CorrespondenceSet]:
        i, j = min(i, j), max(i, j)
        rng = np.random.default_rng([self.seed, 404, i, j])
        di, ci = self._prediction(rng, i)
        dj, cj = self._prediction(rng, j)
        pred = PairPrediction(i, j, di, dj, ci, cj)

        Ki, Ti = self.capture.cameras[i]
        Kj, Tj = self.capture.cameras[j]
        ri, rj = self.capture.renders[i], self.capture.renders[j]
        v, u = np.mgrid[0 : Ki.height : self.stride, 0 : Ki.width : self.stride]
        xi = np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)
        zi = ri.depth[xi[:, 1].astype(int), xi[:, 0].astype(int)]
        prim = ri.prim_id[xi[:, 1].astype(int), xi[:, 0].astype(int)]
        patch = ri.patch[xi[:, 1].astype(int), xi[:, 0].astype(int)]
        ok = np.isfinite(zi)
        xi, zi, prim, patch = xi[ok], zi[ok], prim[ok], patch[ok]
        P = Ti.center + zi[:, None] * pixel_rays(xi, Ki, Ti)
        xj, zj, front = project_points(P, Kj, Tj)
        ok = front & Kj.contains(np.nan_to_num(xj, nan=-1.0))
        xi, P, xj, zj, prim, patch = xi[ok], P[ok], xj[ok], zj[ok], prim[ok], patch[ok]
        t_hit, id_hit = self.capture.scene.cast(Tj.center, pixel_rays(xj, Kj, Tj))
        ok = (id_hit == prim) & (np.abs(t_hit - zj) <= 1e-7 * zj)
        xi, P, xj, patch = xi[ok], P[ok], xj[ok], patch[ok]

        if self.spec.sigma_px > 0:
            xj = xj + rng.normal(scale=self.spec.sigma_px, size=xj.shape)
            xj = np.clip(xj, 0, [Kj.width - 1, Kj.height - 1])
        ok = self._same_surface(j, xj, patch)
        xi, P, xj = xi[ok], P[ok], xj[ok]

        if self.max_matches is not None and len(xi) > self.max_matches:
            sel = np.sort(rng.choice(len(xi), self.max_matches, replace=False))
            xi, P, xj = xi[sel], P[sel], xj[sel]

        n = len(xi)
        qa = rng.uniform(4.0, 12.0, size=n)
        qb = rng.uniform(4.0, 12.0, size=n)
        outlier = np.zeros(n, dtype=bool)
        n_out = int(round(self.spec.outlier_frac * n))
        if n_out:
            outlier[rng.choice(n, n_out, replace=False)] = True
            xj = xj.copy()
            xj[outlier] = rng.uniform([0, 0], [Kj.width - 1, Kj.height - 1], size=(n_out, 2))
            qa[outlier] = rng.uniform(0.5, 2.5, size=n_out)
            qb[outlier] = rng.uniform(0.5, 2.5, size=n_out)
        q = match_confidence(qa, qb)
        self.outliers[(i, j)] = outlier
        self.gt_points[(i, j)] = P
        return pred, CorrespondenceSet(i, j, xi, xj, np.atleast_1d(q))


def make_observations(capture: SyntheticCapture, spec: PerturbationSpec | None = None, seed: int = 0, stride: int = 2):
    """All pair predictions and raw matches of a capture (canonical pair order)."""
    backend = OracleBackend(capture, spec, seed, stride)
    n = len(capture.cameras)
    out = [backend.produce_pair(i, j) for i in range(n) for j in range(i + 1, n)]
    return [p for p, _ in out], [m for _, m in out], backend


def write_scene_dir(root, capture: SyntheticCapture, backend: OracleBackend, threads: int = 1) -> None:
    """Write everything the file backend and the evaluator need."""
    from .io import write_matches

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_views(root, capture.views())
    (root / "gt").mkdir(exist_ok=True)
    for k, r in enumerate(capture.renders):
        io.write_pfm(root / "gt" / f"depth_{k:02d}.pfm", r.depth)
    n = len(capture.cameras)
    sets = []
    for i in range(n):
        for j in range(i + 1, n):
            pred, raw = backend.produce_pair(i, j)
            write_pair(root, pred)
            sets.append(raw)
    write_matches(root / "matches.jsonl", sets)
    meta = {
        **capture.scene.to_dict(),
        "alphas": backend.alphas.tolist(),
        "perturbation": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(backend.spec).items()},
        "seed": backend.seed,
        "stride": backend.stride,
    }
    (root / "scene.json").write_text(json.dumps(meta, indent=1))


def load_scene(path) -> Scene:
    return Scene.from_dict(json.loads(Path(path).read_text()))


# -- evaluation -------------------------------------------------------------


def eval_metrics(points, scene: Scene, coverage_radius: float = 0.005, refined=None, gt=None, masks=None,
                 sample_seed: int = 0) -> dict:
    """Point-to-surface accuracy, object surface coverage and matched-pixel depth RMSE."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyCloud("cannot evaluate an empty cloud")
    dist = scene.surface_distance(points)
    ref = scene.coverage_samples(seed=sample_seed)
    if len(ref):
        nearest, _ = cKDTree(points).query(ref, k=1, distance_upper_bound=coverage_radius)
        coverage = float(np.mean(nearest < coverage_radius))
    else:
        coverage = float("nan")
    report = {
        "n_points": int(len(points)),
        "mean_distance": float(np.mean(dist)),
        "p95_distance": float(np.percentile(dist, 95)),
        "coverage": coverage,
    }
    if refined is not None and gt is not None and masks is not None:
        sq = []
        for z, g, m in zip(refined, gt, masks):
            z = getattr(z, "values", z)
            sel = np.asarray(m, dtype=bool) & np.isfinite(z) & np.isfinite(g)
            sq.append((z[sel] - g[sel]) ** 2)
        sq = np.concatenate(sq)
        report["depth_rmse"] = float(np.sqrt(sq.mean())) if sq.size else float("nan")
    return report
