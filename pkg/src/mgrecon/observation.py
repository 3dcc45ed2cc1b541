"""Per-view rasters, pairwise correspondences and the front-end provider interface."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import io
from .camera import Intrinsics, Pose, load_cameras
from .errors import DimensionMismatch, MissingArtifact, NegativeConfidence, NoPredictionsForView

logger = logging.getLogger(__name__)

STAGES = ("pair", "aggregated", "metric", "refined", "gt")


@dataclass
class DepthMap:
    """H x W depth raster in metres; NaN marks invalid pixels."""

    values: np.ndarray
    stage: str = "aggregated"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionMismatch(f"depth raster must be 2-D, got {self.values.shape}")
        if self.stage not in STAGES:
            raise ValueError(f"unknown depth stage {self.stage!r}")
        finite = self.values[np.isfinite(self.values)]
        if finite.size and finite.min() <= 0:
            raise ValueError("finite depths must be positive")
        if np.isinf(self.values).any():
            raise ValueError("depth raster contains infinities")

    @property
    def shape(self):
        return self.values.shape

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)


def check_confidence(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)) or (values < 0).any():
        raise ValueError("confidence rasters must be finite and non-negative")
    return values


@dataclass
class PairPrediction:
    """Depth and confidence predicted for both views of one pair."""

    i: int
    j: int
    depth_i: np.ndarray
    depth_j: np.ndarray
    conf_i: np.ndarray
    conf_j: np.ndarray

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("a pair needs two distinct views")
        if self.i > self.j:
            self.i, self.j = self.j, self.i
            self.depth_i, self.depth_j = self.depth_j, self.depth_i
            self.conf_i, self.conf_j = self.conf_j, self.conf_i
        self.depth_i = np.asarray(self.depth_i, dtype=np.float64)
        self.depth_j = np.asarray(self.depth_j, dtype=np.float64)
        self.conf_i = check_confidence(self.conf_i)
        self.conf_j = check_confidence(self.conf_j)
        if self.depth_i.shape != self.conf_i.shape or self.depth_j.shape != self.conf_j.shape:
            raise DimensionMismatch(f"pair ({self.i},{self.j}): depth/confidence shapes differ")

    @property
    def pair(self) -> tuple[int, int]:
        return (self.i, self.j)

    def for_view(self, view: int) -> tuple[np.ndarray, np.ndarray]:
        if view == self.i:
            return self.depth_i, self.conf_i
        if view == self.j:
            return self.depth_j, self.conf_j
        raise KeyError(f"view {view} not in pair {self.pair}")


@dataclass(frozen=True)
class Correspondence:
    xi: tuple[float, float]
    xj: tuple[float, float]
    q: float


@dataclass
class CorrespondenceSet:
    """Matches between views ``i < j`` stored column-wise.

    ``xi``/``xj`` are ``(N, 2)`` pixel arrays, ``q`` the ``(N,)`` match
    confidences.
    """

    i: int
    j: int
    xi: np.ndarray
    xj: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("a correspondence set needs two distinct views")
        self.xi = np.asarray(self.xi, dtype=np.float64).reshape(-1, 2)
        self.xj = np.asarray(self.xj, dtype=np.float64).reshape(-1, 2)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1)
        if self.i > self.j:
            self.i, self.j, self.xi, self.xj = self.j, self.i, self.xj, self.xi
        if not (len(self.xi) == len(self.xj) == len(self.q)):
            raise DimensionMismatch("xi, xj and q must have the same length")
        if not np.all(np.isfinite(self.q)):
            raise ValueError("match confidences must be finite")

    @classmethod
    def from_matches(cls, i: int, j: int, matches: Iterable[Correspondence]) -> CorrespondenceSet:
        matches = list(matches)
        return cls(
            i,
            j,
            [m.xi for m in matches],
            [m.xj for m in matches],
            [m.q for m in matches],
        )

    @classmethod
    def empty(cls, i: int, j: int) -> CorrespondenceSet:
        return cls(i, j, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))

    @property
    def pair(self) -> tuple[int, int]:
        return (self.i, self.j)

    def __len__(self) -> int:
        return len(self.q)

    def __iter__(self):
        for xi, xj, q in zip(self.xi, self.xj, self.q):
            yield Correspondence(tuple(xi), tuple(xj), float(q))

    def subset(self, index) -> CorrespondenceSet:
        return CorrespondenceSet(self.i, self.j, self.xi[index], self.xj[index], self.q[index])

    def endpoints(self, view: int) -> np.ndarray:
        if view == self.i:
            return self.xi
        if view == self.j:
            return self.xj
        raise KeyError(f"view {view} not in pair {self.pair}")

    def check_bounds(self, Ki: Intrinsics, Kj: Intrinsics) -> None:
        if not (np.all(Ki.contains(self.xi)) and np.all(Kj.contains(self.xj))):
            raise ValueError(f"pair {self.pair}: match outside its raster")


@dataclass
class View:
    image: np.ndarray
    K: Intrinsics
    pose: Pose
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.uint8)
        if self.image.shape[:2] != self.K.shape:
            raise DimensionMismatch(f"image {self.image.shape[:2]} does not match intrinsics {self.K.shape}")
        if self.mask is None:
            self.mask = np.ones(self.K.shape, dtype=bool)
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.shape != self.K.shape:
            raise DimensionMismatch("segmentation mask does not match intrinsics")


@dataclass
class ViewBundle:
    """Posed views plus per-stage depth/confidence slots filled as the pipeline runs."""

    views: list[View]
    depth: dict[str, list[DepthMap]] = field(default_factory=dict)
    confidence: list[np.ndarray] | None = None

    def __post_init__(self):
        if len(self.views) < 2:
            raise ValueError("a bundle needs at least two views")

    def __len__(self) -> int:
        return len(self.views)

    @property
    def cameras(self) -> list[tuple[Intrinsics, Pose]]:
        return [(v.K, v.pose) for v in self.views]

    def pairs(self) -> list[tuple[int, int]]:
        n = len(self.views)
        return [(i, j) for i in range(n) for j in range(i + 1, n)]


def nearest_pixel(uv) -> np.ndarray:
    """Integer ``(u, v)`` of the pixel whose centre is nearest (halves round up)."""
    return np.floor(np.asarray(uv, dtype=np.float64) + 0.5).astype(np.int64)


def sample_depth(values, uv):
    """Interpolate a depth raster at continuous pixel coordinates.

    Bilinear weights over the 2x2 neighbourhood, dropping invalid neighbours
    and renormalising. Interpolation is done on inverse depth, which is affine
    in pixel coordinates on planar surfaces. Returns ``(depth, ok)``; ``ok`` is
    False when every contributing neighbour is invalid.
    """
    values = np.asarray(values, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    h, w = values.shape
    u0 = np.floor(uv[:, 0]).astype(np.int64)
    v0 = np.floor(uv[:, 1]).astype(np.int64)
    fu = uv[:, 0] - u0
    fv = uv[:, 1] - v0
    inv_sum = np.zeros(len(uv))
    w_sum = np.zeros(len(uv))
    n_used = np.zeros(len(uv), dtype=np.int64)
    last = np.full(len(uv), np.nan)
    for du, dv, wt in (
        (0, 0, (1 - fu) * (1 - fv)),
        (1, 0, fu * (1 - fv)),
        (0, 1, (1 - fu) * fv),
        (1, 1, fu * fv),
    ):
        uu, vv = u0 + du, v0 + dv
        inside = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
        z = np.full(len(uv), np.nan)
        z[inside] = values[vv[inside], uu[inside]]
        use = inside & (wt > 0) & np.isfinite(z) & (z > 0)
        with np.errstate(over="ignore"):
            inv_sum[use] += wt[use] / z[use]
        w_sum[use] += wt[use]
        n_used += use
        last[use] = z[use]
    ok = w_sum > 0
    depth = np.full(len(uv), np.nan)
    depth[ok] = w_sum[ok] / inv_sum[ok]
    single = n_used == 1
    depth[single] = last[single]
    return depth, ok


# -- operations -------------------------------------------------------------


def aggregate_depth(predictions: Sequence[PairPrediction], view: int) -> tuple[DepthMap, np.ndarray]:
    """Confidence-weighted mean depth and mean confidence of one view over its pairs.

    Pixels where a pair has no valid depth or zero confidence do not count
    toward that pixel's mean; pixels with no contributor are invalid (NaN
    depth, zero confidence).
    """
    relevant = sorted((p for p in predictions if view in p.pair), key=lambda p: p.pair)
    if not relevant:
        raise NoPredictionsForView(f"no pair prediction mentions view {view}")
    shape = relevant[0].for_view(view)[0].shape
    ref = np.full(shape, np.nan)
    num = np.zeros(shape)
    den = np.zeros(shape)
    conf_sum = np.zeros(shape)
    count = np.zeros(shape, dtype=np.int64)
    for p in relevant:
        z, c = p.for_view(view)
        if z.shape != shape:
            raise DimensionMismatch(f"pair {p.pair}: raster {z.shape} differs from {shape}")
        use = np.isfinite(z) & (c > 0)
        first = use & np.isnan(ref)
        ref[first] = z[first]
        # accumulate offsets from the first contributor so one pair reproduces it exactly
        num[use] += c[use] * (z[use] - ref[use])
        den[use] += c[use]
        conf_sum[use] += c[use]
        count[use] += 1
    ok = den > 0
    depth = np.full(shape, np.nan)
    depth[ok] = ref[ok] + num[ok] / den[ok]
    conf = np.zeros(shape)
    conf[ok] = conf_sum[ok] / count[ok]
    return DepthMap(depth, "aggregated"), conf


def match_confidence(qi, qj):
    """Geometric mean of the two per-pixel feature confidences."""
    qi = np.asarray(qi, dtype=np.float64)
    qj = np.asarray(qj, dtype=np.float64)
    if (qi < 0).any() or (qj < 0).any():
        raise NegativeConfidence("feature confidences must be non-negative")
    out = np.sqrt(qi * qj)
    return float(out) if out.ndim == 0 else out


def filter_matches(raw: CorrespondenceSet | Sequence[Correspondence], tau_q: float, pair=None) -> CorrespondenceSet:
    """Keep matches with ``q > tau_q``; one match (highest q) per source pixel.

    Survivors keep their input order. ``pair`` is required when ``raw`` is a
    plain list of :class:`Correspondence`.
    """
    if tau_q < 0:
        raise ValueError("tau_q must be non-negative")
    if not isinstance(raw, CorrespondenceSet):
        if pair is None:
            raise ValueError("pair=(i, j) is required for a list of correspondences")
        raw = CorrespondenceSet.from_matches(pair[0], pair[1], raw)
    keep = np.flatnonzero(raw.q > tau_q)
    if keep.size == 0:
        return raw.subset(keep)
    px = nearest_pixel(raw.xi[keep])
    key = px[:, 1] * (1 << 31) + px[:, 0]
    order = np.lexsort((keep, -raw.q[keep], key))
    first = np.ones(len(order), dtype=bool)
    first[1:] = key[order[1:]] != key[order[:-1]]
    return raw.subset(np.sort(keep[order[first]]))


# -- providers --------------------------------------------------------------


class PairProvider(Protocol):
    """Produces one pair's depth/confidence predictions and raw matches."""

    def produce_pair(self, i: int, j: int) -> tuple[PairPrediction, CorrespondenceSet]: ...


def view_name(k: int) -> str:
    return f"view_{k:02d}"


def pair_dir(root, i: int, j: int) -> Path:
    return Path(root) / "obs" / f"pair_{i:02d}_{j:02d}"


def write_pair(root, prediction: PairPrediction) -> None:
    d = pair_dir(root, prediction.i, prediction.j)
    d.mkdir(parents=True, exist_ok=True)
    for v in prediction.pair:
        z, c = prediction.for_view(v)
        io.write_pfm(d / f"depth_{v:02d}.pfm", z)
        io.write_pfm(d / f"conf_{v:02d}.pfm", c, validity_sidecar=False)


def write_views(root, views: Sequence[View]) -> None:
    from .camera import save_cameras

    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    save_cameras(root / "cameras.json", [(v.K, v.pose) for v in views])
    for k, v in enumerate(views):
        io.write_ppm(root / "rgb" / f"{view_name(k)}.ppm", v.image)
        io.write_pgm(root / "masks" / f"{view_name(k)}.pgm", v.mask)


class FileBackend:
    """Reads precomputed predictions and matches from a scene directory.

    Layout: ``cameras.json``, ``rgb/view_XX.ppm``, ``masks/view_XX.pgm``
    (optional, default all foreground), ``obs/pair_II_JJ/{depth,conf}_VV.pfm``
    and a raw ``matches.jsonl``.
    """

    def __init__(self, root):
        self.root = Path(root)
        self._matches = None

    def load_views(self) -> list[View]:
        cameras = load_cameras(self.root / "cameras.json")
        views = []
        for k, (K, pose) in enumerate(cameras):
            image = io.read_ppm(self.root / "rgb" / f"{view_name(k)}.ppm")
            mask_path = self.root / "masks" / f"{view_name(k)}.pgm"
            mask = io.read_pgm(mask_path) if mask_path.exists() else None
            if mask is None:
                logger.info("no segmentation mask for view %d; using all pixels", k)
            views.append(View(image, K, pose, mask))
        return views

    def _all_matches(self):
        if self._matches is None:
            path = self.root / "matches.jsonl"
            if not path.exists():
                raise MissingArtifact(f"matches file not found: {path}")
            self._matches = io.read_matches(path)
        return self._matches

    def produce_pair(self, i: int, j: int) -> tuple[PairPrediction, CorrespondenceSet]:
        i, j = min(i, j), max(i, j)
        d = pair_dir(self.root, i, j)
        try:
            pred = PairPrediction(
                i,
                j,
                io.read_pfm(d / f"depth_{i:02d}.pfm"),
                io.read_pfm(d / f"depth_{j:02d}.pfm"),
                io.read_pfm(d / f"conf_{i:02d}.pfm"),
                io.read_pfm(d / f"conf_{j:02d}.pfm"),
            )
        except MissingArtifact as exc:
            raise MissingArtifact(f"pair ({i},{j}): {exc}") from exc
        xi, xj, q = self._all_matches().get((i, j), (np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0)))
        return pred, CorrespondenceSet(i, j, xi, xj, q)
