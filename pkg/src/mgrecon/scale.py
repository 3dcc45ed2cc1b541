"""Metric scale recovery from triangulated matches over a minimal pair cover."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .camera import Intrinsics, Pose, triangulate_points
from .errors import InsufficientSupport, UncoveredView, ZeroPredictedDepthSum
from .observation import CorrespondenceSet, DepthMap, sample_depth

N_SUPPORT_MIN = 20


@dataclass
class PairCover:
    pairs: list[tuple[int, int]]
    neighbor_of: dict[int, tuple[int, int]]


@dataclass
class TriangulatedSet:
    """Triangulated matches of one pair.

    ``index`` points back into the source :class:`CorrespondenceSet`; matches
    dropped for degenerate geometry or cheirality are only counted.
    """

    source: CorrespondenceSet
    index: np.ndarray
    p_world: np.ndarray
    z_i: np.ndarray
    z_j: np.ndarray
    dropped: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.index)

    @property
    def xi(self) -> np.ndarray:
        return self.source.xi[self.index]

    @property
    def xj(self) -> np.ndarray:
        return self.source.xj[self.index]

    @property
    def q(self) -> np.ndarray:
        return self.source.q[self.index]


@dataclass(frozen=True)
class ScaleEstimate:
    view: int
    s: float
    n_support: int


def select_pair_cover(sets: Sequence[CorrespondenceSet], n_views: int, n_support_min: int = N_SUPPORT_MIN) -> PairCover:
    """Pick, for every view, the pair with the largest summed match confidence.

    Pairs with fewer than ``n_support_min`` valid matches are not eligible.
    Ties go to the lowest partner index.
    """
    score = {s.pair: math.fsum(s.q.tolist()) for s in sets if len(s) >= n_support_min}
    neighbor_of = {}
    for v in range(n_views):
        best = None
        for pair in sorted(score):
            if v not in pair:
                continue
            partner = pair[0] if pair[1] == v else pair[1]
            key = (-score[pair], partner)
            if best is None or key < best[0]:
                best = (key, pair)
        if best is None:
            raise UncoveredView(v)
        neighbor_of[v] = best[1]
    return PairCover(sorted(set(neighbor_of.values())), neighbor_of)


def triangulate_set(
    matches: CorrespondenceSet, Ki: Intrinsics, Ti: Pose, Tj: Pose, Kj: Intrinsics | None = None
) -> TriangulatedSet:
    """Triangulate every match of a pair and express each point in both cameras."""
    Kj = Ki if Kj is None else Kj
    points, ok = triangulate_points(matches.xi, matches.xj, Ki, Ti, Tj, Kj)
    z_i = Ti.to_camera(points)[:, 2]
    z_j = Tj.to_camera(points)[:, 2]
    front = ok & (z_i > 0) & (z_j > 0)
    keep = np.flatnonzero(front)
    return TriangulatedSet(
        matches,
        keep,
        points[keep],
        z_i[keep],
        z_j[keep],
        {"degenerate": int((~ok).sum()), "cheirality": int((ok & ~front).sum())},
    )


def estimate_scale(
    tri: TriangulatedSet,
    predicted: DepthMap | np.ndarray,
    view_role: str,
    view: int | None = None,
    n_support_min: int = N_SUPPORT_MIN,
) -> ScaleEstimate:
    """Ratio of summed triangulated depths to summed predicted depths.

    ``view_role`` is ``"i"`` or ``"j"`` and selects which endpoint of each
    match (and which triangulated depth) belongs to the view being scaled.
    """
    if view_role not in ("i", "j"):
        raise ValueError("view_role must be 'i' or 'j'")
    values = predicted.values if isinstance(predicted, DepthMap) else np.asarray(predicted)
    pix, z_tri = (tri.xi, tri.z_i) if view_role == "i" else (tri.xj, tri.z_j)
    if view is None:
        view = tri.source.i if view_role == "i" else tri.source.j
    z_hat, ok = sample_depth(values, pix)
    n = int(ok.sum())
    if n < n_support_min:
        raise InsufficientSupport(f"view {view}: {n} supporting matches, need {n_support_min}")
    # exactly rounded sums make the estimate independent of match order
    den = math.fsum(z_hat[ok].tolist())
    if not den > 0:
        raise ZeroPredictedDepthSum(f"view {view}: predicted depths sum to {den}")
    return ScaleEstimate(view, math.fsum(z_tri[ok].tolist()) / den, n)


def apply_scale(predicted: DepthMap, estimate: ScaleEstimate | float) -> DepthMap:
    s = estimate.s if isinstance(estimate, ScaleEstimate) else float(estimate)
    if not (s > 0 and math.isfinite(s)):
        raise ValueError(f"invalid scale {s}")
    return DepthMap(s * predicted.values, "metric")


@dataclass
class ScaleRecovery:
    cover: PairCover
    scales: dict[int, ScaleEstimate]
    triangulated: dict[tuple[int, int], TriangulatedSet]


def recover_scales(
    sets: Sequence[CorrespondenceSet],
    predicted: Sequence[DepthMap],
    cameras: Sequence[tuple[Intrinsics, Pose]],
    n_support_min: int = N_SUPPORT_MIN,
) -> ScaleRecovery:
    """Select the pair cover, triangulate its pairs and scale every view once."""
    cover = select_pair_cover(sets, len(cameras), n_support_min)
    by_pair = {s.pair: s for s in sets}
    tri = {}
    for i, j in cover.pairs:
        (Ki, Ti), (Kj, Tj) = cameras[i], cameras[j]
        tri[(i, j)] = triangulate_set(by_pair[(i, j)], Ki, Ti, Tj, Kj)
    scales = {}
    for v in range(len(cameras)):
        pair = cover.neighbor_of[v]
        role = "i" if pair[0] == v else "j"
        scales[v] = estimate_scale(tri[pair], predicted[v], role, v, n_support_min)
    return ScaleRecovery(cover, scales, tri)
