"""Valid-pixel masks, multi-view point fusion and radius outlier filtering."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .camera import Intrinsics, Pose, unproject_pixels
from .errors import DimensionMismatch
from .observation import CorrespondenceSet, DepthMap, nearest_pixel
from .spatial import SpatialGrid


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) metres, world frame
    colors: np.ndarray  # (N, 3) uint8
    source_view: np.ndarray  # (N,)
    source_pixel: np.ndarray  # (N, 2) integer (u, v)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        self.source_view = np.asarray(self.source_view, dtype=np.int64).reshape(-1)
        self.source_pixel = np.asarray(self.source_pixel, dtype=np.int64).reshape(-1, 2)
        n = len(self.points)
        if not (len(self.colors) == len(self.source_view) == len(self.source_pixel) == n):
            raise DimensionMismatch("point cloud fields have different lengths")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, index) -> PointCloud:
        return PointCloud(self.points[index], self.colors[index], self.source_view[index], self.source_pixel[index])

    @classmethod
    def from_points(cls, points, colors=None) -> PointCloud:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        if colors is None:
            colors = np.zeros((n, 3), dtype=np.uint8)
        return cls(points, colors, np.full(n, -1), np.full((n, 2), -1))

    @classmethod
    def concatenate(cls, clouds: Sequence[PointCloud]) -> PointCloud:
        if not clouds:
            return cls.from_points(np.zeros((0, 3)))
        return cls(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.source_view for c in clouds]),
            np.concatenate([c.source_pixel for c in clouds]),
        )


def matched_pixels(view: int, sets: Sequence[CorrespondenceSet], shape) -> np.ndarray:
    """Pixels of ``view`` that are the (nearest-pixel) endpoint of a valid match."""
    h, w = shape
    out = np.zeros(shape, dtype=bool)
    for s in sets:
        if view not in s.pair:
            continue
        px = nearest_pixel(s.endpoints(view))
        inside = (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
        out[px[inside, 1], px[inside, 0]] = True
    return out


def valid_mask(view: int, sets: Sequence[CorrespondenceSet], confidence, segmentation, tau_c: float) -> np.ndarray:
    """Matched AND confidence above ``tau_c`` AND inside the segmentation mask."""
    confidence = np.asarray(confidence)
    segmentation = np.asarray(segmentation).astype(bool)
    if confidence.shape != segmentation.shape:
        raise DimensionMismatch(f"confidence {confidence.shape} vs segmentation {segmentation.shape}")
    return matched_pixels(view, sets, confidence.shape) & (confidence > tau_c) & segmentation


def _fuse_view(view, depth, mask, image, K, pose) -> PointCloud:
    mask = mask & np.isfinite(depth)
    v, u = np.nonzero(mask)
    uv = np.stack([u, v], axis=1)
    points = unproject_pixels(uv.astype(np.float64), depth[v, u], K, pose)
    return PointCloud(points, image[v, u], np.full(len(u), view), uv)


def fuse(
    depths: Sequence[DepthMap | np.ndarray],
    masks: Sequence[np.ndarray],
    images: Sequence[np.ndarray],
    cameras: Sequence[tuple[Intrinsics, Pose]],
    threads: int = 1,
) -> PointCloud:
    """Unproject every valid pixel of every view and concatenate (view, row, column order)."""
    args = []
    for k, (d, m, img, (K, T)) in enumerate(zip(depths, masks, images, cameras)):
        values = d.values if isinstance(d, DepthMap) else np.asarray(d, dtype=np.float64)
        if values.shape != np.asarray(m).shape:
            raise DimensionMismatch(f"view {k}: depth and mask shapes differ")
        args.append((k, values, np.asarray(m, dtype=bool), np.asarray(img), K, T))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda a: _fuse_view(*a), args))
    else:
        parts = [_fuse_view(*a) for a in args]
    return PointCloud.concatenate(parts)


def radius_filter(cloud: PointCloud, r: float, n_min: int) -> PointCloud:
    """Keep points with at least ``n_min`` points (self included) strictly within ``r``."""
    if not r > 0:
        raise ValueError("radius must be positive")
    if n_min < 1:
        raise ValueError("n_min must be at least 1")
    if len(cloud) == 0:
        return cloud
    counts = SpatialGrid(cloud.points, r).neighbor_counts(r)
    return cloud.subset(np.flatnonzero(counts >= n_min))


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Average points (and colours) falling in the same voxel; output sorted by voxel."""
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n = len(counts)
    pts = np.stack([np.bincount(inverse, cloud.points[:, k], n) for k in range(3)], axis=1) / counts[:, None]
    cols = np.stack([np.bincount(inverse, cloud.colors[:, k].astype(np.float64), n) for k in range(3)], axis=1)
    cols = np.round(cols / counts[:, None]).astype(np.uint8)
    first = np.full(n, len(cloud))
    np.minimum.at(first, inverse, np.arange(len(cloud)))
    return PointCloud(pts, cols, cloud.source_view[first], cloud.source_pixel[first])
