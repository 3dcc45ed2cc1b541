"""Uniform spatial hash grid for exact fixed-radius neighbour queries."""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _find_cell(cells, cx, cy, cz):
    lo, hi = 0, cells.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        a, b, c = cells[mid, 0], cells[mid, 1], cells[mid, 2]
        if a < cx or (a == cx and (b < cy or (b == cy and c < cz))):
            lo = mid + 1
        else:
            hi = mid
    if lo < cells.shape[0] and cells[lo, 0] == cx and cells[lo, 1] == cy and cells[lo, 2] == cz:
        return lo
    return -1


@numba.njit(cache=True)
def _count_within(points, order, cells, starts, point_cell, r2):
    n = points.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    for p in range(n):
        px, py, pz = points[p, 0], points[p, 1], points[p, 2]
        c0 = cells[point_cell[p]]
        total = 0
        for dx in range(-1, 2):
            for dy in range(-1, 2):
                for dz in range(-1, 2):
                    k = _find_cell(cells, c0[0] + dx, c0[1] + dy, c0[2] + dz)
                    if k < 0:
                        continue
                    for s in range(starts[k], starts[k + 1]):
                        o = order[s]
                        ex = points[o, 0] - px
                        ey = points[o, 1] - py
                        ez = points[o, 2] - pz
                        if ex * ex + ey * ey + ez * ez < r2:
                            total += 1
        counts[p] = total
    return counts


@numba.njit(cache=True)
def _query(points, order, cells, starts, center, cell_size, r2, reach):
    c = np.floor(center / cell_size).astype(np.int64)
    out = np.empty(points.shape[0], dtype=np.int64)
    m = 0
    for dx in range(-reach, reach + 1):
        for dy in range(-reach, reach + 1):
            for dz in range(-reach, reach + 1):
                k = _find_cell(cells, c[0] + dx, c[1] + dy, c[2] + dz)
                if k < 0:
                    continue
                for s in range(starts[k], starts[k + 1]):
                    o = order[s]
                    ex = points[o, 0] - center[0]
                    ey = points[o, 1] - center[1]
                    ez = points[o, 2] - center[2]
                    if ex * ex + ey * ey + ez * ez < r2:
                        out[m] = o
                        m += 1
    return np.sort(out[:m])


class SpatialGrid:
    """Points bucketed into cubic cells of side ``cell_size``.

    Neighbour tests use ``dx*dx + dy*dy + dz*dz < r*r`` (strict).
    """

    def __init__(self, points, cell_size: float):
        if not cell_size > 0:
            raise ValueError("cell size must be positive")
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        self.cell_size = float(cell_size)
        coords = np.floor(self.points / self.cell_size).astype(np.int64)
        self.order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0])).astype(np.int64)
        sorted_coords = coords[self.order]
        if len(sorted_coords):
            new = np.ones(len(sorted_coords), dtype=bool)
            new[1:] = np.any(sorted_coords[1:] != sorted_coords[:-1], axis=1)
            first = np.flatnonzero(new)
        else:
            first = np.zeros(0, dtype=np.int64)
        self.cells = np.ascontiguousarray(sorted_coords[first])
        self.starts = np.append(first, len(sorted_coords)).astype(np.int64)
        cell_of_sorted = np.cumsum(np.concatenate([[0], new[1:]])) if len(sorted_coords) else first
        self.point_cell = np.empty(len(self.points), dtype=np.int64)
        self.point_cell[self.order] = cell_of_sorted

    def __len__(self) -> int:
        return len(self.points)

    def neighbor_counts(self, radius: float | None = None) -> np.ndarray:
        """Number of points strictly within ``radius`` of each point (self included)."""
        radius = self.cell_size if radius is None else float(radius)
        if radius > self.cell_size:
            raise ValueError("radius may not exceed the cell size")
        if not len(self.points):
            return np.zeros(0, dtype=np.int64)
        return _count_within(self.points, self.order, self.cells, self.starts, self.point_cell, radius * radius)

    def query(self, center, radius: float) -> np.ndarray:
        """Indices (ascending) of points strictly within ``radius`` of ``center``."""
        if not len(self.points):
            return np.zeros(0, dtype=np.int64)
        reach = int(np.ceil(radius / self.cell_size))
        center = np.asarray(center, dtype=np.float64).reshape(3)
        return _query(self.points, self.order, self.cells, self.starts, center, self.cell_size, radius * radius, reach)
