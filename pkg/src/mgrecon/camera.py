"""Pinhole cameras, rigid poses and the two-view primitives built on them.

Conventions
-----------
* Poses are camera-to-world: ``p_world = R @ p_cam + t``.
* Pixel coordinates are continuous with integer values at pixel centres,
  origin at the top-left pixel, ``u`` to the right and ``v`` downward.
* Depth is the camera-frame ``z`` coordinate, not the ray length.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BehindCamera, DegenerateRays, MissingArtifact, NonPositiveDepth

Z_MIN = 1e-6
MIN_RAY_ANGLE = 1e-4
MIN_BASELINE = 1e-6
_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} raster"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def contains(self, uv) -> np.ndarray | bool:
        uv = np.asarray(uv, dtype=np.float64)
        u, v = uv[..., 0], uv[..., 1]
        return (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation has determinant != +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
        """Camera at ``eye`` with its optical axis through ``target`` (image v axis points down)."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise ValueError("viewing direction is parallel to the up vector")
        right /= norm
        down = np.cross(forward, right)
        return cls(np.column_stack([right, down, forward]), eye)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: Pose) -> Pose:
        R = self.rotation @ other.rotation
        # re-orthonormalise to keep long compositions inside tolerance
        u, _, vt = np.linalg.svd(R)
        return Pose(u @ vt, self.rotation @ other.translation + self.translation)

    def transform(self, points) -> np.ndarray:
        """Map camera-frame points to the world frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_camera(self, points) -> np.ndarray:
        """Map world-frame points to the camera frame."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation


def pixel_rays(uv, K: Intrinsics, pose: Pose) -> np.ndarray:
    """World-frame ray directions scaled so that their camera-frame z is 1.

    With this scaling ``center + depth * ray`` is the unprojection of a pixel.
    """
    uv = np.asarray(uv, dtype=np.float64)
    cam = np.stack(
        [(uv[..., 0] - K.cx) / K.fx, (uv[..., 1] - K.cy) / K.fy, np.ones(uv.shape[:-1])],
        axis=-1,
    )
    return cam @ pose.rotation.T


def project(point_world, K: Intrinsics, pose: Pose) -> tuple[np.ndarray, float]:
    """Project one world point; returns ``((u, v), depth)``."""
    X, Y, Z = pose.to_camera(np.asarray(point_world, dtype=np.float64).reshape(3))
    if not Z > Z_MIN:
        raise BehindCamera(f"camera-frame depth {Z:.3g} <= {Z_MIN:g}")
    return np.array([K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy]), float(Z)


def project_points(points_world, K: Intrinsics, pose: Pose):
    """Vectorised projection of ``(N, 3)`` points.

    Returns ``(uv, depth, in_front)``; ``uv`` is NaN where the point is not in
    front of the camera.
    """
    pc = pose.to_camera(points_world)
    Z = pc[..., 2]
    in_front = Z > Z_MIN
    safe = np.where(in_front, Z, 1.0)
    uv = np.stack([K.fx * pc[..., 0] / safe + K.cx, K.fy * pc[..., 1] / safe + K.cy], axis=-1)
    uv[~in_front] = np.nan
    return uv, Z, in_front


def unproject(pix, depth: float, K: Intrinsics, pose: Pose) -> np.ndarray:
    if not depth > 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    u, v = np.asarray(pix, dtype=np.float64).reshape(2)
    p_cam = np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])
    return pose.transform(p_cam)


def unproject_pixels(uv, depth, K: Intrinsics, pose: Pose) -> np.ndarray:
    """Vectorised unprojection; no validity checks (NaN depth gives NaN points)."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    p_cam = np.stack(
        [(uv[..., 0] - K.cx) / K.fx * depth, (uv[..., 1] - K.cy) / K.fy * depth, depth], axis=-1
    )
    return pose.transform(p_cam)


def _midpoint(ci, di, cj, dj):
    # closest points of ci + a*di and cj + b*dj, written so that swapping the
    # two rays only permutes commutative operations
    w = ci - cj
    a = np.sum(di * di, axis=-1)
    b = np.sum(di * dj, axis=-1)
    c = np.sum(dj * dj, axis=-1)
    d = np.sum(di * w, axis=-1)
    e = np.sum(dj * w, axis=-1)
    denom = a * c - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        si = (b * e - c * d) / denom
        sj = (a * e - b * d) / denom
    pi = ci + si[..., None] * di
    pj = cj + sj[..., None] * dj
    return 0.5 * (pi + pj)


def _ray_angle(di, dj):
    cross = np.linalg.norm(np.cross(di, dj), axis=-1)
    dot = np.sum(di * dj, axis=-1)
    angle = np.arctan2(cross, dot)
    return np.minimum(angle, np.pi - angle)


def triangulate(xi, xj, K: Intrinsics, Ti: Pose, Tj: Pose, Kj: Intrinsics | None = None) -> np.ndarray:
    """Midpoint of the common perpendicular of the two back-projected rays."""
    Kj = K if Kj is None else Kj
    baseline = float(np.linalg.norm(Ti.center - Tj.center))
    if baseline < MIN_BASELINE:
        raise DegenerateRays(f"baseline {baseline:.3g} m below {MIN_BASELINE:g}")
    di = pixel_rays(np.asarray(xi, dtype=np.float64).reshape(1, 2), K, Ti)[0]
    dj = pixel_rays(np.asarray(xj, dtype=np.float64).reshape(1, 2), Kj, Tj)[0]
    angle = float(_ray_angle(di, dj))
    if angle < MIN_RAY_ANGLE:
        raise DegenerateRays(f"ray angle {angle:.3g} rad below {MIN_RAY_ANGLE:g}")
    return _midpoint(Ti.center, di, Tj.center, dj)


def triangulate_points(xi, xj, K: Intrinsics, Ti: Pose, Tj: Pose, Kj: Intrinsics | None = None):
    """Vectorised midpoint triangulation of ``(N, 2)`` pixel arrays.

    Returns ``(points, ok)`` where ``ok`` flags rays that pass the baseline and
    ray-angle checks; rejected rows are NaN.
    """
    Kj = K if Kj is None else Kj
    xi = np.asarray(xi, dtype=np.float64).reshape(-1, 2)
    xj = np.asarray(xj, dtype=np.float64).reshape(-1, 2)
    di = pixel_rays(xi, K, Ti)
    dj = pixel_rays(xj, Kj, Tj)
    ok = _ray_angle(di, dj) >= MIN_RAY_ANGLE
    if np.linalg.norm(Ti.center - Tj.center) < MIN_BASELINE:
        ok[:] = False
    points = _midpoint(Ti.center, di, Tj.center, dj)
    points[~ok] = np.nan
    return points, ok


# -- cameras.json -----------------------------------------------------------


def camera_to_dict(K: Intrinsics, pose: Pose) -> dict:
    return {
        "fx": K.fx,
        "fy": K.fy,
        "cx": K.cx,
        "cy": K.cy,
        "width": K.width,
        "height": K.height,
        "R": [float(x) for x in pose.rotation.reshape(-1)],
        "t": [float(x) for x in pose.translation],
        "frame": "camera_to_world",
    }


def camera_from_dict(d: dict) -> tuple[Intrinsics, Pose]:
    frame = d.get("frame", "camera_to_world")
    if frame != "camera_to_world":
        raise ValueError(f"unsupported pose frame {frame!r}")
    K = Intrinsics(
        float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"])
    )
    return K, Pose(np.reshape(d["R"], (3, 3)), d["t"])


def save_cameras(path, cameras) -> None:
    Path(path).write_text(json.dumps([camera_to_dict(K, T) for K, T in cameras], indent=1))


def load_cameras(path) -> list[tuple[Intrinsics, Pose]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"cameras file not found: {path}")
    return [camera_from_dict(d) for d in json.loads(path.read_text())]


def rotation_angle(Ra, Rb) -> float:
    """Geodesic angle between two rotations, in radians."""
    c = (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))
