"""Two-stage confidence-weighted depth refinement.

Stage I pulls the two back-projections of every match together in 3-D;
Stage II then minimises the symmetric reprojection error. Both objectives
are Huber-robustified and weighted by match confidence.

Each match endpoint is tied to the depth variable of its nearest pixel. The
endpoint depth is that variable times a fixed ratio (interpolated initial
depth at the continuous coordinate over the initial depth at the pixel
centre), so sub-pixel matches do not pull their pixel toward a neighbouring
surface point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .camera import Z_MIN, Intrinsics, Pose, pixel_rays
from .errors import NonFiniteLoss
from .observation import CorrespondenceSet, DepthMap, nearest_pixel, sample_depth

logger = logging.getLogger(__name__)


@dataclass
class RefinementConfig:
    delta_3d: float = 0.3  # metres
    delta_2d: float = 3.0  # pixels
    n_3d: int = 100
    n_2d: int = 100
    step_3d: float = 1e-2  # first trial displacement of the steepest variable, metres
    step_2d: float = 1e-3
    decay: float = 0.5
    max_halvings: int = 30

    def __post_init__(self):
        if not (self.delta_3d > 0 and self.delta_2d > 0):
            raise ValueError("Huber thresholds must be positive")
        if self.n_3d < 0 or self.n_2d < 0:
            raise ValueError("iteration counts must be non-negative")
        if not (self.step_3d > 0 and self.step_2d > 0 and 0 < self.decay < 1):
            raise ValueError("invalid step control parameters")


def huber(r, delta):
    """Huber penalty of a non-negative residual norm."""
    r = np.asarray(r, dtype=np.float64)
    out = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def _huber_weight(r, delta):
    # rho'(r) / r, the IRLS weight
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r <= delta, 1.0, delta / r)


@numba.njit(cache=True)
def _residuals_3d(da, db, ca, ra, cb, rb, q, delta, want_grad):
    n = q.shape[0]
    terms = np.empty(n)
    ga = np.zeros(n if want_grad else 0)
    gb = np.zeros(n if want_grad else 0)
    for k in range(n):
        ex = ca[k, 0] + da[k] * ra[k, 0] - cb[k, 0] - db[k] * rb[k, 0]
        ey = ca[k, 1] + da[k] * ra[k, 1] - cb[k, 1] - db[k] * rb[k, 1]
        ez = ca[k, 2] + da[k] * ra[k, 2] - cb[k, 2] - db[k] * rb[k, 2]
        r = np.sqrt(ex * ex + ey * ey + ez * ez)
        if r <= delta:
            terms[k] = q[k] * 0.5 * r * r
            w = q[k]
        else:
            terms[k] = q[k] * delta * (r - 0.5 * delta)
            w = q[k] * delta / r
        if want_grad:
            ga[k] = w * (ex * ra[k, 0] + ey * ra[k, 1] + ez * ra[k, 2])
            gb[k] = -w * (ex * rb[k, 0] + ey * rb[k, 1] + ez * rb[k, 2])
    return terms, ga, gb


@numba.njit(cache=True)
def _residuals_2d(depth, offset, slope, f_other, target, q, delta, z_min, want_grad):
    n = q.shape[0]
    terms = np.zeros(n)
    ok = np.zeros(n, dtype=np.bool_)
    g = np.zeros(n if want_grad else 0)
    for k in range(n):
        X = offset[k, 0] + depth[k] * slope[k, 0]
        Y = offset[k, 1] + depth[k] * slope[k, 1]
        Z = offset[k, 2] + depth[k] * slope[k, 2]
        if not Z > z_min:
            continue
        ok[k] = True
        fx, fy = f_other[k, 0], f_other[k, 1]
        eu = fx * X / Z + f_other[k, 2] - target[k, 0]
        ev = fy * Y / Z + f_other[k, 3] - target[k, 1]
        r = np.sqrt(eu * eu + ev * ev)
        if r <= delta:
            terms[k] = q[k] * 0.5 * r * r
            w = q[k]
        else:
            terms[k] = q[k] * delta * (r - 0.5 * delta)
            w = q[k] * delta / r
        if want_grad:
            du = fx * (slope[k, 0] * Z - X * slope[k, 2]) / (Z * Z)
            dv = fy * (slope[k, 1] * Z - Y * slope[k, 2]) / (Z * Z)
            g[k] = w * (eu * du + ev * dv)
    return terms, ok, g


@dataclass
class _Side:
    """Constant per-residual data for one endpoint of every match."""

    var: np.ndarray
    ratio: np.ndarray
    center: np.ndarray
    ray: np.ndarray
    target: np.ndarray  # continuous pixel of this endpoint (projection target)
    # projection of this endpoint's point into the *other* camera:
    # p_other_cam = offset + depth * slope
    offset: np.ndarray
    slope: np.ndarray
    f_other: np.ndarray  # (N, 4) fx, fy, cx, cy of the other camera


@dataclass
class RefinementProblem:
    """Depth variables at matched pixels plus all residual bookkeeping."""

    cameras: list[tuple[Intrinsics, Pose]]
    initial: list[np.ndarray]
    var_view: np.ndarray
    var_pixel: np.ndarray  # (n_vars, 2) integer (u, v)
    z0: np.ndarray
    q: np.ndarray
    a: _Side
    b: _Side
    pair: np.ndarray  # (N, 2) view indices of each residual
    n_dropped: int = 0

    @property
    def n_vars(self) -> int:
        return len(self.z0)

    @property
    def n_residuals(self) -> int:
        return len(self.q)

    # -- objectives -----------------------------------------------------

    def _depths(self, z):
        return self.a.ratio * z[self.a.var], self.b.ratio * z[self.b.var]

    def _scatter(self, ga, gb):
        n = self.n_vars
        return np.bincount(self.a.var, ga * self.a.ratio, minlength=n) + np.bincount(
            self.b.var, gb * self.b.ratio, minlength=n
        )

    def loss_3d(self, z, delta, want_grad=True):
        da, db = self._depths(z)
        a, b = self.a, self.b
        terms, ga, gb = _residuals_3d(da, db, a.center, a.ray, b.center, b.ray, self.q, float(delta), want_grad)
        loss = float(np.sum(terms))
        if not want_grad:
            return loss
        return loss, self._scatter(ga, gb)

    @staticmethod
    def _reproject(side: _Side, depth, target, delta, q, want_grad):
        terms, ok, g = _residuals_2d(depth, side.offset, side.slope, side.f_other, target, q, float(delta), Z_MIN,
                                     want_grad)
        return terms, ok, (g if want_grad else None)

    def loss_2d(self, z, delta, want_grad=True):
        da, db = self._depths(z)
        # endpoint a seen by camera b must land on b's target, and vice versa
        la, oka, ga = self._reproject(self.a, da, self.b.target, delta, self.q, want_grad)
        lb, okb, gb = self._reproject(self.b, db, self.a.target, delta, self.q, want_grad)
        self.last_dropouts = int((~oka).sum() + (~okb).sum())
        loss = float(np.sum(la + lb))
        if not want_grad:
            return loss
        return loss, self._scatter(ga, gb)

    # -- diagnostics ----------------------------------------------------

    def world_points(self, z):
        da, db = self._depths(z)
        return self.a.center + da[:, None] * self.a.ray, self.b.center + db[:, None] * self.b.ray

    def mean_pair_distance(self, z=None) -> float:
        pa, pb = self.world_points(self.z0 if z is None else z)
        return float(np.mean(np.linalg.norm(pa - pb, axis=1))) if len(pa) else 0.0

    def mean_reprojection_error(self, z=None) -> float:
        z = self.z0 if z is None else z
        da, db = self._depths(z)
        errs = []
        for side, depth, target in ((self.a, da, self.b.target), (self.b, db, self.a.target)):
            pc = side.offset + depth[:, None] * side.slope
            ok = pc[:, 2] > Z_MIN
            fx, fy, cx, cy = side.f_other[ok].T
            uv = np.stack([fx * pc[ok, 0] / pc[ok, 2] + cx, fy * pc[ok, 1] / pc[ok, 2] + cy], axis=1)
            errs.append(np.linalg.norm(uv - target[ok], axis=1))
        e = np.concatenate(errs)
        return float(e.mean()) if e.size else 0.0

    def to_rasters(self, z) -> list[np.ndarray]:
        out = [d.copy() for d in self.initial]
        for v in range(len(out)):
            sel = self.var_view == v
            px = self.var_pixel[sel]
            out[v][px[:, 1], px[:, 0]] = z[sel]
        return out


def build_problem(
    cameras: Sequence[tuple[Intrinsics, Pose]],
    depths: Sequence[DepthMap | np.ndarray],
    sets: Sequence[CorrespondenceSet],
) -> RefinementProblem:
    """Create variables for every matched pixel and constant residual data.

    Matches whose endpoint pixel has no valid initial depth are left out and
    counted in ``n_dropped``.
    """
    initial = [np.array(d.values if isinstance(d, DepthMap) else d, dtype=np.float64) for d in depths]
    sizes = [d.size for d in initial]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    chunks = []
    dropped = 0
    for s in sorted(sets, key=lambda s: s.pair):
        if len(s) == 0:
            continue
        ends = []
        keep = np.ones(len(s), dtype=bool)
        for view, x in ((s.i, s.xi), (s.j, s.xj)):
            Z = initial[view]
            h, w = Z.shape
            px = nearest_pixel(x)
            inside = (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
            pxc = np.clip(px, 0, [w - 1, h - 1])
            centre = Z[pxc[:, 1], pxc[:, 0]]
            interp, ok = sample_depth(Z, x)
            good = inside & ok & np.isfinite(centre) & (centre > 0)
            with np.errstate(invalid="ignore", divide="ignore"):
                ratio = np.where(good, interp / np.where(good, centre, 1.0), 1.0)
            keep &= good
            ends.append((view, x, pxc, ratio))
        dropped += int((~keep).sum())
        chunks.append((s, keep, ends))

    keys_a, keys_b, rows = [], [], []
    for s, keep, ((va, xa, pa, ra), (vb, xb, pb, rb)) in chunks:
        h_a, w_a = initial[va].shape
        h_b, w_b = initial[vb].shape
        keys_a.append(offsets[va] + pa[keep, 1] * w_a + pa[keep, 0])
        keys_b.append(offsets[vb] + pb[keep, 1] * w_b + pb[keep, 0])
        rows.append((va, vb, xa[keep], xb[keep], ra[keep], rb[keep], s.q[keep]))

    all_keys = np.concatenate(keys_a + keys_b) if rows else np.zeros(0, dtype=np.int64)
    uniq, inverse = np.unique(all_keys, return_inverse=True)
    n_a = sum(len(k) for k in keys_a)
    var_a, var_b = inverse[:n_a], inverse[n_a:]

    var_view = np.searchsorted(offsets, uniq, side="right") - 1
    local = uniq - offsets[var_view]
    widths = np.array([d.shape[1] for d in initial], dtype=np.int64)
    var_pixel = np.stack([local % widths[var_view], local // widths[var_view]], axis=1) if len(uniq) else np.zeros((0, 2), np.int64)
    z0 = np.array([initial[v][p[1], p[0]] for v, p in zip(var_view, var_pixel)], dtype=np.float64)

    def side(view_list, x_list, r_list, other_list, var):
        centers, rays, offs, slopes, fo = [], [], [], [], []
        for view, x, other in zip(view_list, x_list, other_list):
            K, T = cameras[view]
            Ko, To = cameras[other]
            ray = pixel_rays(x, K, T)
            centers.append(np.broadcast_to(T.center, ray.shape))
            rays.append(ray)
            offs.append(np.broadcast_to(To.to_camera(T.center), ray.shape))
            slopes.append(ray @ To.rotation)
            fo.append(np.broadcast_to([Ko.fx, Ko.fy, Ko.cx, Ko.cy], (len(x), 4)))
        cat = lambda xs, d: np.concatenate(xs) if xs else np.zeros((0, d))
        return _Side(
            var=var,
            ratio=np.concatenate(r_list) if r_list else np.zeros(0),
            center=cat(centers, 3),
            ray=cat(rays, 3),
            target=cat(x_list, 2),
            offset=cat(offs, 3),
            slope=cat(slopes, 3),
            f_other=cat(fo, 4),
        )

    va = [r[0] for r in rows]
    vb = [r[1] for r in rows]
    a = side(va, [r[2] for r in rows], [r[4] for r in rows], vb, var_a)
    b = side(vb, [r[3] for r in rows], [r[5] for r in rows], va, var_b)
    q = np.concatenate([r[6] for r in rows]) if rows else np.zeros(0)
    pair = np.concatenate([np.tile([r[0], r[1]], (len(r[6]), 1)) for r in rows]) if rows else np.zeros((0, 2), np.int64)
    if dropped:
        logger.info("refinement: %d matches without valid initial depth left out", dropped)
    return RefinementProblem(list(cameras), initial, var_view, var_pixel, z0, q, a, b, pair, dropped)


def loss_3d(problem: RefinementProblem, delta: float = 0.3, z=None):
    """Stage I objective and its gradient with respect to every depth variable."""
    return problem.loss_3d(problem.z0 if z is None else z, delta)


def loss_2d(problem: RefinementProblem, delta: float = 3.0, z=None):
    """Stage II objective and its gradient with respect to every depth variable."""
    return problem.loss_2d(problem.z0 if z is None else z, delta)


@dataclass
class RefinementResult:
    depths: list[DepthMap]
    z: np.ndarray
    trace: list[tuple[int, str, float, float]] = field(default_factory=list)
    stage1_z: np.ndarray | None = None
    # mean 3D distance between matched endpoints before and after Stage I
    pair_distance: tuple[float, float] | None = None

    def stage_trace(self, stage: str) -> list[float]:
        return [row[2] for row in self.trace if row[1] == stage]


def _descend(problem, z, objective, delta, n_iter, step0, config, stage, trace):
    loss, grad = objective(z, delta)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NonFiniteLoss(f"{stage}: non-finite loss at start", problem.to_rasters(z))
    trace.append((0, stage, loss, 0.0))
    for it in range(1, n_iter + 1):
        gmax = np.abs(grad).max()
        if gmax == 0:
            # stationary point; nothing left to do in this stage
            break
        # the first trial moves the steepest variable by step0
        direction = grad * (-step0 / gmax)
        step = 1.0
        accepted = None
        for _ in range(config.max_halvings):
            cand = z + step * direction
            if np.all(cand > 0):
                cand_loss = objective(cand, delta, want_grad=False)
                if np.isfinite(cand_loss) and cand_loss <= loss:
                    accepted = cand
                    break
            step *= config.decay
        if accepted is None:
            break
        new_loss, new_grad = objective(accepted, delta)
        if not (np.isfinite(new_loss) and np.all(np.isfinite(new_grad))):
            raise NonFiniteLoss(f"{stage}: non-finite gradient at iteration {it}", problem.to_rasters(z))
        z, loss, grad = accepted, new_loss, new_grad
        trace.append((it, stage, loss, step * step0))
    return z


def optimize(problem: RefinementProblem, config: RefinementConfig | None = None) -> RefinementResult:
    """Run Stage I for ``n_3d`` iterations, then Stage II for ``n_2d``.

    Each iteration is a steepest-descent step scaled so the first trial moves
    the steepest variable by ``step_3d``/``step_2d`` metres; the step is halved
    until the loss does not increase and every depth stays positive. A stage
    ends early at a stationary point or when no halving is accepted.
    """
    config = config or RefinementConfig()
    trace: list = []
    z = problem.z0.copy()
    if problem.n_vars:
        z = _descend(problem, z, problem.loss_3d, config.delta_3d, config.n_3d, config.step_3d, config, "3d", trace)
    z1 = z.copy()
    if problem.n_vars:
        z = _descend(problem, z, problem.loss_2d, config.delta_2d, config.n_2d, config.step_2d, config, "2d", trace)
    depths = [DepthMap(r, "refined") for r in problem.to_rasters(z)]
    pair_distance = (problem.mean_pair_distance(), problem.mean_pair_distance(z1))
    return RefinementResult(depths, z, trace, z1, pair_distance)


def check_monotone(trace) -> None:
    """Hard check that every stage's loss trace is non-increasing."""
    last = {}
    for it, stage, loss, _ in trace:
        if stage in last and loss > last[stage]:
            raise AssertionError(f"stage {stage}: loss rose from {last[stage]} to {loss} at iteration {it}")
        last[stage] = loss
