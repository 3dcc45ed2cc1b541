"""End-to-end reconstruction driver, configuration, timings and experiment drivers."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .errors import EmptyCloud, MGReconError, StageError
from .fusion import PointCloud, fuse, radius_filter, valid_mask
from .grasp import GraspConfig, GraspPose, Scorer, generate_grasps, save_grasps
from .observation import (
    CorrespondenceSet,
    DepthMap,
    FileBackend,
    PairPrediction,
    View,
    aggregate_depth,
    filter_matches,
    view_name,
)
from .refine import RefinementConfig, RefinementResult, build_problem, check_monotone, optimize
from .scale import N_SUPPORT_MIN, ScaleEstimate, apply_scale, recover_scales

logger = logging.getLogger(__name__)

PROFILE_ENV = "MGRECON_PROFILE"

PROFILES = {
    "benchmark": dict(tau_q=3.0, tau_c=3.0, delta_3d=0.3, delta_2d=3.0, n_3d=100, n_2d=100, r=0.03, n_min=60, n_c=500),
    "real": dict(tau_q=1.0, tau_c=1.0, delta_3d=0.3, delta_2d=3.0, n_3d=100, n_2d=100, r=0.05, n_min=300, n_c=100),
}

STAGE_NAMES = (
    "masking_load",
    "aggregation_correspondence",
    "scale_recovery",
    "refinement",
    "guidance_fusion",
    "grasp_generation",
)


def default_profile() -> str:
    name = os.environ.get(PROFILE_ENV, "benchmark")
    if name not in PROFILES:
        raise ValueError(f"{PROFILE_ENV}={name!r} is not one of {sorted(PROFILES)}")
    return name


@dataclass
class PipelineConfig:
    tau_q: float = 3.0
    tau_c: float = 3.0
    delta_3d: float = 0.3
    delta_2d: float = 3.0
    n_3d: int = 100
    n_2d: int = 100
    r: float = 0.03
    n_min: int = 60
    n_c: int = 500
    profile: str = "benchmark"
    seed: int = 0
    threads: int = 1
    skip_scale: bool = False
    skip_refine: bool = False

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        for name in ("tau_q", "tau_c", "delta_3d", "delta_2d", "r"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("n_min", "n_c", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.n_3d < 0 or self.n_2d < 0:
            raise ValueError("iteration counts must be non-negative")

    @classmethod
    def for_profile(cls, profile: str | None = None, **overrides) -> PipelineConfig:
        profile = profile or default_profile()
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        return cls(**{**PROFILES[profile], "profile": profile, **overrides})

    @classmethod
    def from_dict(cls, data: dict, **overrides) -> PipelineConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        merged = {**data, **{k: v for k, v in overrides.items() if v is not None}}
        return cls.for_profile(merged.pop("profile", None), **merged)

    @classmethod
    def load(cls, path, **overrides) -> PipelineConfig:
        return cls.from_dict(json.loads(Path(path).read_text()), **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    def refinement(self) -> RefinementConfig:
        return RefinementConfig(delta_3d=self.delta_3d, delta_2d=self.delta_2d, n_3d=self.n_3d, n_2d=self.n_2d)

    def grasp(self) -> GraspConfig:
        return GraspConfig(n_c=self.n_c)


@dataclass
class StageTimings:
    seconds: dict[str, float] = field(default_factory=lambda: {k: 0.0 for k in STAGE_NAMES})

    @property
    def total(self) -> float:
        return math.fsum(self.seconds.values())

    def ratios(self) -> dict[str, float]:
        total = self.total
        return {k: (100.0 * v / total if total > 0 else 0.0) for k, v in self.seconds.items()}

    def to_dict(self) -> dict:
        return {"stages": dict(self.seconds), "total": self.total, "ratios_percent": self.ratios()}


@contextmanager
def _stage(name: str, timings: StageTimings):
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except (MGReconError, OSError, ValueError, AssertionError) as exc:
        raise StageError(name, exc) from exc
    finally:
        timings.seconds[name] += time.perf_counter() - start


@dataclass
class PipelineResult:
    views: list[View]
    predictions: list[PairPrediction]
    aggregated: list[DepthMap]
    confidence: list[np.ndarray]
    matches: list[CorrespondenceSet]
    scales: dict[int, ScaleEstimate] | None
    scaled: list[DepthMap]
    refinement: RefinementResult | None
    final: list[DepthMap]
    masks: list[np.ndarray]
    cloud_raw: PointCloud
    cloud: PointCloud
    grasps: list[GraspPose]
    timings: StageTimings

    @property
    def cameras(self):
        return [(v.K, v.pose) for v in self.views]


def _map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def run_pipeline(provider, config: PipelineConfig, views: Sequence[View] | None = None, out_dir=None,
                 scorer: Scorer | None = None, grasps: bool = True) -> PipelineResult:
    """Run every stage in order on the views and pair outputs of ``provider``.

    ``provider`` must implement ``produce_pair(i, j)``; when ``views`` is not
    given it must also implement ``load_views()``. When ``out_dir`` is set all
    intermediate products are written there.
    """
    timings = StageTimings()
    out = Path(out_dir) if out_dir is not None else None
    threads = config.threads

    with _stage("masking_load", timings):
        views = list(views) if views is not None else provider.load_views()
        n = len(views)
        if n < 2:
            raise ValueError(f"need at least two views, got {n}")
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1))

    with _stage("aggregation_correspondence", timings):
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        produced = _map(lambda p: provider.produce_pair(*p), pairs, threads)
        predictions = [p for p, _ in produced]
        agg = _map(lambda v: aggregate_depth(predictions, v), range(n), threads)
        aggregated = [a for a, _ in agg]
        confidence = [c for _, c in agg]
        matches = [filter_matches(m, config.tau_q) for _, m in produced]
        for s in matches:
            s.check_bounds(views[s.i].K, views[s.j].K)
        if out is not None:
            _write_rasters(out / "aggregated", aggregated, "depth")
            _write_rasters(out / "aggregated", confidence, "conf")
            io.write_matches(out / "matches_filtered.jsonl", matches)

    cameras = [(v.K, v.pose) for v in views]
    with _stage("scale_recovery", timings):
        if config.skip_scale:
            scales = None
            scaled = [apply_scale(d, 1.0) for d in aggregated]
        else:
            rec = recover_scales(matches, aggregated, cameras, N_SUPPORT_MIN)
            scales = rec.scales
            scaled = [apply_scale(aggregated[v], scales[v]) for v in range(n)]
        if out is not None:
            _write_rasters(out / "scaled", scaled, "depth")
            rows = [
                {"view": v, "s": (scales[v].s if scales else 1.0), "n_support": (scales[v].n_support if scales else 0)}
                for v in range(n)
            ]
            (out / "scales.json").write_text(json.dumps(rows, indent=1))

    with _stage("refinement", timings):
        if config.skip_refine:
            result = None
            final = [DepthMap(d.values, "refined") for d in scaled]
        else:
            problem = build_problem(cameras, scaled, matches)
            result = optimize(problem, config.refinement())
            check_monotone(result.trace)
            final = result.depths
        if out is not None:
            _write_rasters(out / "refined", final, "depth")
            with open(out / "losses.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["iteration", "stage", "loss", "step"])
                for it, stage, loss, step in result.trace if result else []:
                    w.writerow([it, stage, repr(float(loss)), repr(float(step))])

    with _stage("guidance_fusion", timings):
        masks = [valid_mask(v, matches, confidence[v], views[v].mask, config.tau_c) for v in range(n)]
        cloud_raw = fuse(final, masks, [v.image for v in views], cameras, threads)
        cloud = radius_filter(cloud_raw, config.r, config.n_min)
        if out is not None:
            io.write_ply(out / "cloud.ply", cloud.points, cloud.colors)

    found: list[GraspPose] = []
    with _stage("grasp_generation", timings):
        if grasps:
            if len(cloud) == 0:
                raise EmptyCloud("filtered cloud is empty; nothing to grasp")
            found, _ = generate_grasps(cloud.points, config.grasp(), scorer, threads)
        if out is not None:
            save_grasps(out / "grasps.json", found)

    if out is not None:
        (out / "timings.json").write_text(json.dumps(timings.to_dict(), indent=1))
    return PipelineResult(views, predictions, aggregated, confidence, matches, scales, scaled, result, final,
                          masks, cloud_raw, cloud, found, timings)


def _write_rasters(folder: Path, rasters, prefix: str) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    for k, r in enumerate(rasters):
        values = r.values if isinstance(r, DepthMap) else r
        io.write_pfm(folder / f"{prefix}_{k:02d}.pfm", values)


def run_directory(input_dir, out_dir, config: PipelineConfig, scorer: Scorer | None = None) -> PipelineResult:
    return run_pipeline(FileBackend(input_dir), config, out_dir=out_dir, scorer=scorer)


# -- synthetic experiments ---------------------------------------------------


def synthetic_case(scene_seed: int, n_views: int, spec=None, size: int = 256, stride: int = 2):
    """Scene, capture and oracle provider for one seeded synthetic run."""
    from .synthetic import OracleBackend, PerturbationSpec, SyntheticCapture, generate_scene, sample_views

    spec = spec or PerturbationSpec.standard()
    scene = generate_scene(scene_seed)
    capture = SyntheticCapture.create(scene, sample_views(n_views, scene_seed, size, target=scene.centroid))
    masks = [r.prim_id >= 0 for r in capture.renders]
    return capture, OracleBackend(capture, spec, scene_seed, stride), capture.views(masks)


def evaluate(result: PipelineResult, capture) -> dict:
    from .synthetic import eval_metrics

    return eval_metrics(result.cloud.points, capture.scene, refined=result.final, gt=capture.gt_depths,
                        masks=result.masks)


ABLATION_ARMS = {
    "full": (False, False),
    "no_scale": (True, False),
    "no_refine": (False, True),
    "neither": (True, True),
}


def ablation(scene_seed: int, config: PipelineConfig, spec=None, n_views: int = 5, size: int = 256,
             stride: int = 2) -> dict[str, dict]:
    """Mean surface distance etc. for the four scale/refinement arms on one scene.

    An arm whose filtered cloud ends up empty is reported with infinite distance.
    """
    capture, backend, views = synthetic_case(scene_seed, n_views, spec, size, stride)
    report = {}
    for arm, (skip_scale, skip_refine) in ABLATION_ARMS.items():
        cfg = PipelineConfig(**{**config.to_dict(), "skip_scale": skip_scale, "skip_refine": skip_refine})
        try:
            res = run_pipeline(backend, cfg, views, grasps=False)
            report[arm] = evaluate(res, capture)
            if res.refinement is not None:
                report[arm]["trace"] = res.refinement.trace
                report[arm]["pair_distance"] = res.refinement.pair_distance
        except (StageError, EmptyCloud) as exc:
            if not isinstance(exc, EmptyCloud) and not isinstance(exc.cause, EmptyCloud):
                raise
            report[arm] = {"mean_distance": math.inf, "coverage": 0.0, "n_points": 0}
    return report


SWEEP_COLUMNS = ("n", "mean_distance", "coverage", "runtime_s")


def sweep_views(seeds: Sequence[int], counts: Sequence[int], config: PipelineConfig, spec=None, size: int = 256,
                stride: int = 2, out_csv=None) -> list[dict]:
    """One pipeline run per (seed, view count); rows average over seeds.

    ``runtime_s`` is wall-clock and is the only column that varies between
    otherwise identical runs.
    """
    rows = []
    for n in counts:
        dist, cov, secs = [], [], []
        for seed in seeds:
            capture, backend, views = synthetic_case(seed, n, spec, size, stride)
            start = time.perf_counter()
            res = run_pipeline(backend, config, views, grasps=False)
            secs.append(time.perf_counter() - start)
            rep = evaluate(res, capture)
            dist.append(rep["mean_distance"])
            cov.append(rep["coverage"])
        rows.append({"n": n, "mean_distance": float(np.mean(dist)), "coverage": float(np.mean(cov)),
                     "runtime_s": float(np.mean(secs))})
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
            w.writeheader()
            for row in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return rows
