"""Command line entry point.

The per-stage subcommands share a working directory laid out exactly like
the ``pipeline`` output (``aggregated/``, ``scaled/``, ``refined/``,
``cloud.ply``, ``grasps.json``) so they can be chained by hand.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .camera import load_cameras
from .errors import MGReconError, MissingArtifact, StageError
from .observation import DepthMap, FileBackend, aggregate_depth, filter_matches
from .pipeline import PROFILES, PipelineConfig, run_directory, sweep_views

log = logging.getLogger("mgrecon")

_CONFIG_FLAGS = [
    ("tau_q", float),
    ("tau_c", float),
    ("delta_3d", float),
    ("delta_2d", float),
    ("n_3d", int),
    ("n_2d", int),
    ("r", float),
    ("n_min", int),
    ("n_c", int),
    ("seed", int),
    ("threads", int),
]


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat JSON config; command line flags take precedence")
    p.add_argument("--profile", choices=sorted(PROFILES))
    for name, kind in _CONFIG_FLAGS:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind)
    p.add_argument("--skip-scale", action="store_true", default=None, help="use s = 1 for every view")
    p.add_argument("--skip-refine", action="store_true", default=None, help="fuse the scaled depths directly")


def _config(args) -> PipelineConfig:
    overrides = {name: getattr(args, name, None) for name, _ in _CONFIG_FLAGS}
    overrides["skip_scale"] = getattr(args, "skip_scale", None)
    overrides["skip_refine"] = getattr(args, "skip_refine", None)
    if getattr(args, "profile", None):
        overrides["profile"] = args.profile
    # profile defaults < config file < command line flags
    data = json.loads(args.config.read_text()) if getattr(args, "config", None) else {}
    return PipelineConfig.from_dict(data, **overrides)


def _read_rasters(folder: Path, prefix: str, n: int) -> list[np.ndarray]:
    out = []
    for k in range(n):
        path = folder / f"{prefix}_{k:02d}.pfm"
        if not path.exists():
            raise MissingArtifact(f"missing raster: {path}")
        out.append(io.read_pfm(path))
    return out


def _write_rasters(folder: Path, rasters, prefix: str) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    for k, r in enumerate(rasters):
        io.write_pfm(folder / f"{prefix}_{k:02d}.pfm", r.values if isinstance(r, DepthMap) else r)


def _filtered_sets(scene: Path, n: int, tau_q: float):
    backend = FileBackend(scene)
    sets = []
    for i in range(n):
        for j in range(i + 1, n):
            sets.append(filter_matches(backend.produce_pair(i, j)[1], tau_q))
    return sets


# -- subcommands ------------------------------------------------------------


def cmd_synth(args) -> None:
    from .synthetic import (
        OracleBackend,
        PerturbationSpec,
        SyntheticCapture,
        generate_scene,
        sample_views,
        write_scene_dir,
    )

    spec = PerturbationSpec.standard() if args.noise == "standard" else PerturbationSpec.noiseless()
    if args.alpha is not None:
        spec.alpha = args.alpha
    for name in ("sigma_d", "sigma_px", "outlier_frac"):
        if getattr(args, name) is not None:
            setattr(spec, name, getattr(args, name))
    spec.__post_init__()
    scene = generate_scene(args.seed)
    cams = sample_views(args.views, args.seed, args.size, target=scene.centroid)
    capture = SyntheticCapture.create(scene, cams)
    backend = OracleBackend(capture, spec, args.seed, args.stride)
    write_scene_dir(args.out, capture, backend)
    # the harness segmentation covers everything the renderer hit
    for k, r in enumerate(capture.renders):
        io.write_pgm(Path(args.out) / "masks" / f"view_{k:02d}.pgm", r.prim_id >= 0)
    print(f"wrote {args.views}-view scene to {args.out}")


def cmd_aggregate(args) -> None:
    backend = FileBackend(args.input)
    n = len(load_cameras(args.input / "cameras.json"))
    preds = [backend.produce_pair(i, j)[0] for i in range(n) for j in range(i + 1, n)]
    agg = [aggregate_depth(preds, v) for v in range(n)]
    _write_rasters(args.work / "aggregated", [a for a, _ in agg], "depth")
    _write_rasters(args.work / "aggregated", [c for _, c in agg], "conf")


def cmd_recover_scale(args) -> None:
    from .scale import apply_scale, recover_scales

    cfg = _config(args)
    cams = load_cameras(args.input / "cameras.json")
    n = len(cams)
    depths = [DepthMap(d, "aggregated") for d in _read_rasters(args.work / "aggregated", "depth", n)]
    rec = recover_scales(_filtered_sets(args.input, n, cfg.tau_q), depths, cams)
    _write_rasters(args.work / "scaled", [apply_scale(depths[v], rec.scales[v]) for v in range(n)], "depth")
    rows = [{"view": v, "s": rec.scales[v].s, "n_support": rec.scales[v].n_support} for v in range(n)]
    (args.work / "scales.json").write_text(json.dumps(rows, indent=1))


def cmd_refine(args) -> None:
    from .refine import build_problem, check_monotone, optimize

    cfg = _config(args)
    cams = load_cameras(args.input / "cameras.json")
    n = len(cams)
    depths = _read_rasters(args.work / "scaled", "depth", n)
    result = optimize(build_problem(cams, depths, _filtered_sets(args.input, n, cfg.tau_q)), cfg.refinement())
    check_monotone(result.trace)
    _write_rasters(args.work / "refined", result.depths, "depth")
    with open(args.work / "losses.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "stage", "loss", "step"])
        for it, stage, loss, step in result.trace:
            w.writerow([it, stage, repr(float(loss)), repr(float(step))])


def cmd_fuse(args) -> None:
    from .fusion import fuse, radius_filter, valid_mask

    cfg = _config(args)
    views = FileBackend(args.input).load_views()
    n = len(views)
    depths = _read_rasters(args.work / "refined", "depth", n)
    conf = _read_rasters(args.work / "aggregated", "conf", n)
    sets = _filtered_sets(args.input, n, cfg.tau_q)
    masks = [valid_mask(v, sets, conf[v], views[v].mask, cfg.tau_c) for v in range(n)]
    cloud = fuse(depths, masks, [v.image for v in views], [(v.K, v.pose) for v in views], cfg.threads)
    cloud = radius_filter(cloud, cfg.r, cfg.n_min)
    io.write_ply(args.work / "cloud.ply", cloud.points, cloud.colors)
    print(f"{len(cloud)} points")


def cmd_grasp(args) -> None:
    from .grasp import FileScorer, generate_grasps, save_grasps

    cfg = _config(args)
    points, _ = io.read_ply(args.cloud)
    scorer = FileScorer(args.scorer_file) if args.scorer_file else None
    grasps, _ = generate_grasps(points, cfg.grasp(), scorer, cfg.threads)
    save_grasps(args.out, grasps)
    print(f"{len(grasps)} grasps")


def cmd_pipeline(args) -> None:
    cfg = _config(args)
    result = run_directory(args.input, args.out, cfg)
    t = result.timings
    for name, secs in t.seconds.items():
        print(f"{name:28s} {secs:8.3f} s  {t.ratios()[name]:5.1f} %")
    print(f"{'total':28s} {t.total:8.3f} s   {len(result.cloud)} points, {len(result.grasps)} grasps")


def _int_range(text: str) -> list[int]:
    if "-" in text:
        a, b = text.split("-")
        return list(range(int(a), int(b) + 1))
    return [int(x) for x in text.split(",")]


def cmd_sweep_views(args) -> None:
    from .synthetic import PerturbationSpec

    cfg = _config(args)
    spec = PerturbationSpec.standard() if args.noise == "standard" else PerturbationSpec.noiseless()
    rows = sweep_views(_int_range(args.seeds), _int_range(args.views), cfg, spec, args.size, args.stride, args.out)
    for r in rows:
        print(f"n={r['n']}  mean_distance={r['mean_distance']:.6f}  coverage={r['coverage']:.4f}  runtime={r['runtime_s']:.2f}s")


def cmd_eval(args) -> None:
    from .synthetic import eval_metrics, load_scene

    scene = load_scene(args.scene / "scene.json")
    points, _ = io.read_ply(args.cloud)
    kwargs = {}
    if args.work is not None:
        n = len(load_cameras(args.scene / "cameras.json"))
        cfg = _config(args)
        conf = _read_rasters(args.work / "aggregated", "conf", n)
        sets = _filtered_sets(args.scene, n, cfg.tau_q)
        from .fusion import valid_mask

        masks = [valid_mask(v, sets, conf[v], np.ones_like(conf[v], dtype=bool), cfg.tau_c) for v in range(n)]
        kwargs = dict(refined=_read_rasters(args.work / "refined", "depth", n),
                      gt=_read_rasters(args.scene / "gt", "depth", n), masks=masks)
    report = eval_metrics(points, scene, **kwargs)
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgrecon", description="Multi-view metric depth reconstruction and grasp generation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic scene directory")
    p.add_argument("out", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, default=5)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--noise", choices=["noiseless", "standard"], default="standard")
    p.add_argument("--alpha", type=float)
    p.add_argument("--sigma-d", dest="sigma_d", type=float)
    p.add_argument("--sigma-px", dest="sigma_px", type=float)
    p.add_argument("--outlier-frac", dest="outlier_frac", type=float)
    p.set_defaults(func=cmd_synth)

    for name, func, helptext in [
        ("aggregate", cmd_aggregate, "aggregate pair depths per view"),
        ("recover-scale", cmd_recover_scale, "triangulate matches and scale aggregated depths"),
        ("refine", cmd_refine, "two-stage refinement of scaled depths"),
        ("fuse", cmd_fuse, "mask, fuse and radius-filter refined depths"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("input", type=Path, help="scene directory")
        p.add_argument("work", type=Path, help="working directory")
        _add_config_args(p)
        p.set_defaults(func=func)

    p = sub.add_parser("grasp", help="generate grasps on a PLY cloud")
    p.add_argument("cloud", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--scorer-file", type=Path, help="precomputed per-region grasps (JSON)")
    _add_config_args(p)
    p.set_defaults(func=cmd_grasp)

    p = sub.add_parser("pipeline", help="run every stage on a scene directory")
    p.add_argument("input", type=Path)
    p.add_argument("out", type=Path)
    _add_config_args(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("sweep-views", help="coverage and accuracy against the number of views")
    p.add_argument("out", type=Path, help="CSV path")
    p.add_argument("--seeds", default="0-9")
    p.add_argument("--views", default="2-9")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--noise", choices=["noiseless", "standard"], default="standard")
    _add_config_args(p)
    p.set_defaults(func=cmd_sweep_views)

    p = sub.add_parser("eval", help="score a cloud against a synthetic scene")
    p.add_argument("scene", type=Path, help="scene directory written by synth")
    p.add_argument("cloud", type=Path)
    p.add_argument("--work", type=Path, help="working directory, enables depth RMSE")
    p.add_argument("--out", type=Path)
    _add_config_args(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return 2
    except (MGReconError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
