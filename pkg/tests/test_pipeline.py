from __future__ import annotations

import json
import shutil

import numpy as np
import pytest

from mgrecon.errors import StageError
from mgrecon.pipeline import (
    PROFILES,
    STAGE_NAMES,
    PipelineConfig,
    StageTimings,
    default_profile,
    evaluate,
    run_directory,
    run_pipeline,
    synthetic_case,
)
from mgrecon.synthetic import PerturbationSpec, write_scene_dir

SMALL = dict(n_min=10, n_c=50)


@pytest.fixture(scope="module")
def noiseless_case():
    return synthetic_case(2, 3, PerturbationSpec.noiseless(), size=128)


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    capture, backend, _ = synthetic_case(3, 3, PerturbationSpec.standard(), size=96)
    root = tmp_path_factory.mktemp("scene")
    write_scene_dir(root, capture, backend)
    return root


def test_noiseless_pipeline_recovers_the_surface(noiseless_case):
    capture, backend, views = noiseless_case
    res = run_pipeline(backend, PipelineConfig.for_profile("benchmark", **SMALL), views)
    for v, est in res.scales.items():
        assert est.s * backend.alphas[v] == pytest.approx(1.0, rel=1e-4)
    report = evaluate(res, capture)
    assert report["mean_distance"] < 1e-4
    assert report["depth_rmse"] < 1e-4
    assert len(res.grasps) > 0


def test_pipeline_writes_every_artifact(tmp_path, noiseless_case):
    capture, backend, views = noiseless_case
    cfg = PipelineConfig.for_profile("benchmark", n_3d=5, n_2d=5, **SMALL)
    run_pipeline(backend, cfg, views, out_dir=tmp_path)
    for name in ("config.json", "matches_filtered.jsonl", "scales.json", "losses.csv", "cloud.ply", "grasps.json",
                 "timings.json", "aggregated/depth_00.pfm", "aggregated/conf_02.pfm", "scaled/depth_01.pfm",
                 "refined/depth_02.pfm"):
        assert (tmp_path / name).exists(), name
    timings = json.loads((tmp_path / "timings.json").read_text())
    assert list(timings["stages"]) == list(STAGE_NAMES)
    assert sum(timings["ratios_percent"].values()) == pytest.approx(100.0)
    assert json.loads((tmp_path / "config.json").read_text())["n_3d"] == 5
    rows = (tmp_path / "losses.csv").read_text().splitlines()
    assert rows[0] == "iteration,stage,loss,step"
    assert {r.split(",")[1] for r in rows[1:]} == {"3d", "2d"}


def test_skip_flags(noiseless_case):
    _, backend, views = noiseless_case
    cfg = PipelineConfig.for_profile("benchmark", skip_scale=True, skip_refine=True, **SMALL)
    res = run_pipeline(backend, cfg, views, grasps=False)
    assert res.scales is None and res.refinement is None
    for a, f in zip(res.aggregated, res.final):
        assert np.array_equal(a.values, f.values, equal_nan=True)


def test_missing_cameras_names_stage_and_file(tmp_path):
    with pytest.raises(StageError) as info:
        run_directory(tmp_path, tmp_path / "out", PipelineConfig())
    assert info.value.stage == "masking_load"
    assert "cameras.json" in str(info.value)


def test_missing_pair_names_stage(tmp_path, scene_dir):
    broken = tmp_path / "broken"
    shutil.copytree(scene_dir, broken)
    shutil.rmtree(broken / "obs" / "pair_00_02")
    with pytest.raises(StageError) as info:
        run_directory(broken, tmp_path / "out", PipelineConfig(**SMALL))
    assert info.value.stage == "aggregation_correspondence"
    assert "pair_00_02" in str(info.value)


def test_thread_count_does_not_change_outputs(tmp_path, scene_dir):
    outs = []
    for threads in (1, 3):
        out = tmp_path / f"t{threads}"
        run_directory(scene_dir, out, PipelineConfig.for_profile("benchmark", threads=threads, **SMALL))
        outs.append(out)
    for name in ("cloud.ply", "grasps.json", "losses.csv", "scales.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_config_profiles_and_overrides(monkeypatch):
    real = PipelineConfig.for_profile("real")
    assert (real.tau_q, real.r, real.n_min, real.n_c) == (1.0, 0.05, 300, 100)
    cfg = PipelineConfig.from_dict({"profile": "real", "n_min": 7}, n_min=None, r=0.02)
    assert (cfg.n_min, cfg.r, cfg.tau_q) == (7, 0.02, 1.0)
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        PipelineConfig(tau_q=0.0)
    with pytest.raises(ValueError):
        PipelineConfig.for_profile("fast")
    monkeypatch.setenv("MGRECON_PROFILE", "real")
    assert default_profile() == "real" and PipelineConfig.for_profile().n_min == 300
    monkeypatch.setenv("MGRECON_PROFILE", "nope")
    with pytest.raises(ValueError):
        default_profile()
    assert set(PROFILES) == {"benchmark", "real"}


def test_timing_ratios():
    t = StageTimings()
    assert t.total == 0 and all(v == 0 for v in t.ratios().values())
    t.seconds.update({"refinement": 3.0, "grasp_generation": 1.0})
    assert t.ratios()["refinement"] == 75.0
    assert sum(t.ratios().values()) == pytest.approx(100.0)
