import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hsct import pipeline
from hsct.dataio import load_image
from hsct.pipeline import ConfigError, PipelineConfig, PipelineError, compare_runs, parse_config, render_table

TINY = dict(size=48, n_slices=4, feature_radius=3.0, full_views=60, patch=32, n_train=6, n_test=2,
            batch=3, epochs=1, overlap=8)


def tiny(scenario="sparse-ct-sim", **kw):
    return PipelineConfig.for_scenario(scenario, **{**TINY, **kw})


def test_scenario_defaults():
    assert tiny("sparse-ct-sim", full_views=180).views == 50
    assert tiny("sparse-phase-sim", full_views=180).views == 75
    assert tiny("phase-sim").views == 60
    assert math.isinf(tiny("sparse-ct-sim").snr_db) and tiny("phase-sim").snr_db == 20.0


def test_parse_comments_and_defaults():
    cfg = parse_config("# a comment\nscenario = phase-sim   # trailing\n\nseed = 7\n")
    assert cfg.scenario == "phase-sim" and cfg.seed == 7 and cfg.views == 180
    assert parse_config("") == PipelineConfig.for_scenario("sparse-ct-sim")


@pytest.mark.parametrize("text", ["bogus = 1", "seed = 1\nseed = 2", "seed 1", "seed = x",
                                  "scenario = nope", "mode = half", "views = 500", "output = soft"])
def test_parse_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@settings(max_examples=40, deadline=None)
@given(scenario=st.sampled_from(pipeline.SCENARIOS),
       seed=st.integers(0, 2**31),
       lr=st.floats(1e-6, 1e-1),
       snr=st.one_of(st.just(math.inf), st.floats(0, 60)),
       views=st.integers(2, 180),
       s1=st.floats(0.5, 3), mode=st.sampled_from(["full", "spectral-only", "intensity-only"]),
       model=st.sampled_from(["", "runs/a/model", "x y/z"]), output=st.sampled_from(pipeline.OUTPUTS))
def test_config_round_trip(scenario, seed, lr, snr, views, s1, mode, model, output):
    cfg = PipelineConfig.for_scenario(scenario, seed=seed, lr=lr, snr_db=snr, views=views,
                                      sigmas=(0.0, s1, s1 + 1.5), mode=mode, model=model, output=output)
    text = pipeline.serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert pipeline.serialize_config(again) == text


@pytest.fixture(scope="module")
def ct_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "ct"
    rep = pipeline.run_pipeline(tiny(views=20), out)
    return out, rep


def test_run_layout(ct_run):
    out, rep = ct_run
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["status"] == "complete"
    tops = {e["path"].split("/")[0] for e in doc["files"]}
    assert tops == {"config.txt", "gt", "sino_full", "sino_20", "fbp_20", "dataset", "model",
                    "hscnn_out", "report.json"}
    # every file on disk is listed
    on_disk = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()} - {"manifest.json"}
    assert on_disk == {e["path"] for e in doc["files"]}
    assert rep["heldout_slices"] == [3]
    assert set(np.unique(load_image(out / "hscnn_out" / "slice_003.hsct").data)) <= {0.0, 1.0}
    assert sorted(p.name for p in (out / "hscnn_out").glob("*.hsct")) == ["slice_003.hsct"]
    assert json.loads((out / "report.json").read_text())["hscnn"] == rep["hscnn"]


def test_run_is_reproducible(ct_run, tmp_path):
    out, _ = ct_run
    pipeline.run_pipeline(tiny(views=20), tmp_path / "again")
    a = json.loads((out / "manifest.json").read_text())
    b = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert a == b


def test_pretrained_model_skips_training(ct_run, tmp_path):
    out, rep = ct_run
    cfg = tiny(views=20, model=str(out / "model"))
    rep2 = pipeline.run_pipeline(cfg, tmp_path / "reuse")
    assert not (tmp_path / "reuse" / "model").exists()
    assert rep2["model"]["source"] == "pretrained"
    assert rep2["model"]["digests"] == rep["model"]["digests"]
    assert rep2["hscnn"] == rep["hscnn"]


def test_failure_names_stage_and_keeps_partial_manifest(tmp_path):
    with pytest.raises(PipelineError) as err:
        pipeline.run_pipeline(tiny(model=str(tmp_path / "missing")), tmp_path / "bad")
    assert err.value.stage == "load-model"
    doc = json.loads((tmp_path / "bad" / "manifest.json").read_text())
    assert doc["status"] == "failed" and doc["failed_stage"] == "load-model"
    assert any(e["path"].startswith("fbp_50/") for e in doc["files"])
    assert {e["path"] for e in doc["files"]} == {e["path"] for e in err.value.manifest}


def test_output_dir_protection(ct_run, tmp_path):
    (tmp_path / "keep.txt").write_text("x")
    with pytest.raises(FileExistsError):
        pipeline.run_pipeline(tiny(), tmp_path)
    with pytest.raises(FileExistsError):
        pipeline.run_pipeline(tiny(), tmp_path, force=True)
    assert (tmp_path / "keep.txt").exists()


@pytest.mark.parametrize("scenario, views", [("phase-sim", 60), ("sparse-phase-sim", 30)])
def test_phase_scenarios_layout(scenario, views, tmp_path):
    cfg = tiny(scenario, views=views, epochs=0, mode="intensity-only")
    pipeline.run_pipeline(cfg, tmp_path / "r")
    names = {p.name for p in (tmp_path / "r").iterdir()}
    assert f"fbp_{cfg.views}" in names and "sino_full" in names
    assert (f"sino_{cfg.views}" in names) == (cfg.views < cfg.full_views)


def _rep(mode, ssim, psnr, scenario="phase-sim", views=180):
    return {"scenario": scenario, "views": views, "mode": mode,
            "fbp": {"ssim": 0.5, "psnr": 15.0}, "hscnn": {"ssim": ssim, "psnr": psnr}}


def test_compare_identical_reports_have_zero_deltas():
    r = _rep("full", 0.8, 20.0)
    table = compare_runs([r, dict(r)])
    deltas = [row["delta"] for row in table["rows"] if row["method"] != "fbp"]
    assert deltas == [{"ssim": 0.0, "psnr": 0.0}] * 2
    assert not table["missing"]


def test_compare_orders_ablation_rows():
    reps = [_rep("full", 0.9, 20), _rep("intensity-only", 0.7, 16), _rep("spectral-only", 0.8, 18)]
    table = compare_runs(reps, labels=["a", "b", "c"])
    assert [r["method"] for r in table["rows"]] == ["fbp", "intensity-only", "spectral-only", "full"]
    text = render_table(table)
    lines = text.splitlines()
    assert lines[0].startswith("method") and "phase-sim/180 SSIM/PSNR" in lines[0]
    assert [ln.split("  ")[0] for ln in lines[2:6]] == ["FBP", "HSCNN intensity-only",
                                                        "HSCNN spectral-only", "HSCNN"]


def test_compare_json_round_trips_through_renderer():
    reps = [_rep("full", 0.9, 20), _rep("full", 0.85, 19, "sparse-ct-sim", 50)]
    table = compare_runs(reps)
    again = json.loads(json.dumps(table))
    assert again == table
    assert render_table(again) == render_table(table)
    assert table["columns"] == ["phase-sim/180", "sparse-ct-sim/50"]


def test_compare_lists_missing_fields():
    bad = {"scenario": "phase-sim", "views": 180, "mode": "full", "fbp": {"ssim": 0.5}}
    table = compare_runs([_rep("full", 0.9, 20), bad], labels=["good", "bad"])
    assert "bad: fbp.psnr" in table["missing"] and "bad: hscnn.ssim" in table["missing"]
    assert "missing fields:" in render_table(table)
    with pytest.raises(ValueError):
        compare_runs([bad])
