import json
import subprocess
import sys

import numpy as np
import pytest

from hsct import tomo
from hsct.cli import main
from hsct.dataio import load_array, load_image


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("phantom", "--size", 48, "--seed", 2, "--feature-radius", 3, "--out", d / "gt.hsct") == 0
    assert run("project", "--in", d / "gt.hsct", "--views", 60, "--out", d / "sino.hsct") == 0
    assert run("sparse", "--in", d / "sino.hsct", "--views", 20, "--out", d / "sino20.hsct") == 0
    assert run("noise", "--in", d / "sino20.hsct", "--snr", 30, "--out", d / "noisy.hsct") == 0
    assert run("fbp", "--in", d / "noisy.hsct", "--out", d / "fbp.hsct") == 0
    return d


def test_chain_outputs(chain):
    gt = load_image(chain / "gt.hsct")
    assert gt.shape == (48, 48) and set(np.unique(gt.data)) <= {0.0, 1.0}
    s = tomo.load_sinogram(chain / "sino20.hsct")
    assert s.n_angles == 20
    assert np.array_equal(s.angles_deg, tomo.even_angles(60)[tomo.subsample_indices(60, 20)])
    assert load_image(chain / "fbp.hsct").shape == (48, 48)


def test_eval_prints_metrics(chain, capsys, tmp_path):
    assert run("eval", "--pred", chain / "gt.hsct", "--gt", chain / "gt.hsct", "--json", tmp_path / "m.json") == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["mse"] == 0 and rep["psnr_db"] == "inf" and rep["ssim"] == 1.0
    assert json.loads((tmp_path / "m.json").read_text()) == rep


def test_split_writes_nine_bands(chain, tmp_path):
    assert run("split", "--in", chain / "fbp.hsct", "--out", tmp_path / "bands") == 0
    files = sorted(p.name for p in (tmp_path / "bands").glob("*.hsct"))
    assert len(files) == 9 and "band_dim_s1.hsct" in files
    img = load_image(chain / "fbp.hsct").data
    assert np.allclose(load_array(tmp_path / "bands" / "band_orig_s0.hsct"), img)


def test_recon_tv_writes_trace(chain, tmp_path):
    assert run("recon-tv", "--in", chain / "sino20.hsct", "--iters", 20, "--out", tmp_path / "tv.hsct",
               "--trace", tmp_path / "trace.json") == 0
    trace = json.loads((tmp_path / "trace.json").read_text())["objective"]
    assert len(trace) == 21 and all(b <= a for a, b in zip(trace, trace[1:]))


def test_simulate_phase(chain, tmp_path):
    assert run("simulate-phase", "--in", chain / "gt.hsct", "--views", 30, "--snr", 20,
               "--out", tmp_path / "ph.hsct") == 0
    assert tomo.load_sinogram(tmp_path / "ph.hsct").data.shape == (30, 48)


def test_dataset_train_infer(chain, tmp_path):
    d = tmp_path
    common = ["--patch", 32, "--n-train", 4, "--n-test", 2, "--batch", 2, "--overlap", 8, "--seed", 3]
    assert run("make-dataset", "--inputs", chain / "fbp.hsct", "--gts", chain / "gt.hsct",
               "--out", d / "data", *common) == 0
    assert run("ablate", "--dataset", d / "data", "--mode", "intensity-only", "--epochs", 1,
               "--out", d / "model", *common) == 0
    log = json.loads((d / "model" / "train_log.json").read_text())
    assert log["mode"] == "intensity-only" and list(log["networks"]) == ["stage1_0"]
    assert run("infer", "--model", d / "model", "--in", chain / "fbp.hsct", "--overlap", 8,
               "--out", d / "out.hsct") == 0
    out = load_image(d / "out.hsct").data
    assert out.shape == (48, 48) and 0 <= out.min() and out.max() <= 1


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--arch", "stage2", "--size", 4, "--probes", 3) == 0
    assert "PASS" in capsys.readouterr().out


def test_run_dump_config_applies_overrides(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("scenario = phase-sim\nseed = 4  # base\n")
    assert run("run", "--config", cfg, "--set", "seed=9", "--set", "epochs=2", "--dump-config") == 0
    text = capsys.readouterr().out
    assert "seed = 9" in text and "epochs = 2" in text and "views = 180" in text


def test_run_and_compare(tmp_path, capsys):
    args = ["--set", "size=48", "--set", "n_slices=2", "--set", "full_views=40", "--set", "views=20",
            "--set", "patch=32", "--set", "n_train=4", "--set", "n_test=2", "--set", "batch=2",
            "--set", "overlap=8", "--set", "feature_radius=3"]
    reports = []
    for mode in ("full", "intensity-only"):
        out = tmp_path / mode
        assert run("run", *args, "--set", f"mode={mode}", "--set", "epochs=0", "--out", out) == 0
        reports.append(out / "report.json")
    capsys.readouterr()
    assert run("compare", *reports, "--json", tmp_path / "cmp.json") == 0
    text = capsys.readouterr().out
    rows = [ln.split("  ")[0] for ln in text.splitlines()[2:]]
    assert rows[:3] == ["FBP", "HSCNN intensity-only", "HSCNN"]
    assert json.loads((tmp_path / "cmp.json").read_text())["columns"] == ["sparse-ct-sim/20"]


def test_failures_exit_nonzero_with_stage(tmp_path, capsys):
    assert run("fbp", "--in", tmp_path / "nope.hsct", "--out", tmp_path / "x.hsct") == 1
    assert "stage 'fbp'" in capsys.readouterr().err
    assert run("run", "--set", "model=" + str(tmp_path / "none"), "--set", "size=48", "--set", "n_slices=1",
               "--set", "full_views=20", "--set", "views=10", "--out", tmp_path / "r") == 1
    assert "stage 'load-model'" in capsys.readouterr().err
    assert run("run", "--set", "bogus=1", "--out", tmp_path / "r2") == 1
    assert "unknown key" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "hsct", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout
    res = subprocess.run([sys.executable, "-m", "hsct", "nosuch"], capture_output=True, text=True)
    assert res.returncode != 0
