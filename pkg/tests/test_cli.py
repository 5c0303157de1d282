import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from cohnet.cli import UsageError, main, parse_config
from cohnet.raster import ComplexRaster, ScalarRaster, read_raster, write_raster
from cohnet.rvog import sinc_magnitude
from cohnet.simulate import SimConfig, make_scene, simulate_slc_pair


def tree_digest(root, skip=()):
    """sha256 per file, keyed by relative path."""
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["simulate", "--size", "notanumber"]) == 1
    assert main(["invert", "--kz", "0.1"]) == 1  # missing --gamma-vol
    assert "usage" in capsys.readouterr().err.lower()
    assert main(["--help"]) == 0


def test_data_errors(tmp_path):
    assert main(["eval", "--manifest", str(tmp_path / "nope"), "--model", "raw", "--nsm", "x"]) == 2
    (tmp_path / "bad.chr").write_bytes(b"JUNKJUNKJUNK")
    assert main(["invert", "--gamma-vol", str(tmp_path / "bad.chr"), "--kz", "0.1", "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.cwt").write_bytes(b"CWT1\x01")
    assert main(["eval", "--manifest", str(tmp_path), "--model", "raw", "--nsm", str(tmp_path / "bad.cwt")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort(tmp_path):
    code = main(["train-surrogate", "--kz-values", "0.1", "--grid-n", "20", "--epochs", "50",
                 "--lr-start", "1e30", "--lr-end", "1e30", "--out", str(tmp_path)])
    assert code == 3


def test_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("COHNET_THREADS", "many")
    assert main(["simulate", "--size", "64", "--out", str(tmp_path)]) == 1
    monkeypatch.setenv("COHNET_THREADS", "1")
    assert main(["simulate", "--size", "64", "--n-train", "1", "--n-test", "0", "--out", str(tmp_path)]) == 0


def test_parse_config():
    cfg = parse_config("# comment\nepochs = 5\n\nlr-start=0.01  # trailing\n")
    assert cfg == {"epochs": "5", "lr_start": "0.01"}
    with pytest.raises(UsageError):
        parse_config("just a line")
    with pytest.raises(UsageError):
        parse_config("= 3")


def test_config_file_and_override(tmp_path):
    (tmp_path / "sim.cfg").write_text("size = 64\nn-train = 1\nn_test = 1\nmean-height = 20\n")
    assert main(["simulate", "--config", str(tmp_path / "sim.cfg"), "--out", str(tmp_path / "a")]) == 0
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(m["scenes"]) == 2
    assert m["regions"]["default"]["config"]["mean_height"] == 20.0
    assert main(["simulate", "--config", str(tmp_path / "sim.cfg"), "--n-test", "0", "--out", str(tmp_path / "b")]) == 0
    assert len(json.loads((tmp_path / "b" / "manifest.json").read_text())["scenes"]) == 1
    (tmp_path / "bad.cfg").write_text("no_such_option = 1\n")
    assert main(["simulate", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "c")]) == 1
    (tmp_path / "badval.cfg").write_text("size = big\n")
    assert main(["simulate", "--config", str(tmp_path / "badval.cfg"), "--out", str(tmp_path / "c")]) == 1
    assert main(["simulate", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "c")]) == 1


def test_simulate_deterministic(tmp_path):
    assert main(["simulate", "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    a, b = tree_digest(tmp_path / "a"), tree_digest(tmp_path / "b")
    assert a and a == b
    assert main(["simulate", "--seed", "8", "--size", "64", "--out", str(tmp_path / "c")]) == 0


def test_invert_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    h = rng.uniform(0, 60, (16, 16))
    kz = rng.uniform(0.06, 0.1, (16, 16))
    write_raster(ScalarRaster(sinc_magnitude(h, kz)), tmp_path / "g.chr")
    write_raster(ScalarRaster(kz), tmp_path / "kz.chr")
    assert main(["invert", "--gamma-vol", str(tmp_path / "g.chr"), "--kz", str(tmp_path / "kz.chr"),
                 "--out", str(tmp_path / "o")]) == 0
    out = read_raster(tmp_path / "o" / "heights.chr")
    # heights are stored as f32; the inputs were rounded to f32 too
    g32 = read_raster(tmp_path / "g.chr").data
    from cohnet.rvog import invert_height_sinc

    np.testing.assert_allclose(out.data, invert_height_sinc(g32, read_raster(tmp_path / "kz.chr").data), atol=1e-3)
    assert np.max(np.abs(out.data - h)) < 0.05  # f32 rounding of the coherence near gamma = 1
    write_raster(ScalarRaster(sinc_magnitude(np.full((4, 4), 20.0), 0.1)), tmp_path / "c.chr")
    assert main(["invert", "--gamma-vol", str(tmp_path / "c.chr"), "--kz", "0.1", "--out", str(tmp_path / "p")]) == 0
    np.testing.assert_allclose(read_raster(tmp_path / "p" / "heights.chr").data, 20.0, atol=1e-3)


def test_coherence_volcorr_export_chain(tmp_path):
    pair = simulate_slc_pair(make_scene(SimConfig(seed=1, width=32, height=32)))
    write_raster(pair.s1, tmp_path / "s1.chr")
    write_raster(pair.s2, tmp_path / "s2.chr")
    assert main(["coherence", "--s1", str(tmp_path / "s1.chr"), "--s2", str(tmp_path / "s2.chr"),
                 "--out", str(tmp_path)]) == 0
    g = read_raster(tmp_path / "coherence.chr")
    assert isinstance(g, ComplexRaster) and np.all(np.abs(g.data) <= 1.0 + 1e-6)
    assert main(["coherence", "--s1", str(tmp_path / "coherence.chr"), "--s2", str(tmp_path / "coherence.chr"),
                 "--out", str(tmp_path), "--window", "4"]) == 2
    assert main(["volcorr", "--coherence", str(tmp_path / "coherence.chr"), "--gamma-snr", "0.9", "--gamma-rg", "0.95",
                 "--out", str(tmp_path)]) == 0
    gv = read_raster(tmp_path / "gamma_vol.chr")
    assert gv.data.max() <= 1.0
    assert main(["invert", "--gamma-vol", str(tmp_path / "gamma_vol.chr"), "--kz", "0.08", "--out", str(tmp_path)]) == 0
    assert main(["export", "--raster", str(tmp_path / "heights.chr"), "--ref", str(tmp_path / "heights.chr"),
                 "--range", "0,60", "--out", str(tmp_path)]) == 0
    pgm = (tmp_path / "heights.pgm").read_bytes()
    assert pgm.startswith(b"P5\n32 32\n255\n") and len(pgm) == len(b"P5\n32 32\n255\n") + 1024
    rows = (tmp_path / "heights_scatter.csv").read_text().splitlines()
    assert rows[0] == "ref_m,pred_m" and len(rows) == 1 + int(read_raster(tmp_path / "heights.chr").valid.sum())
    assert main(["export", "--raster", str(tmp_path / "heights.chr"), "--range", "1", "--out", str(tmp_path)]) == 1


def test_training_and_eval_commands(tmp_path):
    d, o = str(tmp_path / "data"), tmp_path / "run"
    assert main(["simulate", "--seed", "2", "--size", "128", "--n-train", "1", "--n-test", "1", "--out", d]) == 0
    assert main(["train-surrogate", "--manifest", d, "--grid-n", "40", "--epochs", "20", "--out", str(o)]) == 0
    rep = json.loads((o / "nsm_report.json").read_text())
    assert len(rep["kz_values"]) == 7
    assert main(["train-surrogate", "--out", str(o)]) == 1
    nsm = str(o / "nsm.cwt")
    common = ["--manifest", d, "--epochs", "1", "--base-ch", "4", "--out", str(o)]
    assert main(["train-cohnet", "--nsm", nsm, *common]) == 0
    assert main(["train-direct", *common]) == 0
    log = (o / "cohnet_log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_loss,lr,wall_seconds" and len(log) == 2
    for model in ("raw", "volcorr", str(o / "cohnet.cwt"), str(o / "direct.cwt")):
        assert main(["eval", "--manifest", d, "--model", model, "--nsm", nsm, "--out", str(o / "ev")]) == 0
        report = json.loads((o / "ev" / "report.json").read_text())
        assert set(report) == {"rmse", "r2", "n_valid", "bias"} and report["n_valid"] > 0
    assert main(["eval", "--manifest", d, "--model", "raw", "--out", str(o / "ev")]) == 1
    assert main(["eval", "--manifest", d, "--model", "raw", "--nsm", nsm, "--maps", "--split", "train",
                 "--out", str(o / "maps")]) == 0
    assert len(list((o / "maps" / "maps").glob("*.chr"))) == 2
    assert main(["matrix", "--manifest", d, "--models", f"raw=raw,c={o / 'cohnet.cwt'}", "--nsm", nsm,
                 "--out", str(o)]) == 0
    lines = (o / "matrix.csv").read_text().splitlines()
    assert lines[0] == "model,default" and [line.split(",")[0] for line in lines[1:]] == ["raw", "c"]
    assert main(["matrix", "--manifest", d, "--models", "oops", "--nsm", nsm, "--out", str(o)]) == 1


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "cohnet", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
    res = subprocess.run([sys.executable, "-m", "cohnet", "bogus"], capture_output=True, text=True)
    assert res.returncode == 1
