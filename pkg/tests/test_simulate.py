import json
import math
from dataclasses import replace

import numpy as np
import pytest

from cohnet.coherence import DecorrelationBudget, estimate_coherence, volume_decorrelation
from cohnet.metrics import rmse
from cohnet.raster import ComplexRaster, read_raster
from cohnet.rvog import invert_raster, total_coherence, volume_coherence
from cohnet.simulate import (
    REGION_PRESETS,
    SimConfig,
    SyntheticScene,
    build_dataset,
    complex_gaussian,
    load_manifest,
    make_reference_heights,
    make_rng,
    make_scene,
    region_config,
    simulate_slc_pair,
    synth_height_field,
)


def constant_scene(gamma, size=256, seed=0):
    cfg = SimConfig(seed=seed, width=size, height=size)
    heights, forest = synth_height_field(cfg)
    kz = make_scene(cfg).kz_map
    return SyntheticScene(heights, forest, 0.1, kz, ComplexRaster(np.full((size, size), gamma, complex)), cfg)


def mean_coherence(gamma, window=7, seed=0, size=256):
    pair = simulate_slc_pair(constant_scene(gamma, size, seed))
    g = estimate_coherence(pair, window)
    return float(np.abs(g.data[g.valid]).mean())


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(mean_height=70.0)
    with pytest.raises(ValueError):
        SimConfig(kz_range=(0.12, 0.06))
    with pytest.raises(ValueError):
        SimConfig(kz_range=(0.0, 0.06))
    with pytest.raises(ValueError):
        SimConfig(forest_fraction=1.5)
    cfg = SimConfig(seed=5, budget=DecorrelationBudget(0.8, 0.9))
    assert SimConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_complex_gaussian_moments():
    n = complex_gaussian(make_rng(1, 0), (200_000,))
    assert abs(np.mean(np.abs(n) ** 2) - 1.0) < 0.01
    assert abs(np.mean(n)) < 0.01
    assert abs(np.mean(n * n)) < 0.01  # circular
    assert np.var(n.real) == pytest.approx(0.5, abs=0.01)


def test_height_field_statistics():
    heights, forest = synth_height_field(SimConfig(seed=3))
    v = heights.data[forest]
    assert abs(v.mean() - 33.0) <= 1.0
    assert abs(v.std() - 10.0) <= 1.5
    assert abs(forest.mean() - 0.85) <= 0.02
    assert np.all(heights.data[~forest] == 0)
    assert v.min() >= 2.0 and v.max() <= 60.0


def test_height_field_degenerate_spread_and_determinism():
    heights, forest = synth_height_field(SimConfig(seed=4, height_spread=0.0))
    assert np.all(heights.data[forest] == 33.0)
    a = make_scene(SimConfig(seed=9))
    b = make_scene(SimConfig(seed=9))
    assert a.height_map.equals(b.height_map) and a.true_gamma.equals(b.true_gamma)
    assert np.array_equal(a.forest_mask, b.forest_mask) and a.kz == b.kz
    c = make_scene(SimConfig(seed=10))
    assert not np.array_equal(a.height_map.data, c.height_map.data)


def test_true_gamma_consistency():
    cfg = SimConfig(seed=2, width=64, height=64, sigma=0.05, budget=DecorrelationBudget(0.9, 0.95, 0.99))
    sc = make_scene(cfg)
    f = sc.forest_mask
    want = cfg.budget.product() * volume_coherence(sc.height_map.data, sc.kz, cfg.sigma, cfg.theta, cfg.z0)
    np.testing.assert_array_equal(sc.true_gamma.data[f], want[f])
    assert np.all(np.abs(sc.true_gamma.data) <= 1.0)
    assert np.all((sc.kz_map.data >= 0.06) & (sc.kz_map.data <= 0.12))
    assert np.unique(sc.kz_map.data).size == 1
    np.testing.assert_array_equal(
        sc.true_gamma.data, cfg.budget.product() * total_coherence(sc.height_map.data, sc.kz, cfg.sigma, 0.0, cfg.theta)
    )


def test_perfect_coherence_pair():
    pair = simulate_slc_pair(constant_scene(1.0, size=32))
    np.testing.assert_array_equal(pair.s1.data, pair.s2.data)
    g = estimate_coherence(pair)
    np.testing.assert_allclose(np.abs(g.data), 1.0, atol=1e-12)


def test_zero_coherence_bias():
    # boxcar estimator under independence: E|gamma| ~ sqrt(pi) / (2 sqrt(L))
    expected = math.sqrt(math.pi) / (2 * math.sqrt(49))
    assert abs(mean_coherence(0.0) - expected) <= 0.03


def test_constant_coherence_recovered():
    assert 0.65 <= mean_coherence(0.7) <= 0.75


def test_estimator_bias_decreases_with_window():
    biases = [abs(mean_coherence(0.3, w, seed=1) - 0.3) for w in (5, 7, 11)]
    assert biases[0] > biases[1] > biases[2]


def test_slc_pair_deterministic():
    sc = make_scene(SimConfig(seed=1, width=32, height=32))
    a, b = simulate_slc_pair(sc), simulate_slc_pair(sc)
    assert a.s1.equals(b.s1) and a.s2.equals(b.s2)
    c = simulate_slc_pair(sc, seed=2)
    assert not c.s1.equals(a.s1)


def test_reference_heights():
    sc = make_scene(SimConfig(seed=6, width=128, height=128))
    ref0 = make_reference_heights(sc, 0.0)
    np.testing.assert_array_equal(ref0.data[sc.forest_mask], sc.height_map.data[sc.forest_mask])
    assert np.array_equal(ref0.valid, sc.forest_mask)
    ref1 = make_reference_heights(sc, 1.0)
    assert rmse(ref1, sc.height_map, sc.forest_mask) == pytest.approx(1.0, abs=0.05)
    assert ref1.data.min() >= 0.0
    with pytest.raises(ValueError):
        make_reference_heights(sc, -1.0)


def test_end_to_end_identifiability():
    """Noiseless budget, window 7: estimate -> compensate -> sinc inversion."""
    cfg = SimConfig(seed=0, budget=DecorrelationBudget(1.0, 1.0))
    sc = make_scene(cfg)
    g = volume_decorrelation(estimate_coherence(simulate_slc_pair(sc), 7), cfg.budget)
    h = invert_raster(g, sc.kz_map)
    err = rmse(h, sc.height_map, sc.forest_mask)
    print(f"identifiability RMSE = {err:.3f} m (bound 3.0 m)")
    assert err <= 3.0, f"estimate/compensate/invert RMSE {err:.3f} m exceeds 3.0 m"


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def test_build_dataset_single_region(tmp_path):
    m = build_dataset([SimConfig(seed=11, width=128, height=128)], ["r"], tmp_path, n_train=1, n_test=1)
    assert len(m["regions"]["r"]["train"]) == 9
    assert len(m["regions"]["r"]["test"]) == 9
    seeds = {rec["seed"] for rec in m["regions"]["r"]["train"]} | {rec["seed"] for rec in m["regions"]["r"]["test"]}
    assert seeds == {11, 12}
    rec = m["regions"]["r"]["train"][4]
    for key in ("coherence", "kz", "reference", "mask"):
        r = read_raster(tmp_path / rec[key])
        assert r.shape == (64, 64)
    loaded = load_manifest(tmp_path)
    assert loaded["root"] == str(tmp_path)
    assert loaded["regions"] == m["regions"]


def test_build_dataset_deterministic(tmp_path):
    cfg = [SimConfig(seed=3, width=64, height=64)]
    build_dataset(cfg, ["a"], tmp_path / "x")
    build_dataset(cfg, ["a"], tmp_path / "y")
    files = sorted(p.relative_to(tmp_path / "x") for p in (tmp_path / "x").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()


def test_build_dataset_errors(tmp_path):
    cfg = SimConfig(seed=1, width=64, height=64)
    with pytest.raises(ValueError):
        build_dataset([cfg, cfg], ["a", "a"], tmp_path)
    with pytest.raises(ValueError):
        build_dataset([cfg, replace(cfg, seed=2)], ["a", "b"], tmp_path)  # seeds 1,2 overlap 2,3
    with pytest.raises(ValueError):
        build_dataset([], [], tmp_path)


def test_region_height_ordering(tmp_path):
    names = list(REGION_PRESETS)
    cfgs = [region_config(n, 1000 * (i + 1), 128) for i, n in enumerate(names)]
    m = build_dataset(cfgs, names, tmp_path, n_train=1, n_test=0)
    means = {}
    for n in names:
        vals = []
        for rec in m["regions"][n]["train"]:
            r = read_raster(tmp_path / rec["reference"])
            vals.append(r.data[r.valid])
        means[n] = np.concatenate(vals).mean()
    expected = sorted(names, key=lambda n: REGION_PRESETS[n]["mean_height"])
    assert sorted(names, key=means.get) == expected
