import csv
import io
import math

import numpy as np
import pytest

from cohnet.metrics import EmptyMaskError, MetricReport
from cohnet.nn import build_mlp, build_unet, file_checksum, init_weights
from cohnet.raster import DimensionError, ScalarRaster, read_raster, write_raster
from cohnet.simulate import SimConfig, build_dataset, load_manifest
from cohnet.surrogate import Nsm, NsmHyper, build_nsm_dataset, nsm_predict, save_nsm, train_nsm
from cohnet.trainer import (
    CohnetPipeline,
    DirectModel,
    PhysicalViaNsm,
    TrainHyper,
    cohnet_forward,
    cohnet_loss,
    cross_region_matrix,
    direct_model_train,
    evaluate,
    gamma_opt_patches,
    load_model,
    load_patches,
    loss_and_grad,
    make_pipeline,
    predict_patches,
    save_model,
    train_cohnet,
)


def scalar_rmse(pred, ref, mask):
    """Plain-python masked RMSE, one pixel at a time."""
    total, n = 0.0, 0
    for p, r, m in zip(np.ravel(pred), np.ravel(ref), np.ravel(mask)):
        if m:
            total += (float(r) - float(p)) ** 2
            n += 1
    return math.sqrt(total / n)


def test_loss_examples():
    assert cohnet_loss(np.array([3.0, 4.0]), np.zeros(2), np.ones(2, bool)) == pytest.approx(3.5355, abs=1e-4)
    assert cohnet_loss(np.ones(4), np.ones(4), np.ones(4, bool)) == 0.0
    pred = np.array([1.0, 2.0, 9.0])
    ref = np.array([1.0, 2.0, 3.0])
    assert cohnet_loss(pred, ref, np.array([True, True, False])) == 0.0
    with pytest.raises(EmptyMaskError):
        cohnet_loss(pred, ref, np.zeros(3, bool))
    # literal per-sample form: sum |e| / sqrt(N)
    assert cohnet_loss(np.array([3.0, -4.0]), np.zeros(2), np.ones(2, bool), literal=True) == pytest.approx(7 / math.sqrt(2))


def test_loss_matches_scalar_routine():
    rng = np.random.default_rng(0)
    for _ in range(50):
        shape = (rng.integers(1, 4), 8, 8)
        pred, ref = rng.uniform(0, 60, shape), rng.uniform(0, 60, shape)
        mask = rng.random(shape) < 0.7
        mask.flat[0] = True
        assert cohnet_loss(pred, ref, mask) == pytest.approx(scalar_rmse(pred, ref, mask), rel=1e-13)


def test_loss_gradient():
    rng = np.random.default_rng(1)
    pred, ref = rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 4))
    mask = rng.random((2, 4, 4)) < 0.6
    _, g = loss_and_grad(pred, ref, mask)
    assert np.all(g[~mask] == 0)
    for idx in list(np.ndindex(pred.shape))[::3]:
        p = pred.copy()
        p[idx] += 1e-6
        up = cohnet_loss(p, ref, mask)
        p[idx] -= 2e-6
        num = (up - cohnet_loss(p, ref, mask)) / 2e-6
        assert g[idx] == pytest.approx(num, rel=1e-5, abs=1e-9)
    _, g0 = loss_and_grad(ref, ref, mask)
    assert not np.any(g0)


def toy_pipeline(seed=0):
    rng = np.random.default_rng(seed)
    nsm_net = init_weights(build_mlp((2, 8, 8, 1)).astype(np.float64), seed)
    for p in nsm_net.parameters():
        p += 0.1 * rng.standard_normal(p.shape)
    first = init_weights(build_unet(2, 2, 1, "sigmoid").astype(np.float64), seed + 1)
    for p in first.parameters():
        p += 0.05 * rng.standard_normal(p.shape)
    return CohnetPipeline(first, Nsm(nsm_net, hidden=(8, 8)))


def test_pipeline_gradient_through_frozen_surrogate():
    rng = np.random.default_rng(2)
    pipe = toy_pipeline()
    assert pipe.nsm.net.frozen
    nsm_before = [p.copy() for p in pipe.nsm.net.parameters()]
    coh = rng.uniform(0.2, 1.0, (2, 8, 8))
    kz = rng.uniform(0.06, 0.12, (2, 8, 8))
    ref = rng.uniform(0, 40, (2, 8, 8))
    mask = rng.random((2, 8, 8)) < 0.8
    x = pipe.inputs(coh, kz, np.ones_like(mask))
    pipe.batch_loss(x, kz, ref, mask)
    grads = [g.copy() for g in pipe.first_net.gradients()]
    assert pipe.nsm.net.gradients() is None

    def f():
        return pipe.batch_loss(x, kz, ref, mask, backward=False)

    h = 1e-6
    for p, g in zip(pipe.first_net.parameters(), grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = f()
            p[idx] = old - h
            down = f()
            p[idx] = old
            num = (up - down) / (2 * h)
            assert abs(g[idx] - num) <= 1e-3 * max(abs(g[idx]), abs(num)) + 1e-9, (idx, g[idx], num)
    for a, b in zip(nsm_before, pipe.nsm.net.parameters()):
        np.testing.assert_array_equal(a, b)


def test_two_outputs_consistent():
    pipe = toy_pipeline(3)
    rng = np.random.default_rng(3)
    valid = rng.random((16, 16)) < 0.9
    coh = ScalarRaster(rng.uniform(0, 1, (16, 16)), valid)
    kz = ScalarRaster(rng.uniform(0.06, 0.12, (16, 16)))
    g, h = cohnet_forward(pipe, coh, kz)
    assert np.all((g.data[g.valid] > 0) & (g.data[g.valid] < 1))
    assert np.array_equal(g.valid, valid) and np.array_equal(h.valid, valid)
    again = nsm_predict(pipe.nsm, g, kz)
    assert np.array_equal(again.data, h.data)
    assert np.all(np.isfinite(h.data)) and h.data.min() >= 0 and h.data.max() <= pipe.h_max
    with pytest.raises(DimensionError):
        cohnet_forward(pipe, coh, ScalarRaster(np.ones((16, 8))))


def test_single_channel_variant():
    nsm = toy_pipeline().nsm
    pipe = make_pipeline(nsm, 0, TrainHyper(use_kz=False, base_ch=4))
    assert pipe.first_net.layers[0].in_ch == 1
    g, _ = cohnet_forward(pipe, ScalarRaster(np.full((8, 8), 0.5)), ScalarRaster(np.full((8, 8), 0.1)))
    assert g.valid.all()


# ---------------------------------------------------------------------------
# training on a small synthetic dataset
# ---------------------------------------------------------------------------

SMALL = TrainHyper(epochs=3, base_ch=4)


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    build_dataset([SimConfig(seed=40, width=128, height=128)], ["default"], root, n_train=1, n_test=1)
    return load_manifest(root)


@pytest.fixture(scope="module")
def small_nsm(tmp_path_factory):
    nsm, _ = train_nsm(build_nsm_dataset([0.06, 0.12], grid_n=40), NsmHyper(epochs=200), seed=0)
    path = tmp_path_factory.mktemp("nsm") / "nsm.cwt"
    save_nsm(nsm, path)
    return path


def test_patches(small_data):
    data = load_patches(small_data)
    assert len(data) == 9 and data.coherence.shape == (9, 64, 64)
    assert data.mask.any() and not (data.mask & ~data.valid).any()
    with pytest.raises(KeyError):
        load_patches(small_data, "nowhere")


def test_train_cohnet_freeze_and_determinism(small_data, small_nsm, tmp_path):
    before = small_nsm.read_bytes()
    pipe, log = train_cohnet(small_data, small_nsm, SMALL, seed=1)
    assert small_nsm.read_bytes() == before
    assert len(log.rows) == 3 and [r[0] for r in log.rows] == [0, 1, 2]
    rows = list(csv.reader(io.StringIO(log.to_csv())))
    assert rows[0] == ["epoch", "train_loss", "lr", "wall_seconds"]
    save_model(pipe, tmp_path / "a.cwt")
    pipe2, log2 = train_cohnet(small_data, small_nsm, SMALL, seed=1)
    save_model(pipe2, tmp_path / "b.cwt")
    assert (tmp_path / "a.cwt").read_bytes() == (tmp_path / "b.cwt").read_bytes()
    assert log.losses == log2.losses
    back = load_model(tmp_path / "a.cwt", small_nsm)
    assert isinstance(back, CohnetPipeline) and back.nsm.net.frozen
    data = load_patches(small_data, split="test")
    np.testing.assert_array_equal(predict_patches(back, data), predict_patches(pipe, data))
    g = gamma_opt_patches(pipe, data)
    assert np.all((g[data.valid] > 0) & (g[data.valid] < 1))
    with pytest.raises(ValueError):
        load_model(tmp_path / "a.cwt")


def test_literal_loss_flag_trains(small_data, small_nsm):
    _, log = train_cohnet(small_data, small_nsm, TrainHyper(epochs=1, base_ch=4, literal_loss=True), seed=0)
    assert math.isfinite(log.losses[0])


def test_direct_model_zero_target(small_data, tmp_path):
    # copy of the dataset whose reference heights are all zero
    root = tmp_path / "zero"
    build_dataset([SimConfig(seed=40, width=128, height=128)], ["default"], root, n_train=1, n_test=0)
    m = load_manifest(root)
    for rec in m["regions"]["default"]["train"]:
        r = read_raster(root / rec["reference"])
        write_raster(ScalarRaster(np.zeros(r.shape), r.valid), root / rec["reference"])
    model, log = direct_model_train(m, TrainHyper(epochs=60, base_ch=4, lr_start=1e-2, lr_end=1e-3), seed=0)
    pred = predict_patches(model, load_patches(m))
    print(f"zero-target direct model max prediction {pred.max():.3f} m")
    assert pred.max() < 1.0
    assert log.losses[0] > log.losses[-1]
    save_model(model, tmp_path / "d.cwt")
    back = load_model(tmp_path / "d.cwt")
    assert isinstance(back, DirectModel)
    np.testing.assert_array_equal(predict_patches(back, load_patches(m)), pred)


def test_evaluate_and_matrix(small_data, small_nsm, tmp_path):
    from cohnet.surrogate import load_nsm

    nsm = load_nsm(small_nsm)
    raw = evaluate(PhysicalViaNsm(nsm, "raw"), small_data)
    vol = evaluate(PhysicalViaNsm(nsm, "volcorr"), small_data)
    assert isinstance(raw, MetricReport) and raw.n_valid == vol.n_valid > 0
    m = cross_region_matrix({"raw": PhysicalViaNsm(nsm, "raw"), "vol": PhysicalViaNsm(nsm, "volcorr")},
                            small_data, path=tmp_path / "m.csv")
    assert m.shape == (2, 1)
    assert m[0, 0] == pytest.approx(raw.rmse) and m[1, 0] == pytest.approx(vol.rmse)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "model,default"
    with pytest.raises(ValueError):
        cross_region_matrix({}, small_data)


def test_checksum_helper(small_nsm):
    assert file_checksum(small_nsm) == file_checksum(small_nsm)
