"""Neural surrogate of the physical height inversion: (gamma_vol, kz) -> height."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from cohnet._fileio import atomic_write_text
from cohnet.nn import (
    AdamState,
    Network,
    NumericalError,
    adam_step,
    build_mlp,
    init_weights,
    read_weight_file,
    save_weights,
)
from cohnet.nn.network import _philox
from cohnet.nn.weights import WeightFileError, assign_parameters
from cohnet.raster import DEFAULT_H_MAX, DimensionError, ScalarRaster
from cohnet.rvog import invert_height_sinc, invert_raster

KZ_SCALE = 1.0 / 0.15
GAMMA_MIN = 0.02
HELD_OUT_EVERY = 7
NSM_KIND = 1.0


@dataclass(frozen=True, eq=False)
class NsmDataset:
    gamma: np.ndarray
    kz: np.ndarray
    target: np.ndarray
    held_out: np.ndarray

    def __len__(self) -> int:
        return len(self.gamma)

    def split(self, held_out: bool):
        sel = self.held_out if held_out else ~self.held_out
        return self.gamma[sel], self.kz[sel], self.target[sel]


def _interleaved(n: int) -> np.ndarray:
    return np.arange(n) % HELD_OUT_EVERY == 0


def physical_inversion(gamma, kz, mode: str = "sinc") -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    kz = np.asarray(kz, dtype=np.float64)
    if mode == "sinc":
        return np.asarray(invert_height_sinc(gamma, kz))
    g = ScalarRaster(gamma.reshape(1, -1))
    k = ScalarRaster(np.broadcast_to(kz, gamma.shape).reshape(1, -1))
    return invert_raster(g, k, mode=mode).data.reshape(gamma.shape)


def build_nsm_dataset(kz_values, grid_n: int = 200, mode: str = "sinc") -> NsmDataset:
    """Dense analytic training grid: ``grid_n`` coherences per kz, kz-major order.

    Every 7th sample (indices 0, 7, 14, ...) is held out.
    """
    kz_values = [float(k) for k in kz_values]
    if not kz_values:
        raise ValueError("kz_values is empty")
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    g = np.linspace(GAMMA_MIN, 1.0, grid_n)
    gamma = np.tile(g, len(kz_values))
    kz = np.repeat(kz_values, grid_n)
    target = physical_inversion(gamma, kz, mode)
    return NsmDataset(gamma, kz, target, _interleaved(len(gamma)))


def nsm_dataset_from_rasters(pairs, mode: str = "sinc") -> NsmDataset:
    """Dataset from (gamma_vol, kz) raster pairs; valid pixels in row-major order."""
    gs, ks = [], []
    for gamma_vol, kz in pairs:
        ok = gamma_vol.valid & kz.valid
        gs.append(gamma_vol.data[ok])
        ks.append(kz.data[ok])
    gamma = np.concatenate(gs) if gs else np.zeros(0)
    kz = np.concatenate(ks) if ks else np.zeros(0)
    target = physical_inversion(gamma, kz, mode) if gamma.size else np.zeros(0)
    return NsmDataset(gamma, kz, target, _interleaved(len(gamma)))


@dataclass
class NsmHyper:
    epochs: int = 2000
    batch_size: int = 32
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    hidden: tuple[int, ...] = (64, 64)


@dataclass
class Nsm:
    """Per-pixel MLP surrogate plus the normalisation it was trained with."""

    net: Network
    h_max: float = DEFAULT_H_MAX
    kz_scale: float = KZ_SCALE
    hidden: tuple[int, ...] = (64, 64)

    def inputs(self, gamma, kz) -> np.ndarray:
        dt = self.net.dtype
        g = np.asarray(gamma, dt).ravel()
        k = np.asarray(kz, dt).ravel() * dt.type(self.kz_scale)
        return np.stack([g, k], axis=1)

    def heights(self, gamma, kz) -> np.ndarray:
        """Unclamped surrogate heights in metres, shaped like ``gamma``."""
        out = self.net.forward(self.inputs(gamma, kz))[:, 0] * self.net.dtype.type(self.h_max)
        return out.reshape(np.shape(gamma))

    def metadata(self) -> list[float]:
        return [NSM_KIND, self.kz_scale, self.h_max, len(self.hidden), *self.hidden]


@dataclass
class NsmReport:
    train_rmse: float
    held_out_rmse: float
    epochs: int
    losses: list[float] = field(default_factory=list)


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a, np.float64) - b) ** 2))) if len(b) else float("nan")


def train_nsm(dataset: NsmDataset, hyper: NsmHyper | None = None, seed: int = 0, h_max: float = DEFAULT_H_MAX):
    """Fit the surrogate by mini-batch Adam on squared normalised height error.

    Returns ``(nsm, report)``; the report holds train and held-out RMSE in
    metres measured on unclamped outputs.
    """
    hyper = hyper or NsmHyper()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    net = init_weights(build_mlp((2, *hyper.hidden, 1), "identity"), seed)
    nsm = Nsm(net, h_max=h_max, hidden=tuple(hyper.hidden))
    g_tr, k_tr, t_tr = dataset.split(held_out=False)
    if len(g_tr) == 0:
        g_tr, k_tr, t_tr = dataset.gamma, dataset.kz, dataset.target
    x = nsm.inputs(g_tr, k_tr)
    y = (t_tr / h_max).astype(np.float32)[:, None]
    n = len(x)
    per_epoch = math.ceil(n / hyper.batch_size)
    state = AdamState.for_params(
        net.parameters(), lr_start=hyper.lr_start, lr_end=hyper.lr_end, total_steps=hyper.epochs * per_epoch
    )
    rng = _philox(seed, 0xB47C)
    losses = []
    for _ in range(hyper.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for i in range(0, n, hyper.batch_size):
            b = perm[i : i + hyper.batch_size]
            d = net.forward(x[b]) - y[b]
            loss = float(np.mean(d * d))
            if not math.isfinite(loss):
                raise NumericalError("non-finite surrogate loss")
            total += loss * len(b)
            net.backward(2.0 * d / len(b))
            adam_step(state, net.parameters(), net.gradients())
        losses.append(total / n)
    report = NsmReport(
        train_rmse=_rmse(nsm.heights(g_tr, k_tr), t_tr),
        held_out_rmse=_rmse(nsm.heights(*dataset.split(held_out=True)[:2]), dataset.split(held_out=True)[2]),
        epochs=hyper.epochs,
        losses=losses,
    )
    net.clear()
    return nsm, report


def save_nsm(nsm: Nsm, path: str | os.PathLike) -> None:
    save_weights(nsm.net, path, nsm.metadata())


def load_nsm(path: str | os.PathLike, frozen: bool = True) -> Nsm:
    meta, params = read_weight_file(path)
    if meta.size < 4 or meta[0] != NSM_KIND:
        raise WeightFileError(f"{path} is not a surrogate weight file")
    n_hidden = int(meta[3])
    hidden = tuple(int(h) for h in meta[4 : 4 + n_hidden])
    net = build_mlp((2, *hidden, 1), "identity")
    assign_parameters(net, params)
    if frozen:
        net.freeze()
    return Nsm(net, h_max=float(meta[2]), kz_scale=float(meta[1]), hidden=hidden)


def nsm_predict(nsm: Nsm, gamma_vol: ScalarRaster, kz: ScalarRaster) -> ScalarRaster:
    """Surrogate heights clamped to ``[0, h_max]``; invalid inputs stay invalid."""
    if gamma_vol.shape != kz.shape:
        raise DimensionError(f"shape mismatch {gamma_vol.shape} vs {kz.shape}")
    ok = gamma_vol.valid & kz.valid
    g = np.where(ok, gamma_vol.data, 0.0)
    k = np.where(ok, kz.data, 0.0)
    h = np.clip(nsm.heights(g, k).astype(np.float64), 0.0, nsm.h_max)
    return ScalarRaster(np.where(ok, h, 0.0), ok)


def fidelity_rmse(nsm: Nsm, dataset: NsmDataset, held_out_only: bool = False) -> float:
    """RMSE of clamped surrogate heights against the clamped physical targets."""
    if held_out_only:
        g, k, t = dataset.split(held_out=True)
    else:
        g, k, t = dataset.gamma, dataset.kz, dataset.target
    pred = np.clip(nsm.heights(g, k), 0.0, nsm.h_max)
    return _rmse(pred, np.clip(t, 0.0, nsm.h_max))


def nsm_fidelity_matrix(nsm_list, region_datasets, names=None, regions=None, path=None) -> np.ndarray:
    """RMSE of every surrogate (rows) against the physical model on every region (columns)."""
    nsm_list, region_datasets = list(nsm_list), list(region_datasets)
    if not nsm_list or not region_datasets:
        raise ValueError("need at least one surrogate and one region")
    m = np.array([[fidelity_rmse(n, d) for d in region_datasets] for n in nsm_list])
    if path is not None:
        write_matrix_csv(path, m, names or [f"model{i}" for i in range(len(nsm_list))],
                         regions or [f"region{j}" for j in range(len(region_datasets))])
    return m


def write_matrix_csv(path, matrix, row_names, col_names) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", *col_names])
    for name, row in zip(row_names, matrix):
        w.writerow([name, *(f"{v:.6f}" for v in row)])
    atomic_write_text(path, buf.getvalue())
