"""End-to-end CoHNet training through a frozen surrogate, plus the direct baseline."""

from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cohnet._fileio import atomic_write_text
from cohnet.coherence import DecorrelationBudget, volume_decorrelation
from cohnet.metrics import EmptyMaskError, MetricReport
from cohnet.nn import (
    AdamState,
    Network,
    NumericalError,
    adam_step,
    build_unet,
    file_checksum,
    init_weights,
    read_weight_file,
    save_weights,
)
from cohnet.nn.network import _philox
from cohnet.nn.weights import WeightFileError, assign_parameters
from cohnet.raster import (
    DEFAULT_H_MAX,
    DimensionError,
    PatchGrid,
    ScalarRaster,
    read_raster,
    reassemble_patches,
)
from cohnet.surrogate import KZ_SCALE, Nsm, load_nsm, nsm_predict, write_matrix_csv

COHNET_KIND = 2.0
DIRECT_KIND = 3.0


@dataclass
class TrainHyper:
    epochs: int = 100
    batch_size: int = 8
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    base_ch: int = 8
    depth: int = 2
    use_kz: bool = True
    literal_loss: bool = False


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cohnet_loss(pred, ref, mask, literal: bool = False) -> float:
    return loss_and_grad(pred, ref, mask, literal)[0]


def loss_and_grad(pred, ref, mask, literal: bool = False):
    """Masked batch RMSE and its gradient with respect to ``pred``.

    With ``literal=True`` the summed per-sample form ``sum |e_i| / sqrt(N)``
    is used instead. At a perfect fit the zero subgradient is returned.
    """
    pred = np.asarray(pred)
    e = pred.astype(np.float64) - np.asarray(ref, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise EmptyMaskError("loss needs at least one valid reference pixel")
    e = np.where(m, e, 0.0)
    if literal:
        loss = float(np.abs(e).sum() / math.sqrt(n))
        grad = np.sign(e) / math.sqrt(n)
    else:
        loss = float(math.sqrt(float((e * e).sum()) / n))
        grad = e / (n * loss) if loss > 0 else np.zeros_like(e)
    return loss, grad.astype(pred.dtype if pred.dtype.kind == "f" else np.float64)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class CohnetPipeline:
    first_net: Network
    nsm: Nsm
    h_max: float = DEFAULT_H_MAX
    kz_scale: float = KZ_SCALE
    use_kz: bool = True

    def __post_init__(self):
        self.nsm.net.freeze()

    def inputs(self, coherence: np.ndarray, kz: np.ndarray, valid: np.ndarray) -> np.ndarray:
        return stack_inputs(coherence, kz, valid, self.use_kz, self.kz_scale, self.first_net.dtype)

    def batch_loss(self, x, kz, ref, mask, literal=False, backward=True):
        """Loss on one batch; with ``backward`` the first-net gradients are filled in.

        The surrogate output is not clamped here so that the loss stays
        differentiable across the whole coherence range.
        """
        g_opt = self.first_net.forward(x)  # (B, 1, H, W)
        h = self.nsm.heights(g_opt[:, 0], kz)
        loss, dh = loss_and_grad(h, ref, mask, literal)
        if backward:
            d_rows = self.nsm.net.backward((dh * self.nsm.h_max).reshape(-1, 1))
            d_gamma = d_rows[:, 0].reshape(g_opt.shape)
            self.first_net.backward(d_gamma)
        return loss


def stack_inputs(coherence, kz, valid, use_kz=True, kz_scale=KZ_SCALE, dtype=np.float32) -> np.ndarray:
    coherence = np.where(valid, coherence, 0.0)
    chans = [coherence]
    if use_kz:
        chans.append(np.where(valid, kz, 0.0) * kz_scale)
    return np.stack(chans, axis=1).astype(dtype)


def make_pipeline(nsm: Nsm, seed: int = 0, hyper: TrainHyper | None = None) -> CohnetPipeline:
    hyper = hyper or TrainHyper()
    in_ch = 2 if hyper.use_kz else 1
    net = init_weights(build_unet(in_ch, hyper.base_ch, hyper.depth, "sigmoid"), seed)
    return CohnetPipeline(net, nsm, h_max=nsm.h_max, use_kz=hyper.use_kz)


def cohnet_forward(pipeline: CohnetPipeline, coherence: ScalarRaster, kz: ScalarRaster):
    """Optimised volume decorrelation and the surrogate heights derived from it."""
    if coherence.shape != kz.shape:
        raise DimensionError(f"shape mismatch {coherence.shape} vs {kz.shape}")
    ok = coherence.valid & kz.valid
    x = pipeline.inputs(coherence.data[None], kz.data[None], ok[None])
    g = pipeline.first_net.forward(x)[0, 0].astype(np.float64)
    pipeline.first_net.clear()
    gamma_opt = ScalarRaster(np.where(ok, g, 0.0), ok)
    height = nsm_predict(pipeline.nsm, gamma_opt, kz)
    return gamma_opt, height


# ---------------------------------------------------------------------------
# patch data
# ---------------------------------------------------------------------------


@dataclass
class PatchSet:
    coherence: np.ndarray  # (N, P, P)
    kz: np.ndarray
    reference: np.ndarray
    mask: np.ndarray  # bool, valid reference pixels
    valid: np.ndarray  # bool, valid inputs
    records: list = field(default_factory=list)
    budgets: list = field(default_factory=list)

    def __len__(self):
        return len(self.coherence)


def _region_names(manifest, regions):
    names = list(manifest["regions"]) if regions is None else ([regions] if isinstance(regions, str) else list(regions))
    for r in names:
        if r not in manifest["regions"]:
            raise KeyError(f"region {r!r} not in manifest")
    return names


def load_patches(manifest: dict, regions=None, split: str = "train") -> PatchSet:
    root = Path(manifest.get("root", "."))
    coh, kz, ref, mask, valid, recs, budgets = [], [], [], [], [], [], []
    for name in _region_names(manifest, regions):
        budget = DecorrelationBudget(**manifest["regions"][name]["budget"])
        for rec in manifest["regions"][name][split]:
            try:
                c = read_raster(root / rec["coherence"])
                k = read_raster(root / rec["kz"])
                r = read_raster(root / rec["reference"])
                m = read_raster(root / rec["mask"])
            except FileNotFoundError as exc:
                raise FileNotFoundError(f"missing patch file: {exc.filename}") from exc
            coh.append(c.data)
            kz.append(k.data)
            ref.append(r.data)
            mask.append(r.valid & (m.data > 0) & c.valid & k.valid)
            valid.append(c.valid & k.valid)
            recs.append(dict(rec, region=name))
            budgets.append(budget)
    if not coh:
        raise ValueError(f"no {split} patches for regions {regions}")
    return PatchSet(np.stack(coh), np.stack(kz), np.stack(ref), np.stack(mask), np.stack(valid), recs, budgets)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, train_loss, lr, wall_seconds)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "lr", "wall_seconds"])
        for epoch, loss, lr, wall in self.rows:
            w.writerow([epoch, f"{loss:.6f}", f"{lr:.6g}", f"{wall:.3f}"])
        return buf.getvalue()

    def write(self, path) -> None:
        atomic_write_text(path, self.to_csv())

    @property
    def losses(self) -> list[float]:
        return [r[1] for r in self.rows]


def _fit(net: Network, data: PatchSet, hyper: TrainHyper, seed: int, step_fn, log_every=None) -> TrainLog:
    n = len(data)
    per_epoch = math.ceil(n / hyper.batch_size)
    state = AdamState.for_params(
        net.parameters(), lr_start=hyper.lr_start, lr_end=hyper.lr_end, total_steps=hyper.epochs * per_epoch
    )
    rng = _philox(seed, 0xC0E)
    log = TrainLog()
    t0 = time.perf_counter()
    for epoch in range(hyper.epochs):
        perm = rng.permutation(n)
        total, count = 0.0, 0
        lr = state.lr()
        for i in range(0, n, hyper.batch_size):
            b = perm[i : i + hyper.batch_size]
            loss = step_fn(b)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            adam_step(state, net.parameters(), net.gradients())
            total += loss * len(b)
            count += len(b)
        log.rows.append((epoch, total / count, lr, time.perf_counter() - t0))
        if log_every and (epoch % log_every == 0 or epoch == hyper.epochs - 1):
            print(f"epoch {epoch:4d}  loss {total / count:.4f}  lr {lr:.2e}", flush=True)
    net.clear()
    return log


def train_cohnet(manifest: dict, nsm, hyper: TrainHyper | None = None, seed: int = 0, regions=None, verbose=False):
    """Train the coherence network through the frozen surrogate.

    ``nsm`` may be an :class:`Nsm` or a path to its weight file; in the
    latter case the file checksum is verified to be unchanged afterwards.
    Returns ``(pipeline, log)``.
    """
    hyper = hyper or TrainHyper()
    nsm_path = None
    if not isinstance(nsm, Nsm):
        nsm_path = Path(nsm)
        before = file_checksum(nsm_path)
        nsm = load_nsm(nsm_path)
    data = load_patches(manifest, regions, "train")
    pipe = make_pipeline(nsm, seed, hyper)
    x_all = pipe.inputs(data.coherence, data.kz, data.valid)

    def step(b):
        return pipe.batch_loss(x_all[b], data.kz[b], data.reference[b], data.mask[b], hyper.literal_loss)

    log = _fit(pipe.first_net, data, hyper, seed, step, 10 if verbose else None)
    pipe.nsm.net.clear()
    if nsm_path is not None and file_checksum(nsm_path) != before:
        raise RuntimeError("surrogate weight file changed during training")
    return pipe, log


@dataclass
class DirectModel:
    """U-Net mapping coherence (+kz) straight to height via ``sigmoid * h_max``."""

    net: Network
    h_max: float = DEFAULT_H_MAX
    kz_scale: float = KZ_SCALE
    use_kz: bool = True

    def inputs(self, coherence, kz, valid):
        return stack_inputs(coherence, kz, valid, self.use_kz, self.kz_scale, self.net.dtype)


def direct_model_train(manifest: dict, hyper: TrainHyper | None = None, seed: int = 0, regions=None, verbose=False):
    hyper = hyper or TrainHyper()
    in_ch = 2 if hyper.use_kz else 1
    net = init_weights(build_unet(in_ch, hyper.base_ch, hyper.depth, "sigmoid"), seed)
    model = DirectModel(net, use_kz=hyper.use_kz)
    data = load_patches(manifest, regions, "train")
    x_all = model.inputs(data.coherence, data.kz, data.valid)
    scale = net.dtype.type(model.h_max)

    def step(b):
        h = net.forward(x_all[b])[:, 0] * scale
        loss, dh = loss_and_grad(h, data.reference[b], data.mask[b], hyper.literal_loss)
        net.backward((dh * scale)[:, None])
        return loss

    log = _fit(net, data, hyper, seed, step, 10 if verbose else None)
    return model, log


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_model(model, path) -> None:
    if isinstance(model, CohnetPipeline):
        kind, net = COHNET_KIND, model.first_net
    elif isinstance(model, DirectModel):
        kind, net = DIRECT_KIND, model.net
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    in_ch = net.layers[0].in_ch
    base = net.layers[0].out_ch
    meta = [kind, in_ch, base, net.depth, model.h_max, float(model.use_kz), model.kz_scale]
    save_weights(net, path, meta)


def load_model(path, nsm=None):
    """Load a CoHNet first network (needs ``nsm``) or a direct model."""
    meta, params = read_weight_file(path)
    if meta.size < 7 or meta[0] not in (COHNET_KIND, DIRECT_KIND):
        raise WeightFileError(f"{path} is not a CoHNet/direct model file")
    kind, in_ch, base, depth, h_max, use_kz, kz_scale = meta[:7]
    net = build_unet(int(in_ch), int(base), int(depth), "sigmoid")
    assign_parameters(net, params)
    if kind == DIRECT_KIND:
        return DirectModel(net, float(h_max), float(kz_scale), bool(use_kz))
    if nsm is None:
        raise ValueError("a surrogate is required to load a CoHNet model")
    if not isinstance(nsm, Nsm):
        nsm = load_nsm(nsm)
    return CohnetPipeline(net, nsm, float(h_max), float(kz_scale), bool(use_kz))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class PhysicalViaNsm:
    """Surrogate inversion of raw coherence (``source='raw'``) or of the
    budget-compensated volume decorrelation (``source='volcorr'``)."""

    nsm: Nsm
    source: str = "volcorr"


def predict_patches(model, data: PatchSet, batch: int = 8) -> np.ndarray:
    """Height predictions for every patch, shape ``(N, P, P)``."""
    out = np.zeros(data.coherence.shape)
    for i in range(0, len(data), batch):
        sl = slice(i, i + batch)
        if isinstance(model, PhysicalViaNsm):
            for j in range(i, min(i + batch, len(data))):
                c = ScalarRaster(data.coherence[j], data.valid[j])
                if model.source == "volcorr":
                    c = volume_decorrelation(c, data.budgets[j])
                out[j] = nsm_predict(model.nsm, c, ScalarRaster(data.kz[j], data.valid[j])).data
        elif isinstance(model, CohnetPipeline):
            for j in range(i, min(i + batch, len(data))):
                _, h = cohnet_forward(model, ScalarRaster(data.coherence[j], data.valid[j]),
                                      ScalarRaster(data.kz[j], data.valid[j]))
                out[j] = h.data
        elif isinstance(model, DirectModel):
            x = model.inputs(data.coherence[sl], data.kz[sl], data.valid[sl])
            out[sl] = model.net.forward(x)[:, 0] * model.h_max
            model.net.clear()
        else:
            raise TypeError(f"unknown model type {type(model).__name__}")
    return out


def gamma_opt_patches(pipeline: CohnetPipeline, data: PatchSet) -> np.ndarray:
    out = np.zeros(data.coherence.shape)
    for j in range(len(data)):
        g, _ = cohnet_forward(pipeline, ScalarRaster(data.coherence[j], data.valid[j]),
                              ScalarRaster(data.kz[j], data.valid[j]))
        out[j] = g.data
    return out


def reassemble_scenes(manifest: dict, data: PatchSet, values: np.ndarray) -> dict:
    """Full-scene maps from per-patch values, keyed by scene id."""
    by_scene: dict[str, list[int]] = {}
    for idx, rec in enumerate(data.records):
        by_scene.setdefault(rec["scene"], []).append(idx)
    out = {}
    p = manifest["patch_size"]
    for scene, idxs in by_scene.items():
        info = manifest["scenes"][scene]
        grid = PatchGrid.for_shape((info["height"], info["width"]), p, manifest["stride"])
        origins = [tuple(data.records[i]["origin"]) for i in idxs]
        if origins != list(grid.origins):
            raise ValueError(f"patches of scene {scene} do not match its grid")
        patches = [ScalarRaster(values[i], data.valid[i]) for i in idxs]
        out[scene] = reassemble_patches(patches, grid)
    return out


def evaluate(model, manifest: dict, regions=None, split: str = "test", data: PatchSet | None = None) -> MetricReport:
    """Masked metrics of reassembled full-scene heights against the reference."""
    data = data or load_patches(manifest, regions, split)
    pred = reassemble_scenes(manifest, data, predict_patches(model, data))
    ref = reassemble_scenes(manifest, data, np.where(data.mask, data.reference, np.nan))
    p = np.concatenate([pred[s].data[ref[s].valid & pred[s].valid] for s in pred])
    r = np.concatenate([ref[s].data[ref[s].valid & pred[s].valid] for s in pred])
    return MetricReport.compute(p, r)


def cross_region_matrix(models: dict, manifest: dict, regions=None, split: str = "test", path=None) -> np.ndarray:
    """RMSE of each model (rows) on each region's test scenes (columns)."""
    regions = _region_names(manifest, regions)
    if not models or not regions:
        raise ValueError("need at least one model and one region")
    cache = {r: load_patches(manifest, r, split) for r in regions}
    m = np.array([[evaluate(model, manifest, r, split, cache[r]).rmse for r in regions] for model in models.values()])
    if path is not None:
        write_matrix_csv(path, m, list(models), regions)
    return m


def write_log(log: TrainLog, path: str | os.PathLike) -> None:
    log.write(path)
