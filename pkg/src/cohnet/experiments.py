"""Canned end-to-end experiments on synthetic benchmarks.

``repro_ordering`` runs the single-region comparison of raw-coherence,
budget-compensated and network-optimised inversions through one frozen
surrogate. ``region_benchmark`` trains per-region and pooled models on the
four-region benchmark and writes the cross-region RMSE matrix.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from cohnet._fileio import atomic_write_text
from cohnet.nn import file_checksum
from cohnet.simulate import REGION_PRESETS, REGION_TRAIN_SCENES, SimConfig, build_dataset, region_config
from cohnet.surrogate import NsmHyper, build_nsm_dataset, save_nsm, train_nsm
from cohnet.trainer import (
    PhysicalViaNsm,
    TrainHyper,
    cross_region_matrix,
    direct_model_train,
    evaluate,
    save_model,
    train_cohnet,
)

# Several training scenes so that the networks see more than one kz value.
DEFAULT_TRAIN_SCENES = 4
DEFAULT_TEST_SCENES = 2
NSM_KZ_POINTS = 7
REGION_SCENE_SIZE = 128
REGION_TEST_SCENES = 1


def nsm_kz_grid(kz_ranges, points: int = NSM_KZ_POINTS) -> list[float]:
    """Evenly spaced kz values covering the union of the given ranges."""
    lo = min(r[0] for r in kz_ranges)
    hi = max(r[1] for r in kz_ranges)
    return [float(k) for k in np.linspace(lo, hi, points)]


def build_default_benchmark(out_dir, seed: int = 0, config: SimConfig | None = None,
                            n_train: int = DEFAULT_TRAIN_SCENES, n_test: int = DEFAULT_TEST_SCENES) -> dict:
    config = config or SimConfig()
    config = replace(config, seed=int(seed) * 1000)
    return build_dataset([config], ["default"], out_dir, n_train=n_train, n_test=n_test)


def _fit_nsm(manifest: dict, out: Path, seed: int, nsm_hyper: NsmHyper | None):
    ranges = [tuple(r["config"]["kz_range"]) for r in manifest["regions"].values()]
    dataset = build_nsm_dataset(nsm_kz_grid(ranges))
    h_max = max(r["config"]["h_max"] for r in manifest["regions"].values())
    nsm, report = train_nsm(dataset, nsm_hyper, seed=seed, h_max=h_max)
    nsm_path = out / "nsm.cwt"
    save_nsm(nsm, nsm_path)
    return nsm_path, report


def _dump(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def repro_ordering(out_dir, seed: int = 0, hyper: TrainHyper | None = None, nsm_hyper: NsmHyper | None = None,
                   config: SimConfig | None = None, with_direct: bool = False, verbose: bool = False) -> dict:
    """Default single-region benchmark: returns and writes ``ordering.json``.

    Keys ``rmse_raw``, ``rmse_volcorr`` and ``rmse_optimized`` are test-set
    RMSEs (m) of surrogate inversions of raw coherence, of the
    budget-compensated volume decorrelation and of the network output.
    """
    out = Path(out_dir)
    hyper = hyper or TrainHyper()
    manifest = build_default_benchmark(out / "data", seed, config)
    manifest["root"] = str(out / "data")
    nsm_path, nsm_report = _fit_nsm(manifest, out, seed, nsm_hyper)
    nsm_before = file_checksum(nsm_path)
    pipe, log = train_cohnet(manifest, nsm_path, hyper, seed=seed, verbose=verbose)
    nsm_after = file_checksum(nsm_path)
    save_model(pipe, out / "cohnet.cwt")
    log.write(out / "cohnet_log.csv")

    reports = {
        "raw": evaluate(PhysicalViaNsm(pipe.nsm, "raw"), manifest),
        "volcorr": evaluate(PhysicalViaNsm(pipe.nsm, "volcorr"), manifest),
        "optimized": evaluate(pipe, manifest),
    }
    result = {
        "seed": seed,
        "epochs": hyper.epochs,
        "nsm_held_out_rmse": nsm_report.held_out_rmse,
        "nsm_checksum_before": f"{nsm_before:016x}",
        "nsm_checksum_after": f"{nsm_after:016x}",
        "rmse_optimized_train": evaluate(pipe, manifest, split="train").rmse,
        "loss_first_epoch": log.losses[0],
        "loss_last_epoch": log.losses[-1],
    }
    for k, rep in reports.items():
        result[f"rmse_{k}"] = rep.rmse
        result[f"bias_{k}"] = rep.bias
        result[f"r2_{k}"] = rep.r2
    if with_direct:
        direct, dlog = direct_model_train(manifest, hyper, seed=seed, verbose=verbose)
        save_model(direct, out / "direct.cwt")
        dlog.write(out / "direct_log.csv")
        rep = evaluate(direct, manifest)
        result.update(rmse_direct=rep.rmse, bias_direct=rep.bias, r2_direct=rep.r2,
                      rmse_direct_train=evaluate(direct, manifest, split="train").rmse)
    result["ordering_holds"] = bool(result["rmse_raw"] > result["rmse_volcorr"] > result["rmse_optimized"])
    _dump(out / "ordering.json", result)
    return result


def build_region_benchmark(out_dir, seed: int = 0, size: int = REGION_SCENE_SIZE, regions=None) -> dict:
    """Four synthetic regions with disjoint seed blocks and unequal train sizes."""
    regions = list(regions or REGION_PRESETS)
    configs = [region_config(name, int(seed) * 1000 + 100 * i, size) for i, name in enumerate(regions)]
    n_train = [REGION_TRAIN_SCENES.get(name, 1) for name in regions]
    return build_dataset(configs, regions, out_dir, n_train=n_train, n_test=REGION_TEST_SCENES)


def region_benchmark(out_dir, seed: int = 0, hyper: TrainHyper | None = None, nsm_hyper: NsmHyper | None = None,
                     size: int = REGION_SCENE_SIZE, verbose: bool = False) -> dict:
    """Train one model per region plus a pooled one; write ``matrix.csv``.

    Returns a dict with ``rows``, ``columns`` and the ``rmse`` matrix (list
    of lists), plus the training-split RMSE of each model on its own data.
    """
    out = Path(out_dir)
    hyper = hyper or TrainHyper()
    manifest = build_region_benchmark(out / "data", seed, size)
    manifest["root"] = str(out / "data")
    regions = list(manifest["regions"])
    nsm_path, _ = _fit_nsm(manifest, out, seed, nsm_hyper)
    models, own_train = {}, {}
    for name in [*regions, "pooled"]:
        subset = regions if name == "pooled" else [name]
        if verbose:
            print(f"training {name}", flush=True)
        pipe, log = train_cohnet(manifest, nsm_path, hyper, seed=seed, regions=subset, verbose=verbose)
        save_model(pipe, out / f"cohnet_{name}.cwt")
        log.write(out / f"cohnet_{name}_log.csv")
        models[name] = pipe
        own_train[name] = evaluate(pipe, manifest, subset, split="train").rmse
    m = cross_region_matrix(models, manifest, regions, path=out / "matrix.csv")
    result = {"rows": list(models), "columns": regions, "rmse": m.tolist(), "train_rmse": own_train}
    _dump(out / "matrix.json", result)
    return result


def worst_columns(result: dict) -> dict:
    return {row: float(max(vals)) for row, vals in zip(result["rows"], result["rmse"])}


__all__ = [
    "DEFAULT_TEST_SCENES",
    "DEFAULT_TRAIN_SCENES",
    "build_default_benchmark",
    "build_region_benchmark",
    "nsm_kz_grid",
    "region_benchmark",
    "repro_ordering",
    "worst_columns",
]

