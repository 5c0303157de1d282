"""Synthetic forest scenes, correlated SLC pairs and patch datasets."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from cohnet._fileio import atomic_write_text
from cohnet.coherence import (
    DEFAULT_WINDOW,
    DecorrelationBudget,
    SlcPair,
    estimate_coherence,
    snr_decorrelation,
)
from cohnet.raster import ComplexRaster, ScalarRaster, extract_patches, write_raster
from cohnet.rvog import DEFAULT_THETA, total_coherence

MANIFEST_FORMAT = "cohnet-manifest/1"

# RNG stream ids; each (seed, stream) pair drives an independent Philox generator
STREAM_HEIGHT = 0
STREAM_FOREST = 1
STREAM_KZ = 2
STREAM_SPECKLE = 3
STREAM_REFERENCE = 4

MIN_FOREST_HEIGHT = 2.0


def default_budget() -> DecorrelationBudget:
    # 10 dB SNR and a mild range decorrelation
    return DecorrelationBudget(gamma_snr=snr_decorrelation(10.0), gamma_rg=0.95)


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    width: int = 256
    height: int = 256
    mean_height: float = 33.0
    height_spread: float = 10.0
    h_max: float = 60.0
    correlation_length: float = 24.0
    forest_fraction: float = 0.85
    kz_range: tuple[float, float] = (0.06, 0.12)
    budget: DecorrelationBudget = field(default_factory=default_budget)
    sigma: float = 0.0
    theta: float = DEFAULT_THETA
    mu: float = 0.0
    z0: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.mean_height <= self.h_max):
            raise ValueError("mean_height must lie in [0, h_max]")
        if self.height_spread < 0:
            raise ValueError("height_spread must be >= 0")
        lo, hi = self.kz_range
        if not (0 < lo <= hi):
            raise ValueError("kz_range must be positive and ordered")
        if not (0.0 <= self.forest_fraction <= 1.0):
            raise ValueError("forest_fraction must lie in [0, 1]")
        if self.width < 1 or self.height < 1:
            raise ValueError("scene dimensions must be positive")
        if self.correlation_length <= 0:
            raise ValueError("correlation_length must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kz_range"] = list(self.kz_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "budget" in d and isinstance(d["budget"], dict):
            d["budget"] = DecorrelationBudget(**d["budget"])
        if "kz_range" in d:
            d["kz_range"] = tuple(d["kz_range"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    height_map: ScalarRaster
    forest_mask: np.ndarray
    kz: float
    kz_map: ScalarRaster
    true_gamma: ComplexRaster
    config: SimConfig


def make_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), stream])))


def complex_gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    """Circular complex Gaussian with E|n|^2 = 1 via Box-Muller.

    Draws all radii uniforms first, then all angle uniforms, so the stream
    consumption order is fixed.
    """
    n = int(np.prod(shape))
    u1 = 1.0 - rng.random(n)  # (0, 1]
    u2 = rng.random(n)
    r = np.sqrt(-np.log(u1))  # sqrt(-2 ln u) / sqrt(2)
    z = r * np.exp(2j * np.pi * u2)
    return z.reshape(shape)


def _smooth_field(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    noise = rng.standard_normal(shape)
    spec = ndimage.fourier_gaussian(np.fft.fft2(noise), sigma=scale)
    return np.fft.ifft2(spec).real


def synth_height_field(config: SimConfig) -> tuple[ScalarRaster, np.ndarray]:
    """Smooth random canopy-height map and forest mask for ``config``.

    Forest heights are rescaled so their sample mean and standard deviation
    equal ``mean_height`` and ``height_spread`` before clamping to
    ``[2, h_max]``. Non-forest pixels are 0.
    """
    shape = (config.height, config.width)
    field_h = _smooth_field(make_rng(config.seed, STREAM_HEIGHT), shape, config.correlation_length)
    field_f = _smooth_field(make_rng(config.seed, STREAM_FOREST), shape, config.correlation_length)

    n = field_f.size
    n_forest = int(round(config.forest_fraction * n))
    order = np.argsort(-field_f.ravel(), kind="stable")
    forest = np.zeros(n, dtype=bool)
    forest[order[:n_forest]] = True
    forest = forest.reshape(shape)

    heights = np.zeros(shape)
    if forest.any():
        vals = field_h[forest]
        std = vals.std()
        if config.height_spread == 0 or std == 0:
            scaled = np.full(vals.shape, config.mean_height)
        else:
            scaled = config.mean_height + (vals - vals.mean()) * (config.height_spread / std)
        lo = min(MIN_FOREST_HEIGHT, config.mean_height)
        heights[forest] = np.clip(scaled, lo, config.h_max)
    return ScalarRaster(heights, role="height", h_max=config.h_max), forest


def make_scene(config: SimConfig) -> SyntheticScene:
    heights, forest = synth_height_field(config)
    lo, hi = config.kz_range
    kz = float(lo + (hi - lo) * make_rng(config.seed, STREAM_KZ).random())
    kz_map = ScalarRaster(np.full(heights.shape, kz), role="kz")
    gamma = config.budget.product() * total_coherence(
        heights.data, kz, config.sigma, config.mu, config.theta, config.z0
    )
    return SyntheticScene(heights, forest, kz, kz_map, ComplexRaster(gamma), config)


def simulate_slc_pair(scene: SyntheticScene, seed: int | None = None) -> SlcPair:
    """Single-look SLC pair whose pixel-wise complex correlation is ``true_gamma``."""
    seed = scene.config.seed if seed is None else seed
    rng = make_rng(seed, STREAM_SPECKLE)
    shape = scene.true_gamma.shape
    n1 = complex_gaussian(rng, shape)
    n2 = complex_gaussian(rng, shape)
    g = scene.true_gamma.data
    s2 = np.conj(g) * n1 + np.sqrt(np.clip(1.0 - np.abs(g) ** 2, 0.0, None)) * n2
    return SlcPair(ComplexRaster(n1), ComplexRaster(s2))


def make_reference_heights(scene: SyntheticScene, noise_std: float = 1.0, seed: int | None = None) -> ScalarRaster:
    """LiDAR-like reference: truth plus Gaussian noise on forest, invalid elsewhere."""
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    seed = scene.config.seed if seed is None else seed
    noise = make_rng(seed, STREAM_REFERENCE).standard_normal(scene.height_map.shape) * noise_std
    ref = np.where(scene.forest_mask, np.maximum(scene.height_map.data + noise, 0.0), 0.0)
    return ScalarRaster(ref, scene.forest_mask)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

# Region presets; train-set mean heights follow the Gabon survey averages.
REGION_PRESETS = {
    "mabounie": dict(mean_height=32.7, correlation_length=24.0, kz_range=(0.07, 0.09), snr_db=12.0, gamma_rg=0.97),
    "rabi": dict(mean_height=30.5, correlation_length=16.0, kz_range=(0.09, 0.11), snr_db=6.0, gamma_rg=0.90),
    "pongara": dict(mean_height=31.1, correlation_length=12.0, kz_range=(0.06, 0.08), snr_db=10.0, gamma_rg=0.95),
    "lope": dict(mean_height=37.8, correlation_length=32.0, kz_range=(0.10, 0.12), snr_db=8.0, gamma_rg=0.92),
}
REGION_TRAIN_SCENES = {"mabounie": 5, "rabi": 4, "pongara": 2, "lope": 1}


def region_config(name: str, seed: int, size: int = 256) -> SimConfig:
    p = dict(REGION_PRESETS[name])
    snr = 10.0 ** (p.pop("snr_db") / 10.0)
    budget = DecorrelationBudget(gamma_snr=snr_decorrelation(snr), gamma_rg=p.pop("gamma_rg"))
    return SimConfig(seed=seed, width=size, height=size, budget=budget, **p)


@dataclass
class SceneProducts:
    coherence: ScalarRaster
    kz: ScalarRaster
    reference: ScalarRaster
    mask: ScalarRaster
    truth: ScalarRaster


def scene_products(config: SimConfig, window: int = DEFAULT_WINDOW, ref_noise_std: float = 1.0) -> SceneProducts:
    scene = make_scene(config)
    pair = simulate_slc_pair(scene)
    coh = estimate_coherence(pair, window).magnitude()
    coh = ScalarRaster(np.clip(coh.data, 0.0, 1.0), coh.valid, role="coherence")
    ref = make_reference_heights(scene, ref_noise_std)
    mask = ScalarRaster(ref.valid.astype(np.float64))
    return SceneProducts(coh, scene.kz_map, ref, mask, scene.height_map)


def _as_list(v, n):
    if isinstance(v, int):
        return [v] * n
    v = list(v)
    if len(v) != n:
        raise ValueError("per-region count list has the wrong length")
    return v


def build_dataset(
    configs,
    regions,
    out_dir: str | os.PathLike,
    *,
    n_train=1,
    n_test=1,
    window: int = DEFAULT_WINDOW,
    patch_size: int = 64,
    stride: int = 32,
    ref_noise_std: float = 1.0,
) -> dict:
    """Simulate train/test scenes per region, patch them and write a manifest.

    Scene seeds for a region are ``config.seed + k``: the first ``n_train``
    go to training, the next ``n_test`` to testing. Seeds must be unique
    across the whole dataset. Returns the manifest dict, also written to
    ``out_dir/manifest.json``.
    """
    configs, regions = list(configs), list(regions)
    if not configs:
        raise ValueError("need at least one config")
    if len(configs) != len(regions):
        raise ValueError("one config per region is required")
    if len(set(regions)) != len(regions):
        raise ValueError("duplicate region names")
    n_train = _as_list(n_train, len(regions))
    n_test = _as_list(n_test, len(regions))
    out = Path(out_dir)

    seen: set[int] = set()
    manifest = {
        "format": MANIFEST_FORMAT,
        "patch_size": patch_size,
        "stride": stride,
        "window": window,
        "ref_noise_std": ref_noise_std,
        "regions": {},
        "scenes": {},
    }
    for cfg, name, ntr, nte in zip(configs, regions, n_train, n_test):
        region = {"config": cfg.to_dict(), "budget": asdict(cfg.budget), "train": [], "test": []}
        splits = ["train"] * ntr + ["test"] * nte
        for k, split in enumerate(splits):
            seed = cfg.seed + k
            if seed in seen:
                raise ValueError(f"scene seed {seed} used twice")
            seen.add(seed)
            scene_id = f"{name}/{split}/s{seed}"
            prod = scene_products(replace(cfg, seed=seed), window, ref_noise_std)
            files = {}
            for key in ("coherence", "kz", "reference", "mask", "truth"):
                rel = f"{scene_id}/{key}.chr"
                write_raster(getattr(prod, key), out / rel)
                files[key] = rel
            manifest["scenes"][scene_id] = {
                "region": name,
                "split": split,
                "seed": seed,
                "height": prod.coherence.height,
                "width": prod.coherence.width,
                "kz": float(prod.kz.data[0, 0]),
                "files": files,
            }
            cut = {key: extract_patches(getattr(prod, key), patch_size, stride) for key in ("coherence", "kz", "reference", "mask")}
            grid = cut["coherence"][1]
            for i, origin in enumerate(grid.origins):
                rec = {"scene": scene_id, "seed": seed, "origin": list(origin)}
                for key in ("coherence", "kz", "reference", "mask"):
                    rel = f"{scene_id}/patches/p{i:04d}_{key}.chr"
                    write_raster(cut[key][0][i], out / rel)
                    rec[key] = rel
                region[split].append(rec)
        manifest["regions"][name] = region
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=1))
    return manifest


def load_manifest(path: str | os.PathLike) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path} is not a {MANIFEST_FORMAT} manifest")
    manifest["root"] = str(path.parent)
    return manifest
