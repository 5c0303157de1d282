"""Command-line entry point: ``cohnet <subcommand> [options]``.

Every subcommand accepts ``--seed``, ``--out <dir>`` and ``--config <file>``.
The config file is flat ``key = value`` text with ``#`` comments; its keys
are the subcommand's long option names (dashes or underscores), and explicit
command-line options win over the file.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
Set ``COHNET_THREADS`` to cap BLAS worker threads (0 = library default).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from cohnet import __version__
from cohnet._fileio import atomic_write_text
from cohnet.coherence import DecorrelationBudget, SlcPair, estimate_coherence, snr_decorrelation, volume_decorrelation
from cohnet.export import export_map_pgm, export_scatter
from cohnet.metrics import EmptyMaskError
from cohnet.nn import NumericalError, WeightFileError
from cohnet.raster import ComplexRaster, RasterError, ScalarRaster, read_raster, write_raster
from cohnet.rvog import invert_raster
from cohnet.simulate import REGION_PRESETS, REGION_TRAIN_SCENES, SimConfig, build_dataset, load_manifest, region_config

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def parse_config(text: str) -> dict[str, str]:
    """Flat ``key = value`` pairs; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"config line {lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, argv: list[str]) -> None:
    if not args.config:
        return
    try:
        cfg = parse_config(Path(args.config).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from exc
    actions = {a.dest: a for a in parser._actions}
    given = {a.dest for a in parser._actions for s in a.option_strings if any(t == s or t.startswith(s + "=") for t in argv)}
    for key, value in cfg.items():
        if key not in actions or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r} for {parser.prog}")
        if key in given:
            continue
        act = actions[key]
        if isinstance(act, argparse._StoreTrueAction):
            setattr(args, key, value.lower() in ("1", "true", "yes", "on"))
        else:
            try:
                setattr(args, key, act.type(value) if act.type else value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for config key {key!r}: {value!r}") from exc


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _budget(args) -> DecorrelationBudget:
    snr = snr_decorrelation(10.0 ** (args.snr_db / 10.0)) if args.gamma_snr is None else args.gamma_snr
    return DecorrelationBudget(gamma_snr=snr, gamma_rg=args.gamma_rg, gamma_quant=args.gamma_quant,
                               gamma_temp=args.gamma_temp, gamma_sensor=args.gamma_sensor)


def _add_budget(p):
    p.add_argument("--snr-db", type=float, default=10.0, help="SNR in dB for the SNR factor (default 10)")
    p.add_argument("--gamma-snr", type=float, default=None, help="SNR factor directly, overrides --snr-db")
    p.add_argument("--gamma-rg", type=float, default=0.95, help="range decorrelation (default 0.95)")
    p.add_argument("--gamma-quant", type=float, default=1.0, help="quantisation factor (default 1)")
    p.add_argument("--gamma-temp", type=float, default=1.0, help="temporal factor (default 1)")
    p.add_argument("--gamma-sensor", type=float, default=1.0, help="sensor factor (default 1)")


def _add_train(p, epochs=100, batch=8):
    p.add_argument("--epochs", type=int, default=epochs, help=f"training epochs (default {epochs})")
    p.add_argument("--batch-size", type=int, default=batch, help=f"mini-batch size (default {batch})")
    p.add_argument("--lr-start", type=float, default=1e-3, help="initial learning rate (default 1e-3)")
    p.add_argument("--lr-end", type=float, default=1e-4, help="final learning rate (default 1e-4)")


def _add_unet(p):
    p.add_argument("--base-ch", type=int, default=8, help="first-level channels (default 8)")
    p.add_argument("--depth", type=int, default=2, help="pooling levels (default 2)")
    p.add_argument("--no-kz", action="store_true", help="feed coherence only, not kz")
    p.add_argument("--literal-loss", action="store_true", help="use sum|e|/sqrt(N) instead of batch RMSE")


def _train_hyper(args):
    from cohnet.trainer import TrainHyper

    return TrainHyper(epochs=args.epochs, batch_size=args.batch_size, lr_start=args.lr_start, lr_end=args.lr_end,
                      base_ch=args.base_ch, depth=args.depth, use_kz=not args.no_kz, literal_loss=args.literal_loss)


def _regions(text):
    return None if not text else [r for r in text.split(",") if r]


def _load_scalar(path) -> ScalarRaster:
    r = read_raster(path)
    if isinstance(r, ComplexRaster):
        return r.magnitude()
    return r


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    out = _out(args)
    if args.regions:
        names = _regions(args.regions)
        for n in names:
            if n not in REGION_PRESETS:
                raise UsageError(f"unknown region {n!r}; choose from {', '.join(REGION_PRESETS)}")
        configs = [region_config(n, args.seed * 1000 + 100 * i, args.size) for i, n in enumerate(names)]
        n_train = [REGION_TRAIN_SCENES[n] if args.n_train is None else args.n_train for n in names]
    else:
        lo, hi = _floats(args.kz_range)
        configs = [SimConfig(seed=args.seed * 1000, width=args.size, height=args.size, mean_height=args.mean_height,
                             height_spread=args.height_spread, h_max=args.h_max,
                             correlation_length=args.correlation_length, forest_fraction=args.forest_fraction,
                             kz_range=(lo, hi), budget=_budget(args), sigma=args.sigma, mu=args.mu)]
        names = ["default"]
        n_train = 4 if args.n_train is None else args.n_train
    m = build_dataset(configs, names, out, n_train=n_train, n_test=args.n_test, window=args.window,
                      patch_size=args.patch_size, stride=args.stride, ref_noise_std=args.ref_noise_std)
    print(f"wrote {len(m['scenes'])} scenes to {out / 'manifest.json'}")
    return EXIT_OK


def cmd_coherence(args) -> int:
    s1, s2 = read_raster(args.s1), read_raster(args.s2)
    if not (isinstance(s1, ComplexRaster) and isinstance(s2, ComplexRaster)):
        raise RasterError("coherence needs two complex SLC rasters")
    gamma = estimate_coherence(SlcPair(s1, s2), args.window)
    path = _out(args) / "coherence.chr"
    write_raster(gamma, path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_volcorr(args) -> int:
    g = _load_scalar(args.coherence)
    path = _out(args) / "gamma_vol.chr"
    write_raster(volume_decorrelation(g, _budget(args)), path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_invert(args) -> int:
    g = _load_scalar(args.gamma_vol)
    try:
        kz = ScalarRaster(np.full(g.shape, float(args.kz)))
    except ValueError:
        kz = read_raster(args.kz)
    h = invert_raster(g, kz, mode=args.mode, tol=args.tol)
    path = _out(args) / "heights.chr"
    write_raster(h, path)
    print(f"wrote {path} ({int(h.valid.sum())} valid pixels)")
    return EXIT_OK


def cmd_train_surrogate(args) -> int:
    from cohnet.experiments import nsm_kz_grid
    from cohnet.surrogate import NsmHyper, build_nsm_dataset, save_nsm, train_nsm

    if args.kz_values:
        kz = _floats(args.kz_values)
    elif args.manifest:
        m = load_manifest(args.manifest)
        kz = nsm_kz_grid([r["config"]["kz_range"] for r in m["regions"].values()])
    else:
        raise UsageError("train-surrogate needs --kz-values or --manifest")
    hyper = NsmHyper(epochs=args.epochs, batch_size=args.batch_size, lr_start=args.lr_start, lr_end=args.lr_end,
                     hidden=tuple(int(v) for v in args.hidden.split(",")))
    dataset = build_nsm_dataset(kz, args.grid_n, args.mode)
    nsm, report = train_nsm(dataset, hyper, seed=args.seed, h_max=args.h_max)
    out = _out(args)
    save_nsm(nsm, out / "nsm.cwt")
    _write_json(out / "nsm_report.json", {"kz_values": kz, "train_rmse": report.train_rmse,
                                          "held_out_rmse": report.held_out_rmse, "epochs": report.epochs})
    print(f"held-out RMSE {report.held_out_rmse:.3f} m; wrote {out / 'nsm.cwt'}")
    return EXIT_OK


def cmd_train_cohnet(args) -> int:
    from cohnet.trainer import save_model, train_cohnet

    m = load_manifest(args.manifest)
    pipe, log = train_cohnet(m, args.nsm, _train_hyper(args), seed=args.seed, regions=_regions(args.regions),
                             verbose=args.verbose)
    out = _out(args)
    save_model(pipe, out / "cohnet.cwt")
    log.write(out / "cohnet_log.csv")
    print(f"final loss {log.losses[-1]:.4f}; wrote {out / 'cohnet.cwt'}")
    return EXIT_OK


def cmd_train_direct(args) -> int:
    from cohnet.trainer import direct_model_train, save_model

    m = load_manifest(args.manifest)
    model, log = direct_model_train(m, _train_hyper(args), seed=args.seed, regions=_regions(args.regions),
                                    verbose=args.verbose)
    out = _out(args)
    save_model(model, out / "direct.cwt")
    log.write(out / "direct_log.csv")
    print(f"final loss {log.losses[-1]:.4f}; wrote {out / 'direct.cwt'}")
    return EXIT_OK


def _model(spec: str, nsm_path):
    from cohnet.surrogate import load_nsm
    from cohnet.trainer import PhysicalViaNsm, load_model

    if spec in ("raw", "volcorr"):
        if not nsm_path:
            raise UsageError(f"model {spec!r} needs --nsm")
        return PhysicalViaNsm(load_nsm(nsm_path), spec)
    return load_model(spec, nsm_path)


def cmd_eval(args) -> int:
    from cohnet.trainer import load_patches, predict_patches, reassemble_scenes

    m = load_manifest(args.manifest)
    model = _model(args.model, args.nsm)
    data = load_patches(m, _regions(args.regions), args.split)
    pred = reassemble_scenes(m, data, predict_patches(model, data))
    ref = reassemble_scenes(m, data, np.where(data.mask, data.reference, np.nan))
    from cohnet.metrics import MetricReport

    p = np.concatenate([pred[s].data[ref[s].valid & pred[s].valid] for s in pred])
    r = np.concatenate([ref[s].data[ref[s].valid & pred[s].valid] for s in pred])
    report = MetricReport.compute(p, r)
    out = _out(args)
    atomic_write_text(out / "report.json", report.to_json() + "\n")
    if args.maps:
        for scene, raster in sorted(pred.items()):
            write_raster(raster, out / "maps" / f"{scene.replace('/', '_')}_pred.chr")
            write_raster(ref[scene], out / "maps" / f"{scene.replace('/', '_')}_ref.chr")
    print(report.to_json())
    return EXIT_OK


def cmd_matrix(args) -> int:
    from cohnet.trainer import cross_region_matrix

    m = load_manifest(args.manifest)
    models = {}
    for item in args.models.split(","):
        name, _, spec = item.partition("=")
        if not spec:
            raise UsageError(f"--models entries must be name=path, got {item!r}")
        models[name] = _model(spec, args.nsm)
    path = _out(args) / "matrix.csv"
    cross_region_matrix(models, m, _regions(args.regions), args.split, path)
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_export(args) -> int:
    out = _out(args)
    pred = _load_scalar(args.raster)
    stem = Path(args.raster).stem
    rng = tuple(_floats(args.range)) if args.range else None
    if rng is not None and len(rng) != 2:
        raise UsageError("--range takes min,max")
    export_map_pgm(pred, out / f"{stem}.pgm", rng)
    print(f"wrote {out / f'{stem}.pgm'}")
    if args.ref:
        rows = export_scatter(pred, _load_scalar(args.ref), None, out / f"{stem}_scatter.csv")
        print(f"wrote {out / f'{stem}_scatter.csv'} ({rows} rows)")
    return EXIT_OK


def cmd_repro_ordering(args) -> int:
    from cohnet.experiments import repro_ordering
    from cohnet.surrogate import NsmHyper

    res = repro_ordering(_out(args), args.seed, _train_hyper(args), NsmHyper(epochs=args.nsm_epochs),
                         with_direct=args.direct, verbose=args.verbose)
    keys = ["rmse_raw", "rmse_volcorr", "rmse_optimized"] + (["rmse_direct"] if args.direct else [])
    print(json.dumps({k: res[k] for k in keys + ["ordering_holds"]}, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--config", default=None, help="key=value config file")
    common.add_argument("--out", default=".", help="output directory (default .)")

    parser = _Parser(prog="cohnet", description="Forest height from InSAR coherence with a physics surrogate.")
    parser.add_argument("--version", action="version", version=f"cohnet {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(func=fn)
        return p

    p = add("simulate", cmd_simulate, "simulate scenes, patch them and write a manifest")
    p.add_argument("--regions", default="", help="comma-separated region presets (" + ",".join(REGION_PRESETS) + ")")
    p.add_argument("--size", type=int, default=256, help="scene width and height in pixels")
    p.add_argument("--n-train", type=int, default=None, help="train scenes per region (default 4, presets: per region)")
    p.add_argument("--n-test", type=int, default=2, help="test scenes per region")
    p.add_argument("--mean-height", type=float, default=33.0)
    p.add_argument("--height-spread", type=float, default=10.0)
    p.add_argument("--h-max", type=float, default=60.0)
    p.add_argument("--correlation-length", type=float, default=24.0)
    p.add_argument("--forest-fraction", type=float, default=0.85)
    p.add_argument("--kz-range", default="0.06,0.12", help="kz min,max in rad/m")
    p.add_argument("--sigma", type=float, default=0.0, help="extinction in 1/m")
    p.add_argument("--mu", type=float, default=0.0, help="ground-to-volume ratio")
    p.add_argument("--window", type=int, default=7, help="coherence window")
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--stride", type=int, default=32)
    p.add_argument("--ref-noise-std", type=float, default=1.0, help="reference height noise in m")
    _add_budget(p)

    p = add("coherence", cmd_coherence, "estimate complex coherence from an SLC pair")
    p.add_argument("--s1", required=True)
    p.add_argument("--s2", required=True)
    p.add_argument("--window", type=int, default=7)

    p = add("volcorr", cmd_volcorr, "compensate coherence for the decorrelation budget")
    p.add_argument("--coherence", required=True)
    _add_budget(p)

    p = add("invert", cmd_invert, "invert volume decorrelation to heights")
    p.add_argument("--gamma-vol", required=True)
    p.add_argument("--kz", required=True, help="kz raster path or a constant in rad/m")
    p.add_argument("--mode", choices=("sinc", "lut"), default="sinc")
    p.add_argument("--tol", type=float, default=1e-3, help="height tolerance in m")

    p = add("train-surrogate", cmd_train_surrogate, "train the surrogate on the analytic inversion")
    p.add_argument("--kz-values", default="", help="comma-separated kz values")
    p.add_argument("--manifest", default="", help="take the kz span from this dataset instead")
    p.add_argument("--grid-n", type=int, default=200, help="coherence samples per kz")
    p.add_argument("--mode", choices=("sinc", "lut"), default="sinc")
    p.add_argument("--hidden", default="64,64", help="hidden layer widths")
    p.add_argument("--h-max", type=float, default=60.0)
    _add_train(p, epochs=2000, batch=32)

    for name, fn, help_ in (("train-cohnet", cmd_train_cohnet, "train the coherence network through a frozen surrogate"),
                            ("train-direct", cmd_train_direct, "train the direct coherence-to-height baseline")):
        p = add(name, fn, help_)
        p.add_argument("--manifest", required=True)
        if name == "train-cohnet":
            p.add_argument("--nsm", required=True, help="surrogate weight file (left untouched)")
        p.add_argument("--regions", default="", help="train on these regions only")
        p.add_argument("--verbose", action="store_true")
        _add_train(p)
        _add_unet(p)

    p = add("eval", cmd_eval, "evaluate a model on a dataset split and write report.json")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True, help="model weight file, or 'raw' / 'volcorr' for surrogate inversion")
    p.add_argument("--nsm", default="", help="surrogate weight file")
    p.add_argument("--regions", default="")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--maps", action="store_true", help="also write reassembled prediction/reference rasters")

    p = add("matrix", cmd_matrix, "cross-region RMSE matrix")
    p.add_argument("--manifest", required=True)
    p.add_argument("--models", required=True, help="name=path[,name=path...]")
    p.add_argument("--nsm", default="")
    p.add_argument("--regions", default="")
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = add("export", cmd_export, "export a raster as PGM and, with --ref, a scatter CSV")
    p.add_argument("--raster", required=True)
    p.add_argument("--ref", default="", help="reference raster for the scatter export")
    p.add_argument("--range", default="", help="display min,max (default: data range)")

    p = add("repro-ordering", cmd_repro_ordering, "run the default benchmark and report the RMSE ordering")
    p.add_argument("--nsm-epochs", type=int, default=2000)
    p.add_argument("--direct", action="store_true", help="also train the direct baseline")
    p.add_argument("--verbose", action="store_true")
    _add_train(p)
    _add_unet(p)
    return parser


def _thread_limit():
    raw = os.environ.get("COHNET_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"COHNET_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise UsageError("COHNET_THREADS must be >= 0")
    if n == 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(sub, args, argv)
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"cohnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"cohnet: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RasterError, WeightFileError, EmptyMaskError, OSError, ValueError, KeyError) as exc:
        print(f"cohnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
