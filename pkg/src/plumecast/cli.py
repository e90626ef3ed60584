"""Command-line entry point: ``plumecast {synth,patches,train,eval,forecast}``.

Exit codes:
    0  success
    1  unexpected error
    2  configuration error (unknown key, invalid value, bad argument)
    3  I/O error (missing or corrupt input, unwritable output)
    4  coverage gaps leave a split without patches
    5  training diverged (non-finite loss or gradient)
    6  checkpoint does not match the configured model
    7  inputs do not cover the requested forecast window
"""
from __future__ import annotations

import argparse
import json
import logging
import multiprocessing
import os
import sys
import time

import numpy as np

from .archive import PatchArchive, PatchArchiveWriter
from .checkpoint import FingerprintMismatchError, load_checkpoint
from .config import ConfigError, PROFILES, RunConfig, load_config
from .data import POLLUTANTS, DataFormatError, Dataset, format_hour, parse_hours
from .features import IncompletePatchError, build_inputs, build_patch, candidate_t0s, normalize_features
from .geo import GeoPoint, OutOfCoverageError
from .model import ModelConfigError, UNetForecaster
from .synth import SynthParameterError, generate
from .training import (
    DivergenceError,
    SplitError,
    evaluate,
    split_by_city,
    subsample,
    train,
    validation_stations,
)

logger = logging.getLogger("plumecast")

EXIT_OK, EXIT_UNEXPECTED, EXIT_CONFIG, EXIT_IO, EXIT_NO_PATCHES = 0, 1, 2, 3, 4
EXIT_DIVERGED, EXIT_FINGERPRINT, EXIT_COVERAGE = 5, 6, 7

SPLITS = ("train", "val", "eval")

# Fixed linear ramps for raster export: value 0 maps to the first colour, ``vmax`` µg/m³ and
# above to the second. The palette index of each pixel is round(255 * min(value / vmax, 1)).
RASTER_SCALES = {
    "NO2": {"vmax": 200.0, "low": [255, 255, 255], "high": [94, 24, 137]},
    "O3": {"vmax": 240.0, "low": [255, 255, 255], "high": [0, 104, 55]},
    "PM25": {"vmax": 75.0, "low": [255, 255, 255], "high": [165, 15, 21]},
    "PM10": {"vmax": 150.0, "low": [255, 255, 255], "high": [140, 81, 10]},
}
AQI_REFERENCE = "https://plumelabs.zendesk.com/hc/en-us/articles/360008268434-What-is-the-Plume-AQI-"


class NoPatchesError(RuntimeError):
    """A split ended up empty."""


def default_workers():
    raw = os.environ.get("PLUME_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"PLUME_WORKERS must be an integer, got {raw!r}") from None


def _pool_size(requested):
    return max(1, min(int(requested), os.cpu_count() or 1, 32))


# -- synth ---------------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args):
    out = args.out or cfg.paths.dataset
    t = time.time()
    sizes = generate(cfg.synth, out)
    cfg.dump(os.path.join(out, "run_config.yaml"))
    groups = {}
    for name, size in sizes.items():
        top = name.split("/")[0] + ("/" if "/" in name else "")
        n, b = groups.get(top, (0, 0))
        groups[top] = (n + 1, b + size)
    print(f"dataset: {out}")
    print(f"stations: {cfg.synth.n_stations} in {cfg.synth.n_cities} cities, hours: {cfg.synth.days * 24}, "
          f"seed: {cfg.synth.seed}, {time.time() - t:.1f} s")
    for top in sorted(groups):
        n, b = groups[top]
        print(f"  {top:<20} {n:>5} file(s) {b / 1e6:10.2f} MB")
    return EXIT_OK


# -- patches -------------------------------------------------------------------------------

_WORKER = {}


def _init_patch_worker(dataset_dir, patch_cfg):
    _WORKER["ds"] = Dataset(dataset_dir)
    _WORKER["cfg"] = patch_cfg


def _build_one(pair):
    station, t0 = pair
    return build_patch(station, t0, _WORKER["ds"], _WORKER["cfg"])


def plan_patches(ds, cfg: RunConfig):
    """Deterministic (station, t0) lists per split plus the split description."""
    pc = cfg.patch_config
    tc, sc = cfg.train, cfg.sampling
    cities = ds.cities
    train_c, eval_c = split_by_city(cities.values(), tc.eval_fraction, tc.seed)
    train_st = sorted(s for s, c in cities.items() if c in set(train_c))
    eval_st = sorted(s for s, c in cities.items() if c in set(eval_c))
    val_st = validation_stations(train_st, tc.validation_fraction, tc.seed)
    fit_st = [s for s in train_st if s not in set(val_st)]
    t_train = candidate_t0s(ds, pc, sc.stride_h)
    t_eval = candidate_t0s(ds, pc, sc.eval_stride_h)
    pairs = {
        "train": [(s, t) for t in t_train for s in fit_st],
        "val": [(s, t) for t in t_train for s in val_st],
        "eval": [(s, t) for t in t_eval for s in eval_st],
    }
    limits = {"train": sc.max_train_patches, "val": sc.max_val_patches, "eval": sc.max_eval_patches}
    for k, name in enumerate(SPLITS):
        keep = subsample(range(len(pairs[name])), limits[name], sc.seed, k)
        pairs[name] = [pairs[name][i] for i in keep]
    split = {"train_cities": train_c, "eval_cities": eval_c, "validation_stations": val_st,
             "train_stations": fit_st, "eval_stations": eval_st,
             "seed": tc.seed, "eval_fraction": tc.eval_fraction, "validation_fraction": tc.validation_fraction}
    return pairs, split


def cmd_patches(cfg: RunConfig, args):
    data = args.data or cfg.paths.dataset
    out = args.out or cfg.paths.patches
    ds = Dataset(data)
    pc = cfg.patch_config
    pairs, split = plan_patches(ds, cfg)
    empty = [k for k in ("train", "eval") if not pairs[k]]
    if empty:
        raise NoPatchesError(f"no patches for split(s) {', '.join(empty)}: the data do not cover any "
                             f"{pc.n_in} h history plus {pc.n_out} h horizon window")
    workers = _pool_size(args.workers)
    counts = {}
    t = time.time()
    for name in SPLITS:
        w = PatchArchiveWriter(os.path.join(out, name), pc, extra={"split": name})
        if workers > 1 and len(pairs[name]) > 1:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(workers, _init_patch_worker, (data, pc)) as pool:
                for (s, _), patch in zip(pairs[name], pool.imap(_build_one, pairs[name], chunksize=4)):
                    w.append(patch, city=ds.cities[s])
        else:
            for s, t0 in pairs[name]:
                w.append(build_patch(s, t0, ds, pc), city=ds.cities[s])
        w.close()
        counts[name] = len(pairs[name])
    split["counts"] = counts
    split["patch_config_fingerprint"] = pc.fingerprint()
    with open(os.path.join(out, "split.json"), "w") as f:
        json.dump(split, f, indent=1, sort_keys=True)
        f.write("\n")
    cfg.dump(os.path.join(out, "run_config.yaml"))
    print(f"patches: {out} ({time.time() - t:.1f} s)")
    print(f"  train cities {', '.join(split['train_cities'])}; eval cities {', '.join(split['eval_cities'])}")
    for name in SPLITS:
        print(f"  {name:<6} {counts[name]:>6} patches")
    return EXIT_OK


# -- train ---------------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, args):
    pdir = args.patches or cfg.paths.patches
    out = args.out or cfg.paths.run
    tr = PatchArchive(os.path.join(pdir, "train"))
    vpath = os.path.join(pdir, "val")
    val = PatchArchive(vpath) if os.path.exists(os.path.join(vpath, "manifest.json")) else None
    if len(tr) == 0:
        raise NoPatchesError(f"{pdir}/train holds no patches")
    _check_archive(tr, cfg)
    os.makedirs(out, exist_ok=True)
    cfg.dump(os.path.join(out, "run_config.yaml"))
    model = UNetForecaster(cfg.model, seed=cfg.train.seed, dtype=np.float32)
    t = time.time()

    def progress(step, epoch, loss):
        logger.info("step %d epoch %d loss %.5f (%.0f s)", step, epoch, loss, time.time() - t)

    res, _ = train(model, tr, range(len(tr)), range(len(val)) if val is not None else [], cfg.train,
                   out_dir=out, on_step=progress, val_archive=val)
    print(f"run: {out} ({res.steps} steps, {time.time() - t:.1f} s)")
    print(f"  final train loss {res.final_train:.5f}, final val loss {res.final_val:.5f}")
    print(f"  best val loss {res.best_val:.5f} at epoch {res.best_epoch} -> {os.path.join(out, 'checkpoint')}")
    return EXIT_OK


def _check_archive(archive: PatchArchive, cfg: RunConfig):
    want = cfg.patch_config.fingerprint()
    if archive.manifest.get("config_fingerprint") != want:
        raise FingerprintMismatchError(f"{archive.directory} was built with a different patch configuration")


# -- eval ----------------------------------------------------------------------------------

def _load_model(cfg: RunConfig, path):
    ckpt = load_checkpoint(path, expected_config=cfg.model)
    return ckpt.build_model(), ckpt.norm_stats


def cmd_eval(cfg: RunConfig, args):
    ckpt_dir = args.checkpoint or os.path.join(cfg.paths.run, "checkpoint")
    pdir = args.patches or cfg.paths.patches
    out = args.out or cfg.paths.eval
    model, norm = _load_model(cfg, ckpt_dir)
    archive = PatchArchive(os.path.join(pdir, "eval"))
    _check_archive(archive, cfg)
    predictor = (lambda b: np.nan_to_num(b["center_obs"])) if args.perfect else None
    t = time.time()
    report, by_res = evaluate(model, archive, norm, batch_size=args.batch_size, predictor=predictor,
                              workers=_pool_size(args.workers))
    os.makedirs(out, exist_ok=True)
    report.write_csv(os.path.join(out, "eval_report.csv"))
    if predictor is None:
        by_res.write_csv(os.path.join(out, "eval_by_resolution.csv"))
    summary = {"patches": report.patches, "excluded_no_benchmark": report.excluded_no_benchmark,
               "global_weighting": "sample-weighted mean over pollutants and horizon hours",
               "perfect_predictor": bool(args.perfect), "rows": report.summary()}
    with open(os.path.join(out, "eval_summary.json"), "w") as f:
        json.dump(summary, f, indent=1)
        f.write("\n")
    print(f"eval: {report.patches} patches, {time.time() - t:.1f} s -> {out}")
    print(f"  {'pollutant':<10} {'engine':>10} {'benchmark':>10} {'samples':>9}")
    for r in report.summary():
        label = r["pollutant"] + (" *" if r["pollutant"] == "Global" else "")
        print(f"  {label:<10} {r['engine']:10.4f} {r['closest_measurement']:10.4f} {r['n_samples']:9d}")
    print("  * sample-weighted over pollutants; MSLE averaged over the 24 h horizon")
    if report.excluded_no_benchmark:
        print(f"  {report.excluded_no_benchmark} readings excluded: no benchmark station")
    return EXIT_OK


# -- forecast ------------------------------------------------------------------------------

def _palette(scale):
    lo, hi = np.array(scale["low"], float), np.array(scale["high"], float)
    f = np.arange(256)[:, None] / 255.0
    return np.round(lo + (hi - lo) * f).astype(np.uint8).reshape(-1).tolist()


def write_raster(values, path, pollutant):
    from PIL import Image

    scale = RASTER_SCALES[pollutant]
    idx = np.round(255.0 * np.clip(np.nan_to_num(values) / scale["vmax"], 0.0, 1.0)).astype(np.uint8)
    img = Image.fromarray(idx, mode="P")
    img.putpalette(_palette(scale))
    img.save(path, optimize=False)


def cmd_forecast(cfg: RunConfig, args):
    ckpt_dir = args.checkpoint or os.path.join(cfg.paths.run, "checkpoint")
    data = args.data or cfg.paths.dataset
    out = args.out or cfg.paths.forecast
    try:
        t0 = int(parse_hours([args.t0])[0])
        center = GeoPoint(args.lat, args.lon)
    except (ValueError, DataFormatError) as e:
        raise ConfigError(f"bad forecast location or time: {e}") from None
    model, norm = _load_model(cfg, ckpt_dir)
    ds = Dataset(data)
    t = time.time()
    inputs = build_inputs(center, t0, ds, cfg.patch_config)
    x = normalize_features({k: v[None] for k, v in inputs.items()}, norm, dtype=model.dtype)
    from . import autodiff as ad

    with ad.no_grad():
        f = model.forward(x["hi_hist"], x["hi_const"], x["lo_hist"], x["lo_fcst"], training=False)
    files = []
    for res in sorted(f):
        grid = f[res].data[0]                                   # (N_out, H, W, 4)
        for h in range(grid.shape[0]):
            d = os.path.join(out, f"{int(res)}m", f"h{h + 1:02d}")
            os.makedirs(d, exist_ok=True)
            for k, p in enumerate(POLLUTANTS):
                v = np.ascontiguousarray(grid[h, :, :, k], dtype="<f4")
                v.tofile(os.path.join(d, f"{p}.f32"))
                write_raster(v, os.path.join(d, f"{p}.png"), p)
                files.append(f"{int(res)}m/h{h + 1:02d}/{p}")
    manifest = {
        "center": {"lat": center.lat, "lon": center.lon},
        "t0": format_hour(t0),
        "hours": [format_hour(t0 + h + 1) for h in range(model.cfg.n_out)],
        "resolutions_m": [int(r) for r in sorted(f)],
        "shapes": {str(int(r)): list(f[r].data.shape[2:4]) for r in sorted(f)},
        "grid": "rows north to south, columns west to east, centred on the requested point",
        "dtype": "<f4",
        "units": "ug/m3",
        "layout": "<resolution>m/h<HH>/<pollutant>.f32 and .png",
        "pollutants": list(POLLUTANTS),
        "raster_scales": RASTER_SCALES,
        "raster_rule": "palette index = round(255 * min(value / vmax, 1)); colour linear from low to high",
        "aqi_reference": AQI_REFERENCE,
        "model_fingerprint": model.cfg.fingerprint(),
        "files": len(files),
    }
    with open(os.path.join(out, "manifest.json"), "w") as fobj:
        json.dump(manifest, fobj, indent=1)
        fobj.write("\n")
    print(f"forecast: {len(files)} grids at {len(f)} resolutions, {time.time() - t:.1f} s -> {out}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (sections: synth, model, patch, target, "
                                         "sampling, train, paths)")
    common.add_argument("--profile", default="default", choices=sorted(PROFILES),
                        help="built-in defaults applied before --config (default: %(default)s)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable, applied last")
    common.add_argument("--workers", type=int, default=None,
                        help="worker processes for patch building and evaluation "
                             "(default: $PLUME_WORKERS or 1; 1 is the deterministic single-worker mode)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")

    p = argparse.ArgumentParser(prog="plumecast", description=__doc__.split("\n")[0],
                                epilog=__doc__.split("\n", 1)[1],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="simulate a synthetic dataset")
    s.add_argument("--out", help="dataset directory (default: paths.dataset)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("patches", parents=[common], help="build train/val/eval patch archives")
    s.add_argument("--data", help="dataset directory (default: paths.dataset)")
    s.add_argument("--out", help="patch directory (default: paths.patches)")
    s.set_defaults(func=cmd_patches)

    s = sub.add_parser("train", parents=[common], help="train the forecaster")
    s.add_argument("--patches", help="patch directory (default: paths.patches)")
    s.add_argument("--out", help="run directory for checkpoints and train_log.csv (default: paths.run)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint at held-out stations")
    s.add_argument("--checkpoint", help="checkpoint directory (default: <paths.run>/checkpoint)")
    s.add_argument("--patches", help="patch directory holding eval/ (default: paths.patches)")
    s.add_argument("--out", help="report directory (default: paths.eval)")
    s.add_argument("--batch-size", type=int, default=8, help="patches per forward pass (default: %(default)s)")
    s.add_argument("--perfect", action="store_true",
                   help="inject the stations' own readings as engine predictions (sanity check)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("forecast", parents=[common], help="forecast grids and rasters around a point")
    s.add_argument("--checkpoint", help="checkpoint directory (default: <paths.run>/checkpoint)")
    s.add_argument("--data", help="dataset directory (default: paths.dataset)")
    s.add_argument("--lat", type=float, required=True, help="centre latitude")
    s.add_argument("--lon", type=float, required=True, help="centre longitude")
    s.add_argument("--t0", required=True, help="issuance hour, e.g. 2021-02-01T06:00Z")
    s.add_argument("--out", help="output directory (default: paths.forecast)")
    s.set_defaults(func=cmd_forecast)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.workers is None:
            args.workers = default_workers()
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_config(args.config, args.overrides, args.profile)
        return args.func(cfg, args)
    except (ConfigError, SynthParameterError, ModelConfigError, SplitError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FingerprintMismatchError as e:
        print(f"fingerprint mismatch: {e}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except NoPatchesError as e:
        print(f"no patches: {e}", file=sys.stderr)
        return EXIT_NO_PATCHES
    except (IncompletePatchError, OutOfCoverageError) as e:
        print(f"coverage gap: {e}", file=sys.stderr)
        return EXIT_COVERAGE
    except (OSError, DataFormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
