"""Training loop, city splits and the station-level evaluation protocol."""
from __future__ import annotations

import csv
import logging
import math
import multiprocessing
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .archive import PatchArchive, target_key
from .autodiff import Tensor
from .checkpoint import Checkpoint, save_checkpoint
from .data import POLLUTANTS
from .features import INPUT_NAMES, NormStats, compute_norm_stats, normalize_features
from .geo import GeoPoint
from .model import UNetForecaster

logger = logging.getLogger(__name__)

REPORT_ORDER = ("NO2", "O3", "PM10", "PM25")
METHODS = ("engine", "closest_measurement")


class SplitError(ValueError):
    """A split cannot be formed from the given groups."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    batch_size: int = 48
    epochs: int = 20
    lr: float = 0.001
    seed: int = 0
    eval_fraction: float = 0.2
    validation_fraction: float = 0.1
    micro_batch: int = 4     # patches per forward/backward pass; gradients are summed over a batch


# -- splits --------------------------------------------------------------------------------

def split_by_city(cities: Iterable[str], fraction=0.2, seed=0) -> Tuple[List[str], List[str]]:
    """Seeded city-level split; returns ``(train cities, eval cities)``, both sorted.

    The result depends only on the set of names, the fraction and the seed.
    At least one city lands on each side.
    """
    names = sorted(set(cities))
    if len(names) < 2:
        raise SplitError(f"need at least 2 cities to split, got {len(names)}")
    n_eval = min(max(int(round(fraction * len(names))), 1), len(names) - 1)
    order = np.random.default_rng(seed).permutation(len(names))
    held = {names[k] for k in order[:n_eval]}
    return [c for c in names if c not in held], sorted(held)


def validation_stations(station_ids: Iterable[str], fraction=0.1, seed=0) -> List[str]:
    """Stations whose patches form the validation set (never all of them)."""
    ids = sorted(set(station_ids))
    if len(ids) < 2 or fraction <= 0:
        return []
    n = min(max(int(round(fraction * len(ids))), 1), len(ids) - 1)
    order = np.random.default_rng([seed, 1]).permutation(len(ids))
    return sorted(ids[k] for k in order[:n])


def subsample(indices: Sequence[int], limit: Optional[int], seed, stream) -> List[int]:
    """Seeded subset of at most ``limit`` indices, kept in ascending order."""
    idx = list(indices)
    if limit is None or len(idx) <= limit:
        return idx
    rng = np.random.default_rng([seed, stream])
    return sorted(int(i) for i in rng.choice(idx, size=limit, replace=False))


# -- losses ----------------------------------------------------------------------------------

def model_inputs(batch, norm: NormStats, dtype=np.float32):
    x = normalize_features({k: batch[k] for k in INPUT_NAMES}, norm, dtype=dtype)
    return [x[k] for k in INPUT_NAMES]


def batch_targets(batch, resolutions) -> Dict[float, np.ndarray]:
    return {r: batch[target_key(r)] for r in resolutions}


def multires_loss(forecasts: Dict[float, Tensor], targets: Dict[float, np.ndarray]):
    """Sum over resolutions of the masked MSLE, each averaged over the batch's valid cells.

    Resolutions without a valid cell contribute nothing. Returns ``(loss or
    None, {resolution: float loss})``; None means the batch has no valid
    target at all.
    """
    total = None
    parts = {}
    for res, tgt in targets.items():
        if not np.any(~np.isnan(tgt)):
            continue
        loss, _ = ad.masked_msle(forecasts[res], tgt)
        parts[res] = float(loss.data)
        total = loss if total is None else ad.add(total, loss)
    return total, parts


def accumulate_gradients(model: UNetForecaster, batch, norm: NormStats, micro_batch=None, training=True):
    """Forward/backward over ``batch`` in slices of ``micro_batch`` patches.

    Each slice's per-resolution loss is weighted by its share of the batch's
    valid cells, so the summed value and the gradients left in ``.grad`` equal
    those of one pass over the whole batch (batch norm in training mode
    normalises with per-slice statistics). Gradients are reset first.
    Returns the loss as a float, or None when no target cell is valid.
    """
    for p in model.params.values():
        p.grad = None
    n = len(next(iter(batch.values())))
    step = n if not micro_batch else int(micro_batch)
    resolutions = model.resolutions
    counts = {r: int(np.count_nonzero(~np.isnan(batch[target_key(r)]))) for r in resolutions}
    if not any(counts.values()):
        return None
    total = 0.0
    for k in range(0, n, step):
        part = {name: a[k:k + step] for name, a in batch.items()}
        targets = batch_targets(part, resolutions)
        if not any(np.any(~np.isnan(t)) for t in targets.values()):
            continue
        forecasts = model.forward(*model_inputs(part, norm, model.dtype), training=training)
        loss = None
        for res, tgt in targets.items():
            if not np.any(~np.isnan(tgt)):
                continue
            term, n_part = ad.masked_msle(forecasts[res], tgt)
            term = ad.mul(term, n_part / counts[res])
            loss = term if loss is None else ad.add(loss, term)
        total += float(loss.data)
        if not math.isfinite(total):
            return total
        loss.backward()
        del forecasts, loss, term      # drop this slice's graph before the next forward
    return total


def loss_and_gradients(model: UNetForecaster, batch, norm: NormStats, training=True, micro_batch=None):
    """One optimisation step's loss and gradients. Returns ``(loss or None, {param: gradient})``.

    A batch without any valid target yields ``None`` and all-zero gradients.
    """
    loss = accumulate_gradients(model, batch, norm, micro_batch, training)
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in model.params.items()}
    return loss, grads


# -- normalisation and output scale -------------------------------------------------------------

def fit_norm_stats(archive: PatchArchive, indices: Sequence[int], chunk=16) -> NormStats:
    idx = list(indices)
    if not idx:
        raise ValueError("no patches to compute normalisation statistics from")
    return compute_norm_stats(archive.batch(idx[k:k + chunk]) for k in range(0, len(idx), chunk))


def target_means(archive: PatchArchive, indices: Sequence[int], chunk=32) -> np.ndarray:
    """Mean valid 50 m target per pollutant (1.0 where a pollutant never appears)."""
    key = archive.target_keys[0]
    s = np.zeros(len(POLLUTANTS))
    n = np.zeros(len(POLLUTANTS))
    idx = list(indices)
    for k in range(0, len(idx), chunk):
        t = np.asarray(archive.batch(idx[k:k + chunk])[key], dtype=np.float64)
        ok = ~np.isnan(t)
        s += np.where(ok, t, 0.0).reshape(-1, len(POLLUTANTS)).sum(axis=0)
        n += ok.reshape(-1, len(POLLUTANTS)).sum(axis=0)
    return np.where(n > 0, s / np.maximum(n, 1), 1.0)


# -- training ------------------------------------------------------------------------------

@dataclass
class TrainResult:
    log: List[Tuple[int, int, str, float]] = field(default_factory=list)
    best_val: float = math.inf
    best_epoch: int = -1
    final_train: float = math.nan
    final_val: float = math.nan
    steps: int = 0
    skipped_batches: int = 0


def write_train_log(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "epoch", "split", "loss"])
        for step, epoch, split, loss in rows:
            w.writerow([step, epoch, split, repr(float(loss))])


def mean_loss(model, archive, indices, norm, batch_size) -> float:
    """Patch-count weighted mean of batch losses in inference mode (NaN if nothing valid).

    ``batch_size`` only bounds memory here: batch norm uses running statistics.
    """
    tot, n = 0.0, 0
    idx = list(indices)
    with ad.no_grad():
        for k in range(0, len(idx), batch_size):
            b = archive.batch(idx[k:k + batch_size])
            f = model.forward(*model_inputs(b, norm, model.dtype), training=False)
            loss, _ = multires_loss(f, batch_targets(b, f))
            if loss is not None:
                m = len(idx[k:k + batch_size])
                tot += float(loss.data) * m
                n += m
    return tot / n if n else math.nan


def train(model: UNetForecaster, archive: PatchArchive, train_idx: Sequence[int], val_idx: Sequence[int],
          cfg: TrainConfig, norm: NormStats = None, out_dir=None,
          on_step: Callable[[int, int, float], None] = None,
          val_archive: PatchArchive = None) -> Tuple[TrainResult, NormStats]:
    """Adam on the summed multi-resolution masked MSLE.

    Normalisation statistics and the per-pollutant output scale come from
    the training patches. With ``out_dir`` the best-validation checkpoint is
    kept in ``out_dir/checkpoint``, the last one in ``out_dir/last`` and the
    loss curve in ``out_dir/train_log.csv``. ``val_idx`` indexes
    ``val_archive`` when one is given, ``archive`` otherwise.
    """
    train_idx = list(train_idx)
    if not train_idx:
        raise ValueError("empty training split")
    val_idx = list(val_idx)
    norm = norm or fit_norm_stats(archive, train_idx)
    model.output_scale[...] = target_means(archive, train_idx).astype(model.dtype)
    opt = ad.Adam(model.params, lr=cfg.lr)
    res = TrainResult()
    rng = np.random.default_rng([cfg.seed, 2])
    bs = cfg.batch_size

    for epoch in range(1, cfg.epochs + 1):
        order = [train_idx[k] for k in rng.permutation(len(train_idx))]
        ep_sum, ep_n = 0.0, 0
        for k in range(0, len(order), bs):
            chunk = sorted(order[k:k + bs])
            batch = archive.batch(chunk)
            value = accumulate_gradients(model, batch, norm, cfg.micro_batch, training=True)
            if value is None:
                logger.warning("epoch %d: batch of %d patches has no valid target cell; skipped",
                               epoch, len(chunk))
                res.skipped_batches += 1
                continue
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite training loss at step {res.steps + 1} (epoch {epoch})")
            try:
                opt.step()
            except ad.NonFiniteGradientError as e:
                raise DivergenceError(str(e)) from None
            res.steps += 1
            res.log.append((res.steps, epoch, "train", value))
            ep_sum += value * len(chunk)
            ep_n += len(chunk)
            if on_step:
                on_step(res.steps, epoch, value)
        res.final_train = ep_sum / ep_n if ep_n else math.nan
        if val_idx:
            val = mean_loss(model, archive if val_archive is None else val_archive, val_idx, norm,
                            cfg.micro_batch or bs)
            res.log.append((res.steps, epoch, "val", val))
        else:
            val = res.final_train
        res.final_val = val
        logger.info("epoch %d/%d train %.4f val %.4f", epoch, cfg.epochs, res.final_train, val)
        if math.isfinite(val) and val < res.best_val:
            res.best_val, res.best_epoch = val, epoch
            if out_dir:
                save_checkpoint(Checkpoint.from_model(model, norm, res.steps, {"epoch": epoch, "val_loss": val}),
                                os.path.join(out_dir, "checkpoint"))
        if out_dir:
            write_train_log(res.log, os.path.join(out_dir, "train_log.csv"))
    if out_dir:
        save_checkpoint(Checkpoint.from_model(model, norm, res.steps, {"epoch": cfg.epochs,
                                                                        "val_loss": res.final_val}),
                        os.path.join(out_dir, "last"))
        if res.best_epoch < 0:   # nothing finite to select on: keep the last state
            save_checkpoint(Checkpoint.from_model(model, norm, res.steps, {"epoch": cfg.epochs}),
                            os.path.join(out_dir, "checkpoint"))
    return res, norm


# -- evaluation ----------------------------------------------------------------------------

def station_cell(model_cfg) -> Tuple[int, int]:
    """Row/column of the 50 m output cell containing the patch centre (the station)."""
    grid = model_cfg.hi_grid(GeoPoint(0.0, 0.0))
    i, j = grid.cell_index(0.0, 0.0)
    return int(i), int(j)


@dataclass
class EvalReport:
    """Squared log errors accumulated per method, pollutant and horizon hour.

    Both methods are scored on the same samples: hours where the station
    reported and the benchmark is defined.
    """

    n_out: int
    sq: Dict[str, np.ndarray] = None          # method -> (N_out, 4) sums
    count: np.ndarray = None                  # (N_out, 4)
    excluded_no_benchmark: int = 0
    patches: int = 0

    def __post_init__(self):
        if self.sq is None:
            self.sq = {m: np.zeros((self.n_out, len(POLLUTANTS))) for m in METHODS}
        if self.count is None:
            self.count = np.zeros((self.n_out, len(POLLUTANTS)), dtype=np.int64)

    def add(self, engine, bench, obs):
        """Accumulate one patch: ``engine``/``obs`` ``(N_out, 4)``, ``bench`` ``(4,)``."""
        obs = np.asarray(obs, dtype=np.float64)
        bench = np.broadcast_to(np.asarray(bench, dtype=np.float64), obs.shape)
        have = ~np.isnan(obs)
        ok = have & ~np.isnan(bench)
        self.excluded_no_benchmark += int(np.sum(have & ~ok))
        lo = np.log1p(np.where(ok, obs, 0.0))
        for m, pred in (("engine", engine), ("closest_measurement", bench)):
            p = np.where(ok, np.asarray(pred, dtype=np.float64), 0.0)
            self.sq[m] += np.where(ok, (np.log1p(p) - lo) ** 2, 0.0)
        self.count += ok
        self.patches += 1

    def msle(self, method, pollutant=None, hour=None) -> float:
        """MSLE for a pollutant (or all: the sample-weighted Global value) and hour (or all)."""
        cols = slice(None) if pollutant is None else POLLUTANTS.index(pollutant)
        rows = slice(None) if hour is None else hour - 1
        n = self.count[rows, cols].sum()
        return float(self.sq[method][rows, cols].sum() / n) if n else math.nan

    def n_samples(self, pollutant=None, hour=None) -> int:
        cols = slice(None) if pollutant is None else POLLUTANTS.index(pollutant)
        rows = slice(None) if hour is None else hour - 1
        return int(self.count[rows, cols].sum())

    def summary(self) -> List[dict]:
        """Horizon-averaged rows NO2, O3, PM10, PM25, Global (Global weighted by sample counts)."""
        out = []
        for name in REPORT_ORDER + ("Global",):
            p = None if name == "Global" else name
            out.append({"pollutant": name, "n_samples": self.n_samples(p),
                        **{m: self.msle(m, p) for m in METHODS}})
        return out

    def rows(self) -> List[dict]:
        out = []
        for name in REPORT_ORDER + ("Global",):
            p = None if name == "Global" else name
            for h in list(range(1, self.n_out + 1)) + [None]:
                for m in METHODS:
                    out.append({"pollutant": name, "horizon_h": "avg" if h is None else h, "method": m,
                                "msle": self.msle(m, p, h), "n_samples": self.n_samples(p, h)})
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, ["pollutant", "horizon_h", "method", "msle", "n_samples"],
                               lineterminator="\n")
            w.writeheader()
            for r in self.rows():
                r = dict(r)
                r["msle"] = "" if math.isnan(r["msle"]) else f"{r['msle']:.6f}"
                w.writerow(r)


@dataclass
class ResolutionReport:
    """Diagnostic masked MSLE of the engine against the gridded targets."""

    sq: Dict[Tuple[float, int], float] = field(default_factory=dict)
    n: Dict[Tuple[float, int], int] = field(default_factory=dict)

    @staticmethod
    def sums(pred, target):
        """Per-pollutant ``(squared log error sum, valid cell count)`` of one batch."""
        pred = np.asarray(pred, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        out = []
        for k in range(len(POLLUTANTS)):
            t = target[..., k]
            ok = ~np.isnan(t)
            d = np.log1p(pred[..., k][ok]) - np.log1p(t[ok])
            out.append((float(np.sum(d * d)), int(ok.sum())))
        return out

    def add_sums(self, res, sums):
        for k, (sq, n) in enumerate(sums):
            self.sq[res, k] = self.sq.get((res, k), 0.0) + sq
            self.n[res, k] = self.n.get((res, k), 0) + n

    def add(self, res, pred, target):
        self.add_sums(res, self.sums(pred, target))

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["resolution_m", "pollutant", "msle", "n_cells"])
            for (res, k) in sorted(self.sq):
                n = self.n[res, k]
                w.writerow([int(res), POLLUTANTS[k], f"{self.sq[res, k] / n:.6f}" if n else "", n])


_EVAL = {}


def _eval_chunk(bounds):
    """Station predictions and per-resolution sums for ``idx[lo:hi]`` (runs in workers too)."""
    model, archive, norm, predictor, idx = _EVAL["args"]
    b = archive.batch(idx[bounds[0]:bounds[1]])
    sums = {}
    if predictor is None:
        ci, cj = station_cell(model.cfg)
        with ad.no_grad():
            f = model.forward(*model_inputs(b, norm, model.dtype), training=False)
        pred = f[model.cfg.hi_resolution_m].data[:, :, ci, cj, :]
        sums = {res: ResolutionReport.sums(t.data, b[target_key(res)]) for res, t in f.items()}
    else:
        pred = predictor(b)
    return np.asarray(pred), b["bench"], b["center_obs"], sums


def evaluate(model: UNetForecaster, archive: PatchArchive, norm: NormStats, indices=None, batch_size=8,
             predictor=None, workers=1) -> Tuple[EvalReport, ResolutionReport]:
    """Score the engine and the closest-measurement benchmark at the held-out stations.

    ``predictor(batch) -> (B, N_out, 4)`` replaces the engine's station
    predictions when given (e.g. injected targets for a sanity check); the
    per-resolution diagnostic is then skipped. Chunks of ``batch_size``
    patches are scored independently (in ``workers`` processes) and reduced
    in index order, so the report does not depend on the worker count.
    """
    idx = list(range(len(archive))) if indices is None else list(indices)
    n_out = archive.shapes["center_obs"][0]
    report = EvalReport(n_out)
    by_res = ResolutionReport()
    chunks = [(k, min(k + batch_size, len(idx))) for k in range(0, len(idx), batch_size)]
    _EVAL["args"] = (model, archive, norm, predictor, idx)
    try:
        if workers > 1 and len(chunks) > 1:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(min(workers, len(chunks))) as pool:
                results = pool.imap(_eval_chunk, chunks)
                _reduce(results, report, by_res)
        else:
            _reduce(map(_eval_chunk, chunks), report, by_res)
    finally:
        _EVAL.clear()
    return report, by_res


def _reduce(results, report: EvalReport, by_res: ResolutionReport):
    for pred, bench, obs, sums in results:
        for m in range(len(pred)):
            report.add(pred[m], bench[m], obs[m])
        for res in sorted(sums):
            by_res.add_sums(res, sums[res])
