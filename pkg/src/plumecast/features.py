"""Gridding of raw sources into model inputs, masked targets and patches."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import kernels
from .benchmark import closest_measurement_benchmark
from .data import (
    POLLUTANTS,
    ROAD_CATEGORIES,
    WEATHER_CHANNELS,
    PHYSICAL_CHANNELS,
    TRAFFIC_CHANNELS,
    RejectedRecordError,
    StationMeasurement,
    format_hour,
)
from .geo import EMPTY_WEIGHT, TRUNCATE_SIGMAS, GeoPoint, GridSpec, bilinear_sample

logger = logging.getLogger(__name__)

DEFAULT_CAPS = {"NO2": 1000.0, "O3": 800.0, "PM25": 1500.0, "PM10": 2500.0}
TARGET_RESOLUTIONS = (50.0, 100.0, 200.0, 20000.0)

HI_HIST_CHANNELS = tuple(f"{p}_value" for p in POLLUTANTS) + tuple(f"{p}_weight" for p in POLLUTANTS) \
    + TRAFFIC_CHANNELS
HI_CONST_CHANNELS = ("roads", "major_roads")
LO_HIST_CHANNELS = tuple(f"{p}_value" for p in POLLUTANTS) + tuple(f"{p}_weight" for p in POLLUTANTS)
LO_FCST_CHANNELS = WEATHER_CHANNELS + tuple(f"physical_{p}" for p in PHYSICAL_CHANNELS)

# channels that hold concentrations: log1p before standardisation
LOG_CHANNELS = {"hi_hist": (0, 1, 2, 3), "hi_const": (), "lo_hist": (0, 1, 2, 3), "lo_fcst": (6, 7, 8, 9)}


class IncompletePatchError(ValueError):
    """A source does not cover the time window of a patch."""


@dataclass(frozen=True)
class TargetConfig:
    sigma_factor: float = 3.0
    weight_threshold: float = 0.5


@dataclass(frozen=True)
class PatchConfig:
    n_in: int = 24
    n_out: int = 24
    hi_size: int = 64
    hi_resolution_m: float = 50.0
    lo_size: int = 20
    lo_resolution_m: float = 20000.0
    hi_sigma_m: float = 5000.0
    lo_sigma_m: float = 50000.0
    target: TargetConfig = field(default_factory=TargetConfig)

    def target_sizes(self) -> Dict[float, int]:
        r = self.hi_resolution_m
        return {r: self.hi_size, 2 * r: self.hi_size // 2, 4 * r: self.hi_size // 4,
                self.lo_resolution_m: self.lo_size}

    def fingerprint(self) -> str:
        canon = json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# -- measurement validation ------------------------------------------------------------

REJECTION_REASONS = ("unknown_pollutant", "non_finite", "negative", "above_cap", "duplicate")


def _reasons(pollutant, value, caps):
    caps = {**DEFAULT_CAPS, **(caps or {})}
    pol = pd.Series(pollutant, dtype=object)
    val = pd.to_numeric(pd.Series(value), errors="coerce").to_numpy(dtype=float)
    reason = np.full(len(val), "", dtype=object)
    unknown = ~pol.isin(POLLUTANTS).to_numpy()
    cap = pol.map(caps).to_numpy(dtype=float)
    nonfinite = ~np.isfinite(val)
    with np.errstate(invalid="ignore"):
        negative = val < 0
        above = val > cap
    for mask, name in ((above, "above_cap"), (negative, "negative"), (nonfinite, "non_finite"),
                       (unknown, "unknown_pollutant")):
        reason[mask] = name
    return reason


def validate_frame(df: pd.DataFrame, caps=None) -> Tuple[pd.DataFrame, Dict[str, int]]:
    """Drop invalid readings; returns the clean frame and counts per rejection reason.

    Among otherwise valid readings, later duplicates of a (station, time,
    pollutant) key are rejected.
    """
    reason = _reasons(df["pollutant"].to_numpy(), df["value"].to_numpy(), caps)
    ok = reason == ""
    dup = df[ok].duplicated(subset=["station_id", "time", "pollutant"], keep="first").to_numpy()
    idx = np.flatnonzero(ok)
    reason[idx[dup]] = "duplicate"
    report = {r: int(np.sum(reason == r)) for r in REJECTION_REASONS}
    return df[reason == ""].reset_index(drop=True), report


def validate_measurements(raw: Sequence[StationMeasurement], caps=None):
    """List form of :func:`validate_frame`: ``(clean list, rejection counts)``."""
    raw = list(raw)
    if not raw:
        return [], {r: 0 for r in REJECTION_REASONS}
    df = pd.DataFrame({"station_id": [m.station_id for m in raw],
                       "time": [m.time for m in raw],
                       "pollutant": [m.pollutant for m in raw],
                       "value": [m.value for m in raw],
                       "_k": np.arange(len(raw))})
    clean, report = validate_frame(df, caps)
    return [raw[k] for k in clean["_k"]], report


# -- road geometry ---------------------------------------------------------------------

MIN_RUN_M = 1e-6


def _piece_cells(x0, y0, x1, y1, west, north, res, h, w):
    """Flat indices of cells whose interior the straight piece passes through."""
    dx, dy = x1 - x0, y1 - y0
    ts = [np.array([0.0, 1.0])]
    if dx != 0.0:
        lo = max(0, math.ceil((min(x0, x1) - west) / res))
        hi = min(w, math.floor((max(x0, x1) - west) / res))
        if hi >= lo:
            ts.append((west + np.arange(lo, hi + 1) * res - x0) / dx)
    if dy != 0.0:
        lo = max(0, math.ceil((north - max(y0, y1)) / res))
        hi = min(h, math.floor((north - min(y0, y1)) / res))
        if hi >= lo:
            ts.append((north - np.arange(lo, hi + 1) * res - y0) / dy)
    t = np.unique(np.clip(np.concatenate(ts), 0.0, 1.0))
    if len(t) < 2:
        return np.zeros(0, dtype=np.int64)
    # runs shorter than MIN_RUN_M are round-off slivers at corners and edges
    length = math.hypot(dx, dy)
    mids = 0.5 * (t[:-1] + t[1:])[np.diff(t) * length > MIN_RUN_M]
    j = np.floor((x0 + mids * dx - west) / res).astype(np.int64)
    i = np.floor((north - (y0 + mids * dy)) / res).astype(np.int64)
    ok = (i >= 0) & (i < h) & (j >= 0) & (j < w)
    return i[ok] * w + j[ok]


def polyline_cells(polyline, grid: GridSpec) -> Optional[np.ndarray]:
    """Sorted flat indices of ``grid`` cells crossed by a ``(N, 2)`` (lat, lon) polyline.

    A cell counts when more than ``MIN_RUN_M`` of the line lies in it. Returns
    None for a zero-length polyline.
    """
    p = np.asarray(polyline, dtype=float)
    x, y = grid.frame.to_local(p[:, 0], p[:, 1])
    if len(p) < 2 or np.all(np.hypot(np.diff(x), np.diff(y)) == 0):
        return None
    west, _, _, north = grid.bounds()
    res, h, w = grid.resolution_m, grid.height, grid.width
    cells = [_piece_cells(x[k], y[k], x[k + 1], y[k + 1], west, north, res, h, w)
             for k in range(len(p) - 1)]
    return np.unique(np.concatenate(cells))


def incidence(polylines, grid: GridSpec, names=None) -> np.ndarray:
    """``(H*W, n)`` 0/1 matrix: cell crossed by polyline. Zero-length lines are skipped."""
    m = np.zeros((grid.height * grid.width, len(polylines)))
    for k, p in enumerate(polylines):
        cells = polyline_cells(p, grid)
        if cells is None:
            label = names[k] if names is not None else k
            logger.warning("skipping zero-length road segment %s", label)
            continue
        m[cells, k] = 1.0
    return m


def grid_roads(segments, grid: GridSpec) -> np.ndarray:
    """Per-cell count of crossing segments in each category, ``(H, W, 2)``.

    ``segments`` is a sequence of ``(polyline, category)`` with polylines as
    ``(N, 2)`` (lat, lon) arrays.
    """
    segments = list(segments)
    cats = [c for _, c in segments]
    for c in cats:
        if c not in ROAD_CATEGORIES:
            raise RejectedRecordError(f"unknown road category {c!r}")
    m = incidence([p for p, _ in segments], grid)
    onehot = np.array([[c == k for k in ROAD_CATEGORIES] for c in cats], dtype=float).reshape(-1, 2)
    return (m @ onehot).reshape(grid.height, grid.width, 2)


def _mean_over_segments(m, feats, present):
    """Per-cell mean of ``feats (n, 3)`` over crossing segments where ``present``."""
    counts = m @ present
    sums = m @ (np.where(present[:, None], feats, 0.0))
    out = np.zeros_like(sums)
    ok = counts > 0
    out[ok] = sums[ok] / counts[ok, None]
    return out


def grid_traffic(segments, grid: GridSpec) -> np.ndarray:
    """Per-cell unweighted mean of (jam, speed, historical speed) over crossing segments.

    ``segments`` is a sequence of ``(polyline, jam, speed, historical_speed)``.
    Cells crossed by no segment are (0, 0, 0).
    """
    segments = list(segments)
    m = incidence([s[0] for s in segments], grid)
    feats = np.array([s[1:4] for s in segments], dtype=float).reshape(-1, 3)
    present = np.ones(len(segments))
    return _mean_over_segments(m, feats, present > 0).reshape(grid.height, grid.width, 3)


def _nearby(bbox, grid: GridSpec, margin_deg=0.01):
    lat, lon = grid.frame.to_geo(np.array(grid.bounds()[::2]), np.array(grid.bounds()[1::2]))
    lat_min, lat_max = min(lat), max(lat)
    lon_min, lon_max = min(lon), max(lon)
    return np.flatnonzero((bbox[:, 1] >= lat_min - margin_deg) & (bbox[:, 0] <= lat_max + margin_deg)
                          & (bbox[:, 3] >= lon_min - margin_deg) & (bbox[:, 2] <= lon_max + margin_deg))


# -- station projections ----------------------------------------------------------------

def project_stations(lat, lon, values, grid: GridSpec, sigma, truncate=TRUNCATE_SIGMAS):
    """Per-channel Gaussian projection of station readings with NaN for missing.

    ``values`` is ``(S, K)``. Each channel is averaged over the stations that
    report it. Returns ``(means (H, W, K), weight sums (H, W, K))``; cells with
    weight sum at most 1e-12 carry mean 0.
    """
    values = np.asarray(values, dtype=float)
    s, k = values.shape
    h, w = grid.height, grid.width
    if s == 0:
        return np.zeros((h, w, k)), np.zeros((h, w, k))
    have = ~np.isnan(values)
    # one accumulation: [value * present | present] so each channel gets its own weights
    stacked = np.concatenate([np.where(have, values, 0.0), have.astype(float)], axis=1)
    px, py = grid.frame.to_local(np.asarray(lat, float), np.asarray(lon, float))
    cutoff = math.inf if truncate is None else truncate * sigma
    acc, _ = kernels.gaussian_accumulate(px, py, stacked, grid.xs(), grid.ys(), sigma, cutoff)
    vsum, wsum = acc[..., :k], acc[..., k:]
    out = np.zeros_like(vsum)
    ok = wsum > EMPTY_WEIGHT
    out[ok] = vsum[ok] / wsum[ok]
    return out, wsum


def _project_sequence(lat, lon, values, grid, sigma):
    """``values (T, S, K)`` -> ``(T, H, W, K)`` means and weight sums, one accumulation."""
    t, s, k = values.shape
    flat = values.transpose(1, 0, 2).reshape(s, t * k)
    mean, wsum = project_stations(lat, lon, flat, grid, sigma)
    h, w = grid.height, grid.width
    return (mean.reshape(h, w, t, k).transpose(2, 0, 1, 3),
            wsum.reshape(h, w, t, k).transpose(2, 0, 1, 3))


def build_targets(lat, lon, values, center: GeoPoint, cfg: PatchConfig = None,
                  exclude: Optional[int] = None) -> Dict[float, np.ndarray]:
    """Masked target stacks at every output resolution.

    Args:
        lat, lon: station positions ``(S,)``.
        values: readings over the forecast horizon, ``(N_out, S, 4)``, NaN missing.
        center: common centre of the target grids.
        cfg: grid sizes and target kernel settings.
        exclude: index of a station whose readings are ignored.

    Returns:
        resolution in meters -> ``(N_out, H_R, W_R, 4)`` with NaN where the
        kernel weight total is below the threshold.
    """
    cfg = cfg or PatchConfig()
    lat, lon = np.asarray(lat, float), np.asarray(lon, float)
    values = np.asarray(values, dtype=float)
    if exclude is not None:
        keep = np.arange(len(lat)) != exclude
        lat, lon, values = lat[keep], lon[keep], values[:, keep]
    out = {}
    for res, size in cfg.target_sizes().items():
        grid = GridSpec(center, res, size, size)
        mean, wsum = _project_sequence(lat, lon, values, grid, cfg.target.sigma_factor * res)
        out[res] = np.where(wsum >= cfg.target.weight_threshold, mean, np.nan)
    return out


# -- patches ------------------------------------------------------------------------------

@dataclass
class Patch:
    hi_hist: np.ndarray          # (N_in, 64, 64, 11)
    hi_const: np.ndarray         # (64, 64, 2)
    lo_hist: np.ndarray          # (N_in, 20, 20, 8)
    lo_fcst: np.ndarray          # (N_out, 20, 20, 10)
    targets: Dict[float, np.ndarray]
    center_station_id: str
    t0: int
    center: GeoPoint
    center_obs: np.ndarray       # (N_out, 4) readings of the centre station, NaN missing
    bench: np.ndarray            # (4,) closest-measurement forecast, NaN when undefined

    def check(self, cfg: PatchConfig):
        n, m = cfg.hi_size, cfg.lo_size
        expect = {"hi_hist": (cfg.n_in, n, n, len(HI_HIST_CHANNELS)),
                  "hi_const": (n, n, len(HI_CONST_CHANNELS)),
                  "lo_hist": (cfg.n_in, m, m, len(LO_HIST_CHANNELS)),
                  "lo_fcst": (cfg.n_out, m, m, len(LO_FCST_CHANNELS))}
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"patch {name} has shape {getattr(self, name).shape}, expected {shape}")
        for res, size in cfg.target_sizes().items():
            if self.targets[res].shape != (cfg.n_out, size, size, len(POLLUTANTS)):
                raise ValueError(f"target at {res} m has shape {self.targets[res].shape}")


def resample_issuance(issuance, grid: GridSpec) -> np.ndarray:
    """Bilinear interpolation of an issuance ``(T, n_lat, n_lon, C)`` onto ``grid`` -> ``(T, H, W, C)``."""
    lat, lon = grid.cell_centers_geo()
    v = np.moveaxis(issuance.values, 0, 2)          # (n_lat, n_lon, T, C)
    out = bilinear_sample(v, issuance.lons, issuance.lats, lon, lat, what="low-resolution cell")
    return np.moveaxis(out, 2, 0)


def forecast_inputs(ds, t0, grid: GridSpec, n_out):
    """Weather and physical-model channels for the issuance made at ``t0``.

    Longer issuances are cut to their first ``n_out`` hours.
    """
    parts = []
    for store, label in ((ds.weather, "weather"), (ds.physical, "physical-model")):
        iss = store.get(t0)
        if iss is None:
            raise IncompletePatchError(f"no {label} issuance at {format_hour(t0)}")
        want = np.arange(t0 + 1, t0 + n_out + 1)
        if len(iss.hours) < n_out or np.any(iss.hours[:n_out] != want):
            raise IncompletePatchError(f"{label} issuance at {format_hour(t0)} does not cover "
                                       f"{format_hour(want[0])}..{format_hour(want[-1])}")
        if len(iss.hours) > n_out:
            iss = dataclasses.replace(iss, hours=iss.hours[:n_out], values=iss.values[:n_out])
        parts.append(resample_issuance(iss, grid))
    return np.concatenate(parts, axis=-1)


def traffic_inputs(ds, t_from, t_to, grid: GridSpec):
    """``(T, H, W, 3)`` mean traffic over crossing segments for hours ``t_from..t_to``."""
    roads = ds.roads
    idx = _nearby(roads.bbox(), grid) if len(roads) else np.zeros(0, dtype=int)
    m = incidence([roads.polylines[k] for k in idx], grid, [roads.segment_ids[k] for k in idx])
    feats = ds.traffic.window(t_from, t_to)[:, idx]                   # (T, n, 3)
    present = ~np.isnan(feats[..., 0])
    out = np.stack([_mean_over_segments(m, np.nan_to_num(feats[t]), present[t].astype(float))
                    for t in range(feats.shape[0])])
    return out.reshape(-1, grid.height, grid.width, 3)


def road_inputs(ds, grid: GridSpec):
    roads = ds.roads
    idx = _nearby(roads.bbox(), grid) if len(roads) else np.zeros(0, dtype=int)
    return grid_roads([(roads.polylines[k], roads.categories[k]) for k in idx], grid)


def _check_history(ds, t0, cfg: PatchConfig, t_last):
    ms = ds.measurements
    t_first = t0 - cfg.n_in + 1
    if not ms.covers(t_first, t_last):
        raise IncompletePatchError(f"measurements cover {format_hour(ms.t_start)}..{format_hour(ms.t_end)}, "
                                   f"patch needs {format_hour(t_first)}..{format_hour(t_last)}")
    if not ds.traffic.covers(t_first, t0):
        raise IncompletePatchError(f"traffic does not cover {format_hour(t_first)}..{format_hour(t0)}")


def _inputs(center: GeoPoint, t0, ds, cfg: PatchConfig, keep) -> Dict[str, np.ndarray]:
    ms = ds.measurements
    t_first = t0 - cfg.n_in + 1
    lat, lon = ms.lat[keep], ms.lon[keep]
    hist = ms.window(t_first, t0)[:, keep]
    hi = GridSpec(center, cfg.hi_resolution_m, cfg.hi_size, cfg.hi_size)
    lo = GridSpec(center, cfg.lo_resolution_m, cfg.lo_size, cfg.lo_size)
    hv, hw = _project_sequence(lat, lon, hist, hi, cfg.hi_sigma_m)
    lv, lw = _project_sequence(lat, lon, hist, lo, cfg.lo_sigma_m)
    return {
        "hi_hist": np.concatenate([hv, hw, traffic_inputs(ds, t_first, t0, hi)], axis=-1),
        "hi_const": road_inputs(ds, hi),
        "lo_hist": np.concatenate([lv, lw], axis=-1),
        "lo_fcst": forecast_inputs(ds, t0, lo, cfg.n_out),
    }


def build_inputs(center: GeoPoint, t0, ds, cfg: PatchConfig = None) -> Dict[str, np.ndarray]:
    """Model inputs centred anywhere, using every station's history up to ``t0``."""
    cfg = cfg or PatchConfig()
    _check_history(ds, t0, cfg, t0)
    return _inputs(center, t0, ds, cfg, np.ones(len(ds.measurements.station_ids), dtype=bool))


def build_patch(station_id, t0, ds, cfg: PatchConfig = None) -> Patch:
    """Assemble one patch centred on ``station_id`` whose forecast is issued at hour ``t0``.

    Every reading of the centre station is left out of inputs and targets.
    """
    cfg = cfg or PatchConfig()
    ms = ds.measurements
    t_last = t0 + cfg.n_out
    _check_history(ds, t0, cfg, t_last)
    c = ms.index(station_id)
    center = GeoPoint(float(ms.lat[c]), float(ms.lon[c]))
    keep = np.arange(len(ms.station_ids)) != c
    lat, lon = ms.lat[keep], ms.lon[keep]
    future = ms.window(t0 + 1, t_last)[:, keep]
    bench = closest_measurement_benchmark(
        center, lat, lon, ms.window(t0, t0)[0, keep], [s for k, s in enumerate(ms.station_ids) if k != c])
    patch = Patch(
        **_inputs(center, t0, ds, cfg, keep),
        targets=build_targets(lat, lon, future, center, cfg),
        center_station_id=station_id,
        t0=int(t0),
        center=center,
        center_obs=ms.window(t0 + 1, t_last)[:, c].copy(),
        bench=bench,
    )
    patch.check(cfg)
    return patch


def candidate_t0s(ds, cfg: PatchConfig, stride_h=6) -> List[int]:
    """Issuance hours (every ``stride_h``) whose full patch window is covered by every source."""
    ms = ds.measurements
    issued = sorted(set(ds.weather.issuances()) & set(ds.physical.issuances()))
    out = []
    for t0 in issued:
        if (t0 - issued[0]) % stride_h:
            continue
        if ms.covers(t0 - cfg.n_in + 1, t0 + cfg.n_out) and ds.traffic.covers(t0 - cfg.n_in + 1, t0):
            out.append(t0)
    return out


# -- cities -------------------------------------------------------------------------------

def cluster_cities(station_ids, lat, lon, link_km=10.0) -> Dict[str, str]:
    """Single-linkage grouping of stations closer than ``link_km``; groups named city_000.."""
    from scipy.cluster.hierarchy import fcluster, linkage

    ids = list(station_ids)
    if len(ids) < 2:
        return {s: "city_000" for s in ids}
    lat0 = float(np.mean(lat))
    xy = np.column_stack([np.asarray(lon) * 111.32 * math.cos(math.radians(lat0)),
                          np.asarray(lat) * 111.32])
    labels = fcluster(linkage(xy, method="single"), t=link_km, criterion="distance")
    # name groups by their smallest station id so naming is order-independent
    first = {}
    for s, g in sorted(zip(ids, labels)):
        first.setdefault(g, s)
    order = {g: k for k, g in enumerate(sorted(first, key=first.get))}
    return {s: f"city_{order[g]:03d}" for s, g in zip(ids, labels)}


# -- normalisation -------------------------------------------------------------------------

INPUT_NAMES = ("hi_hist", "hi_const", "lo_hist", "lo_fcst")


@dataclass
class NormStats:
    mean: Dict[str, np.ndarray]
    std: Dict[str, np.ndarray]

    def arrays(self):
        out = {}
        for k in INPUT_NAMES:
            out[f"norm/{k}/mean"] = self.mean[k]
            out[f"norm/{k}/std"] = self.std[k]
        return out

    @classmethod
    def from_arrays(cls, arrays):
        return cls({k: np.asarray(arrays[f"norm/{k}/mean"]) for k in INPUT_NAMES},
                   {k: np.asarray(arrays[f"norm/{k}/std"]) for k in INPUT_NAMES})


def _pre(name, x):
    idx = LOG_CHANNELS[name]
    if not idx:
        return np.asarray(x, dtype=np.float64)
    y = np.array(x, dtype=np.float64)
    y[..., idx] = np.log1p(y[..., idx])
    return y


def compute_norm_stats(batches) -> NormStats:
    """Per-channel statistics over an iterable of ``{name: (..., C)}`` input dicts."""
    n = {}
    s1 = {}
    s2 = {}
    for arrays in batches:
        for k in INPUT_NAMES:
            y = _pre(k, arrays[k])
            c = y.shape[-1]
            y = y.reshape(-1, c)
            n[k] = n.get(k, 0) + y.shape[0]
            s1[k] = s1.get(k, 0.0) + y.sum(axis=0)
            s2[k] = s2.get(k, 0.0) + (y * y).sum(axis=0)
    if not n:
        raise ValueError("no data to compute normalisation statistics")
    mean, std = {}, {}
    for k in INPUT_NAMES:
        m = s1[k] / n[k]
        var = np.maximum(s2[k] / n[k] - m * m, 0.0)
        sd = np.sqrt(var)
        # tolerance for cancellation in the one-pass variance
        sd[sd <= 1e-6 * np.maximum(1.0, np.abs(m))] = 1.0
        mean[k], std[k] = m.astype(np.float32), sd.astype(np.float32)
    return NormStats(mean, std)


def normalize_features(arrays, stats: NormStats, dtype=np.float32):
    """log1p concentration channels, then standardise every channel. Returns a new dict."""
    out = dict(arrays)
    for k in INPUT_NAMES:
        if k in arrays:
            out[k] = ((_pre(k, arrays[k]) - stats.mean[k]) / stats.std[k]).astype(dtype)
    return out


def denormalize_features(arrays, stats: NormStats):
    out = dict(arrays)
    for k in INPUT_NAMES:
        if k in arrays:
            y = np.asarray(arrays[k], dtype=np.float64) * stats.std[k] + stats.mean[k]
            idx = LOG_CHANNELS[k]
            if idx:
                y[..., idx] = np.expm1(y[..., idx])
            out[k] = y
    return out
