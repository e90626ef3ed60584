"""Synthetic cities with known ground truth.

A regional outer domain is integrated with an explicit upwind
advection-diffusion scheme (open borders by default: clean inflow, free
outflow; closed zero-flux borders are available). Each city has a nested
50 m core whose field is the bilinear outer field plus a local increment
driven by the city's road traffic; the increment is integrated on the core
grid with an open border (zero exterior increment), since the outer domain
already carries what leaves the core.

Everything is seeded; the same :class:`SynthConfig` reproduces
byte-identical files.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from . import kernels
from .data import (
    PHYSICAL_CHANNELS,
    POLLUTANTS,
    WEATHER_CHANNELS,
    IssuanceGrid,
    RoadNetwork,
    Station,
    TrafficStore,
    format_hour,
    format_hours,
    issuance_filename,
    parse_hours,
    write_issuance,
    write_measurements,
    write_roads,
    write_stations,
    write_traffic,
)
from .features import _piece_cells
from .geo import GeoPoint, GridSpec, LocalFrame, avg_downsample, bilinear_sample

logger = logging.getLogger(__name__)

TRUTH_DTYPE = "<f4"
HOURS = 3600.0


class SynthParameterError(ValueError):
    """Parameters the simulator cannot run with (including unstable time steps)."""


@dataclass
class SynthConfig:
    """Everything that determines a synthetic dataset.

    Concentrations are in µg/m³, lengths in metres unless the name says km,
    rates per hour unless the name says otherwise.
    """

    seed: int = 0
    start: str = "2021-01-04T00:00Z"
    days: int = 60
    spin_up_hours: int = 72
    lat0: float = 48.85
    lon0: float = 2.35
    domain_km: float = 400.0
    outer_resolution_m: float = 1000.0
    outer_dt_s: Optional[float] = None
    outer_boundary: str = "open"
    core_size: int = 64
    core_resolution_m: float = 50.0
    core_dt_s: Optional[float] = None
    cfl_safety: float = 0.9
    n_cities: int = 5
    city_spread_km: float = 60.0
    min_city_separation_km: float = 30.0
    n_stations: int = 50
    station_road_bias: float = 0.6
    station_margin_cells: int = 6
    n_road_segments: int = 800
    major_roads_per_city: int = 3
    minor_road_spacing_m: float = 400.0
    segment_length_m: float = 200.0
    noise_std: float = 2.0
    drop_fraction: float = 0.05
    issuance_every_h: int = 6
    n_out: int = 24
    native_extent_km: float = 300.0
    weather_resolution_deg: float = 0.25
    physical_resolution_deg: float = 0.4
    physical_blur_km: float = 20.0
    physical_bias: float = 0.0
    physical_noise_std: float = 2.0
    wind_mean_ms: float = 3.0
    wind_max_ms: float = 8.0
    outer_diffusion_m2s: float = 200.0
    core_diffusion_m2s: float = 20.0
    no2_decay_per_h: float = 0.25
    pm_decay_per_h: float = 0.03
    washout_per_mm: float = 0.05
    pbl_min_m: float = 200.0
    pbl_max_m: float = 1400.0
    traffic_no2: float = 4.0
    traffic_pm: float = 0.6
    suburban_no2: float = 0.005
    urban_radius_km: float = 8.0
    rural_no2: float = 0.0004
    n_area_sources: int = 12
    area_pm: float = 0.001
    o3_background: float = 70.0
    o3_titration: float = 0.8
    pm_background: float = 8.0
    pm10_ratio: float = 1.5
    pm10_coarse: float = 5.0
    truth_snapshot_every_h: int = 24
    truth_outer_downsample: int = 4
    traffic_multiplier: Dict[str, float] = field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise SynthParameterError(f"unknown synth parameter(s): {', '.join(unknown)}")
        return cls(**d)

    def validate(self):
        if self.n_stations < 2:
            raise SynthParameterError("n_stations must be >= 2")
        if self.n_cities < 1 or self.n_stations < self.n_cities:
            raise SynthParameterError("need 1 <= n_cities <= n_stations")
        if self.days < 1 or self.spin_up_hours < 0:
            raise SynthParameterError("days must be >= 1 and spin_up_hours >= 0")
        n = self.domain_km * 1000.0 / self.outer_resolution_m
        if abs(n - round(n)) > 1e-9 or round(n) < 4:
            raise SynthParameterError("domain_km must be a multiple (>= 4x) of outer_resolution_m")
        if round(n) % self.truth_outer_downsample:
            raise SynthParameterError("truth_outer_downsample must divide the outer grid size")
        if self.outer_boundary not in ("open", "closed"):
            raise SynthParameterError("outer_boundary must be 'open' or 'closed'")
        if not 0.0 <= self.drop_fraction <= 1.0:
            raise SynthParameterError("drop_fraction must be in [0, 1]")
        if self.noise_std < 0 or self.physical_noise_std < 0 or self.physical_blur_km < 0:
            raise SynthParameterError("noise and blur parameters must be >= 0")
        if self.wind_max_ms < self.wind_mean_ms or self.wind_mean_ms < 0:
            raise SynthParameterError("need 0 <= wind_mean_ms <= wind_max_ms")
        core_km = self.core_size * self.core_resolution_m / 1000.0
        reach = self.city_spread_km + core_km
        if reach > self.domain_km / 2.0 - 2 * self.outer_resolution_m / 1000.0:
            raise SynthParameterError("cities (city_spread_km + core) must lie inside the domain")
        for name, res in (("outer", self.outer_resolution_m), ("core", self.core_resolution_m)):
            diff = self.outer_diffusion_m2s if name == "outer" else self.core_diffusion_m2s
            dt = getattr(self, f"{name}_dt_s")
            if dt is None:
                continue
            bound = stable_dt(math.sqrt(2.0) * self.wind_max_ms, diff, res, self.max_decay_per_s())
            if dt > bound:
                raise SynthParameterError(
                    f"{name}_dt_s={dt:g} s is unstable: the explicit scheme needs dt <= {bound:.4g} s "
                    f"at wind_max_ms={self.wind_max_ms:g}, diffusion {diff:g} m2/s, dx {res:g} m")
        return self

    def max_decay_per_s(self):
        return max(self.no2_decay_per_h, self.pm_decay_per_h + self.washout_per_mm * 4.0) / HOURS


def stable_dt(speed_sum, diffusion, dx, decay_per_s=0.0) -> float:
    """Largest step keeping the upwind update a nonnegative combination.

    ``speed_sum`` is ``|u| + |v|``; the bound is
    ``1 / (speed_sum / dx + 4 D / dx² + decay)``.
    """
    rate = speed_sum / dx + 4.0 * diffusion / dx ** 2 + decay_per_s
    return math.inf if rate == 0 else 1.0 / rate


def transport_hour(conc, u, v, diffusion, dx, emis, decay_per_h, open_boundary=False,
                   safety=0.9, dt_s=None):
    """Advance ``(S, H, W)`` concentrations by one hour under a uniform wind.

    ``u`` is eastward and ``v`` northward (m/s); ``emis`` is per second and
    ``decay_per_h`` has one entry per species. The step count is chosen from
    the stability bound unless ``dt_s`` is given.
    """
    decay = np.asarray(decay_per_h, dtype=float) / HOURS
    if dt_s is None:
        dt_s = safety * stable_dt(abs(u) + abs(v), diffusion, dx, float(decay.max(initial=0.0)))
    n = max(1, int(math.ceil(HOURS / dt_s - 1e-9)))
    h, w = conc.shape[1:]
    u_face = np.full((h, w + 1), float(u))
    v_face = np.full((h + 1, w), -float(v))   # rows run north to south
    return kernels.advect_diffuse_step(conc, u_face, v_face, diffusion, dx, HOURS / n, emis, decay,
                                       n_steps=n, open_boundary=open_boundary)


# -- analytic meteorology --------------------------------------------------------------

class Meteorology:
    """Seeded smooth weather shared by the simulation and the emitted forecasts."""

    N_SERIES = 8

    def __init__(self, cfg: SynthConfig, rng):
        self.cfg = cfg
        # a few slow sinusoids per series give multi-day "synoptic" variation
        self.periods = rng.uniform(40.0, 170.0, (self.N_SERIES, 3))
        self.phases = rng.uniform(0, 2 * np.pi, (self.N_SERIES, 3))
        self.theta0 = rng.uniform(0, 2 * np.pi)

    def synoptic(self, k, hour):
        h = np.asarray(hour, dtype=float)[..., None]
        return np.sum(np.sin(2 * np.pi * h / self.periods[k] + self.phases[k]), axis=-1) / 3.0

    @staticmethod
    def hour_of_day(hour):
        return np.mod(np.asarray(hour), 24)

    def diurnal(self, hour):
        return np.sin(2 * np.pi * (self.hour_of_day(hour) - 9) / 24.0)

    def wind(self, hour):
        c = self.cfg
        theta = self.theta0 + 1.2 * self.synoptic(0, hour)
        speed = np.clip(c.wind_mean_ms * (1.0 + 0.6 * self.synoptic(1, hour)), 0.3, c.wind_max_ms)
        return speed * np.sin(theta), speed * np.cos(theta)

    def pbl(self, hour):
        c = self.cfg
        day = np.clip(np.sin(np.pi * (self.hour_of_day(hour) - 7) / 12.0), 0.0, None)
        return (c.pbl_min_m + (c.pbl_max_m - c.pbl_min_m) * day) * (1.0 + 0.2 * self.synoptic(2, hour))

    def precipitation(self, hour):
        s = self.synoptic(3, hour)
        return np.where(s > 0.5, 8.0 * (s - 0.5), 0.0)

    def temperature(self, hour, y_m=0.0):
        return (283.0 + 5.0 * self.diurnal(hour) + 4.0 * self.synoptic(4, hour)
                - 0.005 * np.asarray(y_m) / 1000.0)

    def humidity(self, hour):
        return np.clip(75.0 - 15.0 * self.diurnal(hour) - 8.0 * self.synoptic(4, hour)
                       + 20.0 * (self.precipitation(hour) > 0), 15.0, 100.0)

    def o3_background(self, hour):
        return self.cfg.o3_background * (1.0 + 0.35 * self.diurnal(hour) + 0.15 * self.synoptic(5, hour))

    def pm_background(self, hour, x_m=0.0):
        c = self.cfg
        return (c.pm_background * (1.0 + 0.5 * self.synoptic(6, hour))
                * (1.0 + 0.2 * np.asarray(x_m) / (c.domain_km * 500.0)))

    def pm_coarse(self, hour):
        return self.cfg.pm10_coarse * (1.0 + 0.3 * self.synoptic(7, hour))

    def fields(self, hour, lats, lons, frame: LocalFrame):
        """Weather channels on a lat/lon grid: ``(n_lat, n_lon, 6)``."""
        _, y = frame.to_local(lats, np.full_like(lats, frame.origin.lon))
        shape = (len(lats), len(lons))
        u, v = self.wind(hour)
        out = np.empty(shape + (len(WEATHER_CHANNELS),))
        out[..., 0] = self.temperature(hour, y)[:, None]
        out[..., 1] = self.humidity(hour)
        out[..., 2] = u
        out[..., 3] = v
        out[..., 4] = self.pbl(hour)
        out[..., 5] = self.precipitation(hour)
        return out


# -- city geometry ----------------------------------------------------------------------

@dataclass
class City:
    name: str
    west: float          # core bounds in the domain frame (m)
    north: float
    size: int
    resolution_m: float

    @property
    def xs(self):
        return self.west + (np.arange(self.size) + 0.5) * self.resolution_m

    @property
    def ys(self):
        return self.north - (np.arange(self.size) + 0.5) * self.resolution_m

    @property
    def center_xy(self):
        half = self.size * self.resolution_m / 2.0
        return self.west + half, self.north - half

    def cell_of(self, x, y):
        j = np.floor((np.asarray(x) - self.west) / self.resolution_m).astype(int)
        i = np.floor((self.north - np.asarray(y)) / self.resolution_m).astype(int)
        return i, j


def place_cities(cfg: SynthConfig, rng) -> List[City]:
    res = cfg.outer_resolution_m
    half_core = cfg.core_size * cfg.core_resolution_m / 2.0
    centers = []
    for _ in range(10000):
        if len(centers) == cfg.n_cities:
            break
        c = rng.uniform(-cfg.city_spread_km, cfg.city_spread_km, 2) * 1000.0
        if all(math.hypot(*(c - o)) >= cfg.min_city_separation_km * 1000.0 for o in centers):
            centers.append(c)
    else:
        raise SynthParameterError("cannot place the cities; raise city_spread_km or lower "
                                  "min_city_separation_km")
    cities = []
    for k, (cx, cy) in enumerate(centers):
        # core corner snapped to an outer cell corner
        west = math.floor((cx - half_core) / res) * res
        north = math.ceil((cy + half_core) / res) * res
        cities.append(City(f"city_{k:02d}", west, north, cfg.core_size, cfg.core_resolution_m))
    return cities


def _line_segments(p, direction, half, seg_len):
    """Pieces of the infinite line through ``p`` inside the square ``[-half, half]²``."""
    d = np.asarray(direction) / np.hypot(*direction)
    t = np.arange(-4 * half, 4 * half + seg_len, seg_len)
    pts = np.asarray(p)[None, :] + t[:, None] * d[None, :]
    inside = np.all(np.abs(pts) <= half, axis=1)
    return [(pts[k], pts[k + 1]) for k in range(len(pts) - 1) if inside[k] and inside[k + 1]]


def make_roads(city: City, quota, cfg: SynthConfig, rng):
    """Major arterials plus a rotated, jittered minor grid, as ``(x0, y0, x1, y1, category)``."""
    half = city.size * city.resolution_m / 2.0 - 1.0
    cx, cy = city.center_xy
    segs = []
    for _ in range(cfg.major_roads_per_city):
        a = rng.uniform(0, np.pi)
        p = rng.uniform(-half / 3, half / 3, 2)
        for s, e in _line_segments(p, (np.cos(a), np.sin(a)), half, 1.5 * cfg.segment_length_m):
            segs.append((s, e, "MajorRoads"))
    beta = rng.uniform(0, np.pi / 2)
    d1 = np.array([np.cos(beta), np.sin(beta)])
    d2 = np.array([-d1[1], d1[0]])
    lines = []
    spacing = cfg.minor_road_spacing_m
    n = int(2 * half / spacing) + 2
    for d, normal in ((d1, d2), (d2, d1)):
        for k in range(-n, n + 1):
            off = (k + rng.uniform(-0.2, 0.2)) * spacing
            pieces = _line_segments(off * normal, d, half, cfg.segment_length_m)
            if pieces:
                lines.append(pieces)
    order = rng.permutation(len(lines))
    for k in order:
        if len(segs) >= quota:
            break
        segs.extend((s, e, "Roads") for s, e in lines[k][:max(0, quota - len(segs))])
    segs = segs[:quota]
    return [(s[0] + cx, s[1] + cy, e[0] + cx, e[1] + cy, cat) for s, e, cat in segs]


# -- traffic -------------------------------------------------------------------------

ROAD_CAPACITY = {"MajorRoads": 1.0, "Roads": 0.3}
SPEED_LIMIT = {"MajorRoads": 50.0, "Roads": 30.0}


def traffic_profile(hour):
    """Relative demand by hour of day, weekends damped."""
    hod = np.mod(np.asarray(hour, dtype=float), 24)
    p = (0.12 + np.exp(-(hod - 8) ** 2 / 4.5) + 0.9 * np.exp(-(hod - 18) ** 2 / 8.0)
         + 0.45 * np.exp(-(hod - 13) ** 2 / 18.0))
    weekday = (np.floor(np.asarray(hour) / 24).astype(int) + 3) % 7   # epoch day 0 was a Thursday
    return np.where(weekday >= 5, 0.7 * p, p)


class TrafficModel:
    def __init__(self, categories, lengths, seg_ids, multiplier, rng):
        n = len(categories)
        self.cap = np.array([ROAD_CAPACITY[c] for c in categories]) * rng.lognormal(0.0, 0.3, n)
        self.hist_speed = np.array([SPEED_LIMIT[c] for c in categories]) * rng.uniform(0.8, 1.0, n)
        self.lengths = np.asarray(lengths)
        self.mult = np.array([multiplier.get(s, 1.0) for s in seg_ids])

    def hour(self, hour, rng):
        """``(features (n, 3), emission weight (n,))`` for one hour."""
        n = len(self.cap)
        load = traffic_profile(hour) * (1.0 + 0.1 * rng.standard_normal(n))
        load = np.clip(load, 0.02, None)
        jam = 10.0 * np.clip((load - 0.4) / 0.7, 0.0, 1.0)
        speed = self.hist_speed * (1.0 - 0.06 * jam) * (1.0 + 0.03 * rng.standard_normal(n))
        feats = np.stack([jam, np.clip(speed, 1.0, None), self.hist_speed], axis=-1)
        weight = self.mult * self.cap * load * (1.0 + 0.05 * jam) * self.lengths
        return feats, weight


def incidence_matrix(city: City, segments):
    """``(cells, segments)`` matrix spreading each segment evenly over the cells it crosses."""
    m = np.zeros((city.size * city.size, len(segments)))
    for k, (x0, y0, x1, y1, _) in enumerate(segments):
        cells = np.unique(_piece_cells(x0, y0, x1, y1, city.west, city.north, city.resolution_m,
                                       city.size, city.size))
        if len(cells):
            m[cells, k] = 1.0 / len(cells)
    return m


# -- physical-model surrogate ---------------------------------------------------------------

def native_axes(cfg: SynthConfig, resolution_deg):
    """Ascending lat and lon axes of a native grid covering ±native_extent_km."""
    frame = LocalFrame(GeoPoint(cfg.lat0, cfg.lon0))
    ext = cfg.native_extent_km * 1000.0
    nlat = int(math.ceil(ext / (frame.meters_per_deg_lat * resolution_deg)))
    nlon = int(math.ceil(ext / (frame.meters_per_deg_lon * resolution_deg)))
    lats = cfg.lat0 + np.arange(-nlat, nlat + 1) * resolution_deg
    lons = cfg.lon0 + np.arange(-nlon, nlon + 1) * resolution_deg
    return np.round(lats, 6), np.round(lons, 6)


def _axis_operator(centers, edges_lo, edges_hi, res, blur_m):
    """Rows: mean over lattice cells centred in ``[lo, hi)`` of the blurred field.

    ``centers`` are the regularly spaced source cell centres along one axis
    (ascending or descending). The field is extended beyond the source by
    edge clamping, both for the blur (a gaussian of ``blur_m``) and for
    target cells reaching past the source.
    """
    n = len(centers)
    step = float(centers[1] - centers[0]) if n > 1 else res
    if blur_m > 0:
        sig = blur_m / res
        r = int(math.ceil(4 * sig))
        offs = np.arange(-r, r + 1)
        w = np.exp(-0.5 * (offs / sig) ** 2)
        w /= w.sum()
        g = np.zeros((n, n))
        for i in range(n):
            np.add.at(g[i], np.clip(i + offs, 0, n - 1), w)
    else:
        g = np.eye(n)
    rows = np.zeros((len(edges_lo), n))
    for a, (lo, hi) in enumerate(zip(edges_lo, edges_hi)):
        # lattice indices k with lo <= centers[0] + k * step < hi
        k_a, k_b = (lo - centers[0]) / step, (hi - centers[0]) / step
        k_min, k_max = min(k_a, k_b), max(k_a, k_b)
        ks = np.arange(math.ceil(k_min), math.floor(k_max) + 1)
        ks = ks[(centers[0] + ks * step >= lo) & (centers[0] + ks * step < hi)]
        if len(ks) == 0:
            ks = np.array([int(round(0.5 * (k_a + k_b)))])
        np.add.at(rows[a], np.clip(ks, 0, n - 1), 1.0 / len(ks))
    return rows @ g


class PhysicalModelOperator:
    """Blur-then-coarse-average from the outer grid onto a lat/lon grid.

    Lat/lon cells are rectangles in the (equirectangular) domain frame, so
    the operator separates into a row map ``A_y`` and a column map ``A_x``:
    ``coarse = A_y @ field @ A_xᵀ`` per channel.
    """

    def __init__(self, outer: GridSpec, lats, lons, blur_km):
        frame = outer.frame
        res_lat = float(lats[1] - lats[0]) if len(lats) > 1 else 1.0
        res_lon = float(lons[1] - lons[0]) if len(lons) > 1 else 1.0
        _, ylo = frame.to_local(np.asarray(lats) - res_lat / 2, frame.origin.lon)
        _, yhi = frame.to_local(np.asarray(lats) + res_lat / 2, frame.origin.lon)
        xlo, _ = frame.to_local(frame.origin.lat, np.asarray(lons) - res_lon / 2)
        xhi, _ = frame.to_local(frame.origin.lat, np.asarray(lons) + res_lon / 2)
        self.a_y = _axis_operator(outer.ys(), ylo, yhi, outer.resolution_m, blur_km * 1000.0)
        self.a_x = _axis_operator(outer.xs(), xlo, xhi, outer.resolution_m, blur_km * 1000.0)

    def apply(self, field_hwk):
        """``(H, W, K)`` outer field to ``(n_lat, n_lon, K)``."""
        return np.einsum("ah,hwk,bw->abk", self.a_y, field_hwk, self.a_x, optimize=True)


def surrogate_physical_model(hourly_coarse, issued, hours, lats, lons, bias, noise_std, rng):
    """One physical-model issuance from blurred, coarse-averaged truth.

    ``hourly_coarse`` maps each valid hour to its ``(n_lat, n_lon, 4)``
    blurred truth; ``bias`` is added to every pollutant and gaussian noise of
    ``noise_std`` is drawn per value, then clipped at 0.
    """
    vals = np.stack([hourly_coarse[h] for h in hours]) + bias
    if noise_std > 0:
        vals = vals + noise_std * rng.standard_normal(vals.shape)
    return IssuanceGrid(int(issued), np.asarray(hours), np.asarray(lats), np.asarray(lons),
                        np.clip(vals, 0.0, None), PHYSICAL_CHANNELS)


# -- stations --------------------------------------------------------------------------------

def place_stations(cfg: SynthConfig, cities: List[City], roads_by_city, rng):
    """Station positions in the domain frame, ``(x, y, city index)``, biased toward roads."""
    out = []
    m = cfg.station_margin_cells * cfg.core_resolution_m
    for k in range(cfg.n_stations):
        ci = k % len(cities)
        city = cities[ci]
        west, north = city.west + m, city.north - m
        east = city.west + city.size * city.resolution_m - m
        south = city.north - city.size * city.resolution_m + m
        segs = roads_by_city[ci]
        for _ in range(1000):
            if segs and rng.random() < cfg.station_road_bias:
                x0, y0, x1, y1, _ = segs[rng.integers(len(segs))]
                t = rng.random()
                x = x0 + t * (x1 - x0) + rng.normal(0.0, 30.0)
                y = y0 + t * (y1 - y0) + rng.normal(0.0, 30.0)
            else:
                x, y = rng.uniform(west, east), rng.uniform(south, north)
            if west <= x <= east and south <= y <= north:
                break
        else:
            raise SynthParameterError("cannot place a station inside the core margin")
        out.append((x, y, ci))
    return out


def sample_readings(truth, noise_std, drop_fraction, rng):
    """Noisy station readings: truth + N(0, noise_std²), clipped at 0, randomly dropped.

    Returns an array shaped like ``truth`` with NaN for dropped readings.
    """
    truth = np.asarray(truth, dtype=float)
    noisy = truth + noise_std * rng.standard_normal(truth.shape) if noise_std > 0 else truth.copy()
    noisy = np.clip(noisy, 0.0, None)
    keep = rng.random(truth.shape) >= drop_fraction
    return np.where(keep, noisy, np.nan)


# -- simulation -----------------------------------------------------------------------------

@dataclass
class SynthResult:
    config: SynthConfig
    frame: LocalFrame
    outer: GridSpec
    cities: List[City]
    stations: List[Station]
    station_cells: np.ndarray                  # (S, 3) city, row, col
    roads: RoadNetwork
    road_city: List[str]
    traffic: TrafficStore
    hours: np.ndarray                          # recorded hours (T,)
    station_truth: np.ndarray                  # (T, S, 4)
    readings: np.ndarray                       # (T, S, 4), NaN = dropped
    weather: List[IssuanceGrid]
    physical: List[IssuanceGrid]
    snapshot_hours: np.ndarray
    core_snapshots: Dict[str, np.ndarray]      # city -> (n_snap, H, W, 4)
    outer_snapshots: np.ndarray                # (n_snap, H/ds, W/ds, 4)
    outer_snapshots_full: Optional[np.ndarray] = None


def _rng(seed, stream):
    return np.random.default_rng([int(seed), stream])


def compose_fields(outer_c, inc, met: Meteorology, hour, xs, ys, city_xs=None, city_ys=None, cfg=None):
    """Pollutant fields from transported NO2/PM2.5 (+ optional core increment).

    ``outer_c`` is ``(2, H, W)``; with ``city_xs``/``city_ys`` the outer
    field is bilinearly sampled at the core cell centres and the traffic
    tracer ``inc`` ``(1, h, w)`` added, scaled by the NO2 and PM2.5 traffic
    emission factors. Returns ``(h, w, 4)`` in pollutant order.
    """
    if city_xs is not None:
        qx, qy = np.meshgrid(city_xs, city_ys)
        base = bilinear_sample(np.moveaxis(outer_c, 0, -1), xs, ys, qx, qy, what="core")
        no2 = base[..., 0] + cfg.traffic_no2 * inc[0]
        pm_t = base[..., 1] + cfg.traffic_pm * inc[0]
        gx = qx
    else:
        no2, pm_t = outer_c[0], outer_c[1]
        gx = np.broadcast_to(xs[None, :], no2.shape)
    o3 = np.maximum(0.0, met.o3_background(hour) - cfg.o3_titration * no2)
    pm25 = pm_t + met.pm_background(hour, gx)
    pm10 = cfg.pm10_ratio * pm25 + met.pm_coarse(hour)
    return np.stack([no2, o3, pm25, pm10], axis=-1)


def simulate(cfg: SynthConfig, keep_outer=False) -> SynthResult:
    """Run the coupled outer/core simulation and sample all synthetic feeds."""
    cfg.validate()
    frame = LocalFrame(GeoPoint(cfg.lat0, cfg.lon0))
    n_outer = int(round(cfg.domain_km * 1000.0 / cfg.outer_resolution_m))
    outer = GridSpec(frame.origin, cfg.outer_resolution_m, n_outer, n_outer)
    oxs, oys = outer.xs(), outer.ys()
    met = Meteorology(cfg, _rng(cfg.seed, 6))

    cities = place_cities(cfg, _rng(cfg.seed, 8))
    rng_roads = _rng(cfg.seed, 1)
    quota = [cfg.n_road_segments // cfg.n_cities + (k < cfg.n_road_segments % cfg.n_cities)
             for k in range(cfg.n_cities)]
    roads_by_city = [make_roads(c, q, cfg, rng_roads) for c, q in zip(cities, quota)]

    seg_ids, cats, polylines, lengths, road_city = [], [], [], [], []
    for city, segs in zip(cities, roads_by_city):
        for x0, y0, x1, y1, cat in segs:
            seg_ids.append(f"R{len(seg_ids):05d}")
            cats.append(cat)
            lat, lon = frame.to_geo(np.array([x0, x1]), np.array([y0, y1]))
            polylines.append(np.column_stack([lat, lon]))
            lengths.append(math.hypot(x1 - x0, y1 - y0))
            road_city.append(city.name)
    roads = RoadNetwork(seg_ids, cats, polylines)
    traffic_model = TrafficModel(cats, lengths, seg_ids, cfg.traffic_multiplier, _rng(cfg.seed, 9))
    incid = [incidence_matrix(c, s) for c, s in zip(cities, roads_by_city)]
    seg_slices, pos = [], 0
    for segs in roads_by_city:
        seg_slices.append(slice(pos, pos + len(segs)))
        pos += len(segs)

    # outer cell receiving each core cell, for conservative aggregation
    core_area = cfg.core_resolution_m ** 2
    outer_area = cfg.outer_resolution_m ** 2
    agg_index = []
    for city in cities:
        qx, qy = np.meshgrid(city.xs, city.ys)
        i, j = outer.cell_index(qx.ravel(), qy.ravel())
        agg_index.append(i * n_outer + j)

    xx, yy = np.meshgrid(oxs, oys)
    urban = np.zeros((n_outer, n_outer))
    for city in cities:
        cx, cy = city.center_xy
        urban += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * (cfg.urban_radius_km * 1000.0) ** 2))
    rng_area = _rng(cfg.seed, 7)
    area = np.zeros((n_outer, n_outer))
    for k in range(cfg.n_area_sources):
        if k < len(cities):   # one residential source per city, the rest anywhere
            cx, cy = cities[k].center_xy
            sig = rng_area.uniform(3.0, 8.0) * 1000.0
        else:
            cx, cy = rng_area.uniform(-0.8, 0.8, 2) * cfg.domain_km * 500.0
            sig = rng_area.uniform(4.0, 15.0) * 1000.0
        area += rng_area.uniform(0.5, 1.5) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig ** 2))

    stations_xy = place_stations(cfg, cities, roads_by_city, _rng(cfg.seed, 2))
    station_cells = []
    stations = []
    for k, (x, y, ci) in enumerate(stations_xy):
        i, j = cities[ci].cell_of(x, y)
        station_cells.append((ci, int(i), int(j)))
        lat, lon = frame.to_geo(x, y)
        stations.append(Station(f"ST{k:04d}", float(lat), float(lon), cities[ci].name))
    station_cells = np.array(station_cells, dtype=int)

    h_first = int(parse_hours([cfg.start])[0])
    n_rec = cfg.days * 24
    hours = np.arange(h_first, h_first + n_rec)
    snap_set = {int(h) for h in hours[::cfg.truth_snapshot_every_h]}

    wlats, wlons = native_axes(cfg, cfg.weather_resolution_deg)
    plats, plons = native_axes(cfg, cfg.physical_resolution_deg)
    phys_op = PhysicalModelOperator(outer, plats, plons, cfg.physical_blur_km)

    conc = np.zeros((2, n_outer, n_outer))
    # one traffic tracer per core: NO2 and PM2.5 increments are scaled copies,
    # since the core flushes within minutes and their decay rates barely matter there
    incs = [np.zeros((1, cfg.core_size, cfg.core_size)) for _ in cities]
    truth = np.zeros((n_rec, cfg.n_stations, 4))
    traffic_vals = np.zeros((n_rec, len(seg_ids), 3))
    coarse_by_hour: Dict[int, np.ndarray] = {}
    snaps_core = {c.name: [] for c in cities}
    snaps_outer, snaps_full, snap_hours = [], [], []
    rng_traffic = _rng(cfg.seed, 3)

    for h in range(h_first - cfg.spin_up_hours, h_first + n_rec):
        # state at the start of hour h advances to h + 1 with hour-h forcing;
        # the state recorded for h is the one reached at the end of hour h - 1
        if h >= h_first:
            t = h - h_first
            fields = []
            for ci, city in enumerate(cities):
                f = compose_fields(conc, incs[ci], met, h, oxs, oys, city.xs, city.ys, cfg)
                fields.append(f)
                if h in snap_set:
                    snaps_core[city.name].append(f.astype(np.float32))
            for s, (ci, i, j) in enumerate(station_cells):
                truth[t, s] = fields[ci][i, j]
            outer_f = compose_fields(conc, None, met, h, oxs, oys, cfg=cfg)
            coarse_by_hour[h] = phys_op.apply(outer_f)
            if h in snap_set:
                snap_hours.append(h)
                snaps_outer.append(avg_downsample(np.moveaxis(outer_f, -1, 0),
                                                  cfg.truth_outer_downsample).transpose(1, 2, 0)
                                   .astype(np.float32))
                if keep_outer:
                    snaps_full.append(outer_f.copy())

        u, v = met.wind(h)
        pbl_factor = float(met.pbl(h)) / 1000.0
        feats, weight = traffic_model.hour(h, rng_traffic)
        if h >= h_first:
            traffic_vals[h - h_first] = feats
        prof = float(traffic_profile(h))
        temp = float(met.temperature(h))
        heating = (1.0 + 0.5 * (np.exp(-(h % 24 - 8) ** 2 / 8.0) + np.exp(-(h % 24 - 20) ** 2 / 8.0))) \
            * (1.0 + 0.05 * max(0.0, 283.0 - temp))
        emis_outer = np.zeros((2, n_outer, n_outer))
        emis_outer[0] = (cfg.suburban_no2 * prof * urban + cfg.rural_no2 * prof) / pbl_factor
        emis_outer[1] = cfg.area_pm * heating * area / pbl_factor
        core_emis = []
        for ci, city in enumerate(cities):
            e_cells = incid[ci] @ weight[seg_slices[ci]] / core_area / pbl_factor
            core_emis.append(e_cells.reshape(1, city.size, city.size))
            e = np.stack([cfg.traffic_no2 * e_cells, cfg.traffic_pm * e_cells])
            flat = emis_outer.reshape(2, -1)
            for sp in range(2):
                flat[sp] += np.bincount(agg_index[ci], weights=e[sp] * core_area,
                                        minlength=n_outer * n_outer) / outer_area
        decay = [cfg.no2_decay_per_h, cfg.pm_decay_per_h + cfg.washout_per_mm * float(met.precipitation(h))]
        conc = transport_hour(conc, u, v, cfg.outer_diffusion_m2s, cfg.outer_resolution_m, emis_outer,
                              decay, open_boundary=cfg.outer_boundary == "open",
                              safety=cfg.cfl_safety, dt_s=cfg.outer_dt_s)
        for ci in range(len(cities)):
            incs[ci] = transport_hour(incs[ci], u, v, cfg.core_diffusion_m2s, cfg.core_resolution_m,
                                      core_emis[ci], decay[:1], open_boundary=True,
                                      safety=cfg.cfl_safety, dt_s=cfg.core_dt_s)

    readings = sample_readings(truth, cfg.noise_std, cfg.drop_fraction, _rng(cfg.seed, 4))

    weather, physical = [], []
    rng_phys = _rng(cfg.seed, 5)
    for t0 in hours:
        if t0 % cfg.issuance_every_h or t0 + cfg.n_out > hours[-1]:
            continue
        valid = np.arange(t0 + 1, t0 + cfg.n_out + 1)
        wvals = np.stack([met.fields(hh, wlats, wlons, frame) for hh in valid])
        weather.append(IssuanceGrid(int(t0), valid, wlats, wlons, wvals, WEATHER_CHANNELS))
        physical.append(surrogate_physical_model(coarse_by_hour, t0, valid, plats, plons,
                                                 cfg.physical_bias, cfg.physical_noise_std, rng_phys))

    return SynthResult(
        config=cfg, frame=frame, outer=outer, cities=cities, stations=stations,
        station_cells=station_cells, roads=roads, road_city=road_city,
        traffic=TrafficStore(seg_ids, h_first, traffic_vals), hours=hours, station_truth=truth,
        readings=readings, weather=weather, physical=physical,
        snapshot_hours=np.array(snap_hours, dtype=np.int64),
        core_snapshots={k: np.stack(v) if v else np.zeros((0, cfg.core_size, cfg.core_size, 4),
                                                          np.float32)
                        for k, v in snaps_core.items()},
        outer_snapshots=np.stack(snaps_outer) if snaps_outer else np.zeros((0, 1, 1, 4), np.float32),
        outer_snapshots_full=np.stack(snaps_full) if snaps_full else None,
    )


# -- output ---------------------------------------------------------------------------------

def measurement_frame(result: SynthResult) -> pd.DataFrame:
    """Long-format readings (hour-major, then station, then pollutant), dropped ones omitted."""
    t_idx, s_idx, p_idx = np.nonzero(~np.isnan(result.readings))
    st = result.stations
    return pd.DataFrame({
        "station_id": [st[s].station_id for s in s_idx],
        "lat": [st[s].lat for s in s_idx],
        "lon": [st[s].lon for s in s_idx],
        "time": result.hours[t_idx],
        "pollutant": [POLLUTANTS[p] for p in p_idx],
        "value": result.readings[t_idx, s_idx, p_idx],
    })


def _write_blob(path, array):
    np.ascontiguousarray(array, dtype=TRUTH_DTYPE).tofile(path)


def write_dataset(result: SynthResult, out_dir) -> Dict[str, int]:
    """Write every feed plus ``ground_truth/``; returns file sizes in bytes."""
    cfg = result.config
    os.makedirs(os.path.join(out_dir, "weather"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "physical"), exist_ok=True)
    gt = os.path.join(out_dir, "ground_truth")
    os.makedirs(gt, exist_ok=True)

    write_measurements(measurement_frame(result), os.path.join(out_dir, "measurements.csv"))
    write_stations(result.stations, os.path.join(out_dir, "stations.csv"))
    write_roads(result.roads, os.path.join(out_dir, "roads.csv"))
    write_traffic(result.traffic, os.path.join(out_dir, "traffic.csv"))
    for g in result.weather:
        write_issuance(g, os.path.join(out_dir, "weather", issuance_filename(g.issued)))
    for g in result.physical:
        write_issuance(g, os.path.join(out_dir, "physical", issuance_filename(g.issued)))

    arrays = {"station_truth": result.station_truth, "outer": result.outer_snapshots}
    for name, snaps in result.core_snapshots.items():
        arrays[f"core_{name}"] = snaps
    for name, a in arrays.items():
        _write_blob(os.path.join(gt, f"{name}.f32"), a)
    ds = cfg.truth_outer_downsample
    manifest = {
        "dtype": TRUTH_DTYPE,
        "pollutants": list(POLLUTANTS),
        "hours": format_hours(result.hours),
        "snapshot_hours": format_hours(result.snapshot_hours),
        "stations": [s.station_id for s in result.stations],
        "arrays": {k: {"file": f"{k}.f32", "shape": list(np.shape(a))} for k, a in arrays.items()},
        "outer_grid": {"center": [cfg.lat0, cfg.lon0], "resolution_m": cfg.outer_resolution_m * ds,
                       "size": result.outer.width // ds},
        "cities": {c.name: {"center": [float(v) for v in result.frame.to_geo(*c.center_xy)],
                            "resolution_m": c.resolution_m, "size": c.size} for c in result.cities},
        "config": cfg.to_dict(),
    }
    with open(os.path.join(gt, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")

    sizes = {}
    for root, _, files in os.walk(out_dir):
        for name in files:
            p = os.path.join(root, name)
            sizes[os.path.relpath(p, out_dir)] = os.path.getsize(p)
    return sizes


def generate(cfg: SynthConfig, out_dir) -> Dict[str, int]:
    """Simulate and write a dataset directory."""
    result = simulate(cfg)
    sizes = write_dataset(result, out_dir)
    logger.info("synthetic dataset: %d stations, %d hours, %d files, %.1f MB", len(result.stations),
                len(result.hours), len(sizes), sum(sizes.values()) / 1e6)
    return sizes


def read_ground_truth(directory):
    """``(manifest, {name: array})`` from a ``ground_truth/`` directory."""
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    out = {}
    for name, spec in manifest["arrays"].items():
        out[name] = np.fromfile(os.path.join(directory, spec["file"]), dtype=manifest["dtype"]) \
            .reshape(spec["shape"])
    return manifest, out


__all__ = ["SynthConfig", "SynthParameterError", "SynthResult", "simulate", "generate",
           "write_dataset", "sample_readings", "surrogate_physical_model", "PhysicalModelOperator",
           "transport_hour", "stable_dt", "read_ground_truth", "format_hour"]
