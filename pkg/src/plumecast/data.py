"""Input file formats and in-memory stores for the five data sources.

Times are handled as integer hours since the Unix epoch (UTC) and written as
ISO-8601 hours such as ``2020-11-11T06:00Z``.
"""
from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

POLLUTANTS = ("NO2", "O3", "PM25", "PM10")
WEATHER_CHANNELS = ("temperature_k", "relative_humidity_pct", "wind_u_ms", "wind_v_ms",
                    "pbl_height_m", "precipitation_mm_h")
PHYSICAL_CHANNELS = POLLUTANTS
TRAFFIC_CHANNELS = ("jam_factor", "speed_kmh", "historical_speed_kmh")
ROAD_CATEGORIES = ("Roads", "MajorRoads")

MEASUREMENT_COLUMNS = ["station_id", "lat", "lon", "time_utc", "pollutant", "value_ugm3"]
ROAD_COLUMNS = ["segment_id", "category", "wkt_linestring"]
TRAFFIC_COLUMNS = ["segment_id", "time_utc", "jam_factor", "speed_kmh", "historical_speed_kmh"]
STATION_COLUMNS = ["station_id", "lat", "lon", "city"]

_ISSUANCE_NAME = re.compile(r"^(\d{8}T\d{2})Z\.csv$")


class DataFormatError(ValueError):
    """A file does not follow the expected layout."""


class RejectedRecordError(ValueError):
    """A record carries a value outside its allowed domain."""


# -- time helpers -------------------------------------------------------------------

def parse_hours(values) -> np.ndarray:
    """ISO-8601 timestamps -> int64 hours since the epoch; rejects non-whole hours."""
    ts = pd.to_datetime(pd.Series(values, dtype="object"), utc=True, format="ISO8601")
    ns = ts.to_numpy(dtype="datetime64[ns]").astype(np.int64)
    hour_ns = 3_600_000_000_000
    if np.any(ns % hour_ns):
        raise DataFormatError("timestamps must fall on whole UTC hours")
    return ns // hour_ns


def format_hours(hours) -> List[str]:
    hours = np.atleast_1d(np.asarray(hours, dtype=np.int64))
    ts = pd.to_datetime(hours * 3600, unit="s", utc=True)
    return list(ts.strftime("%Y-%m-%dT%H:%MZ"))


def format_hour(hour) -> str:
    return format_hours([hour])[0]


def issuance_filename(hour) -> str:
    return pd.to_datetime(int(hour) * 3600, unit="s", utc=True).strftime("%Y%m%dT%HZ.csv")


# -- records ------------------------------------------------------------------------

@dataclass(frozen=True)
class StationMeasurement:
    station_id: str
    lat: float
    lon: float
    time: int
    pollutant: str
    value: float


@dataclass(frozen=True)
class Station:
    station_id: str
    lat: float
    lon: float
    city: str


def _require_columns(df, columns, path):
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise DataFormatError(f"{path}: missing columns {missing}")


def read_measurements(path) -> pd.DataFrame:
    """Load ``measurements.csv`` into a frame with an int64 ``time`` column."""
    df = pd.read_csv(path, dtype={"station_id": str, "pollutant": str})
    _require_columns(df, MEASUREMENT_COLUMNS, path)
    df = df[MEASUREMENT_COLUMNS].copy()
    df["time"] = parse_hours(df["time_utc"])
    df = df.drop(columns="time_utc").rename(columns={"value_ugm3": "value"})
    return df


def write_measurements(df: pd.DataFrame, path):
    out = pd.DataFrame({
        "station_id": df["station_id"].astype(str),
        "lat": df["lat"].map(lambda v: f"{v:.6f}"),
        "lon": df["lon"].map(lambda v: f"{v:.6f}"),
        "time_utc": format_hours(df["time"].to_numpy()),
        "pollutant": df["pollutant"],
        "value_ugm3": df["value"].map(lambda v: f"{v:.4f}"),
    })
    out.to_csv(path, index=False, lineterminator="\n")


def read_stations(path) -> List[Station]:
    df = pd.read_csv(path, dtype={"station_id": str, "city": str})
    _require_columns(df, STATION_COLUMNS, path)
    return [Station(r.station_id, float(r.lat), float(r.lon), r.city) for r in df.itertuples()]


def write_stations(stations: Sequence[Station], path):
    pd.DataFrame({
        "station_id": [s.station_id for s in stations],
        "lat": [f"{s.lat:.6f}" for s in stations],
        "lon": [f"{s.lon:.6f}" for s in stations],
        "city": [s.city for s in stations],
    }).to_csv(path, index=False, lineterminator="\n")


# -- measurement store ---------------------------------------------------------------

class MeasurementStore:
    """Dense ``(hours, stations, pollutants)`` array of readings, NaN where missing.

    Stations are ordered by ``station_id``.
    """

    def __init__(self, station_ids, lat, lon, t_start, values):
        self.station_ids = list(station_ids)
        self.lat = np.asarray(lat, dtype=float)
        self.lon = np.asarray(lon, dtype=float)
        self.t_start = int(t_start)
        self.values = np.asarray(values, dtype=float)
        self._index = {s: i for i, s in enumerate(self.station_ids)}

    @property
    def t_end(self):
        """Last hour covered (inclusive)."""
        return self.t_start + self.values.shape[0] - 1

    def index(self, station_id) -> int:
        try:
            return self._index[station_id]
        except KeyError:
            raise KeyError(f"unknown station {station_id!r}") from None

    def covers(self, t_from, t_to) -> bool:
        return t_from >= self.t_start and t_to <= self.t_end

    def window(self, t_from, t_to) -> np.ndarray:
        """Readings for hours ``t_from..t_to`` inclusive, ``(T, S, 4)``."""
        return self.values[t_from - self.t_start:t_to - self.t_start + 1]

    @classmethod
    def from_frame(cls, df: pd.DataFrame, t_start=None, t_end=None):
        """Build from a validated frame (columns station_id, lat, lon, time, pollutant, value)."""
        if len(df) == 0 and (t_start is None or t_end is None):
            raise DataFormatError("no measurements and no explicit time range")
        ids = sorted(df["station_id"].unique())
        first = df.groupby("station_id", sort=True)[["lat", "lon"]].first()
        t0 = int(df["time"].min()) if t_start is None else int(t_start)
        t1 = int(df["time"].max()) if t_end is None else int(t_end)
        values = np.full((t1 - t0 + 1, len(ids), len(POLLUTANTS)), np.nan)
        sidx = pd.Index(ids).get_indexer(df["station_id"])
        pidx = pd.Index(POLLUTANTS).get_indexer(df["pollutant"])
        tidx = df["time"].to_numpy(dtype=np.int64) - t0
        keep = (tidx >= 0) & (tidx < values.shape[0]) & (pidx >= 0)
        values[tidx[keep], sidx[keep], pidx[keep]] = df["value"].to_numpy(dtype=float)[keep]
        return cls(ids, first.loc[ids, "lat"].to_numpy(), first.loc[ids, "lon"].to_numpy(), t0, values)


# -- roads and traffic ---------------------------------------------------------------

@dataclass
class RoadNetwork:
    segment_ids: List[str]
    categories: List[str]
    polylines: List[np.ndarray]   # each (N, 2) as (lat, lon)

    def __len__(self):
        return len(self.segment_ids)

    def bbox(self):
        """Per-segment ``(lat_min, lat_max, lon_min, lon_max)``, ``(n, 4)``."""
        if not self.polylines:
            return np.zeros((0, 4))
        return np.array([[p[:, 0].min(), p[:, 0].max(), p[:, 1].min(), p[:, 1].max()]
                         for p in self.polylines])


def read_roads(path) -> RoadNetwork:
    from shapely import wkt
    from shapely.geometry import LineString

    df = pd.read_csv(path, dtype={"segment_id": str, "category": str})
    _require_columns(df, ROAD_COLUMNS, path)
    bad = sorted(set(df["category"]) - set(ROAD_CATEGORIES))
    if bad:
        seg = df.loc[df["category"].isin(bad), "segment_id"].iloc[0]
        raise RejectedRecordError(f"{path}: unknown road category {bad[0]!r} (segment {seg})")
    polylines = []
    for sid, text in zip(df["segment_id"], df["wkt_linestring"]):
        geom = wkt.loads(text)
        if not isinstance(geom, LineString):
            raise DataFormatError(f"{path}: segment {sid} is not a LINESTRING")
        xy = np.asarray(geom.coords, dtype=float)
        polylines.append(np.column_stack([xy[:, 1], xy[:, 0]]))
    return RoadNetwork(list(df["segment_id"]), list(df["category"]), polylines)


def write_roads(roads: RoadNetwork, path):
    def wkt_line(p):
        return "LINESTRING (" + ", ".join(f"{lon:.6f} {lat:.6f}" for lat, lon in p) + ")"

    pd.DataFrame({
        "segment_id": roads.segment_ids,
        "category": roads.categories,
        "wkt_linestring": [wkt_line(p) for p in roads.polylines],
    }).to_csv(path, index=False, lineterminator="\n")


class TrafficStore:
    """Hourly ``(hours, segments, 3)`` traffic features, NaN where a segment has no record."""

    def __init__(self, segment_ids, t_start, values):
        self.segment_ids = list(segment_ids)
        self.t_start = int(t_start)
        self.values = np.asarray(values, dtype=float)

    @property
    def t_end(self):
        return self.t_start + self.values.shape[0] - 1

    def covers(self, t_from, t_to):
        return t_from >= self.t_start and t_to <= self.t_end

    def window(self, t_from, t_to):
        return self.values[t_from - self.t_start:t_to - self.t_start + 1]


def read_traffic(path, roads: RoadNetwork) -> TrafficStore:
    df = pd.read_csv(path, dtype={"segment_id": str})
    _require_columns(df, TRAFFIC_COLUMNS, path)
    t = parse_hours(df["time_utc"])
    if len(t) == 0:
        return TrafficStore(roads.segment_ids, 0, np.zeros((0, len(roads), 3)))
    t0, t1 = int(t.min()), int(t.max())
    values = np.full((t1 - t0 + 1, len(roads), 3), np.nan)
    sidx = pd.Index(roads.segment_ids).get_indexer(df["segment_id"])
    if np.any(sidx < 0):
        bad = df["segment_id"][sidx < 0].iloc[0]
        raise RejectedRecordError(f"{path}: traffic for unknown segment {bad!r}")
    feats = df[list(TRAFFIC_CHANNELS)].to_numpy(dtype=float)
    values[t - t0, sidx] = feats
    return TrafficStore(roads.segment_ids, t0, values)


def write_traffic(store: TrafficStore, path):
    """Write every non-missing (hour, segment) record, hour-major."""
    t_idx, s_idx = np.nonzero(~np.isnan(store.values[..., 0]))
    feats = store.values[t_idx, s_idx]
    pd.DataFrame({
        "segment_id": np.asarray(store.segment_ids, dtype=object)[s_idx],
        "time_utc": format_hours(store.t_start + t_idx),
        "jam_factor": [f"{v:.3f}" for v in feats[:, 0]],
        "speed_kmh": [f"{v:.3f}" for v in feats[:, 1]],
        "historical_speed_kmh": [f"{v:.3f}" for v in feats[:, 2]],
    }).to_csv(path, index=False, lineterminator="\n")


# -- gridded forecasts ---------------------------------------------------------------

@dataclass
class IssuanceGrid:
    """One forecast issuance on a regular lat/lon grid.

    ``values`` is ``(N_steps, n_lat, n_lon, C)`` with ``lats``/``lons`` ascending
    and ``hours`` the valid times of the steps.
    """

    issued: int
    hours: np.ndarray
    lats: np.ndarray
    lons: np.ndarray
    values: np.ndarray
    channels: Sequence[str]


def write_issuance(grid: IssuanceGrid, path):
    nt, ny, nx, _ = grid.values.shape
    la = np.tile(np.repeat(grid.lats, nx), nt)
    lo = np.tile(np.tile(grid.lons, ny), nt)
    cols = {"lat": [f"{v:.4f}" for v in la], "lon": [f"{v:.4f}" for v in lo]}
    stamps = format_hours(grid.hours)
    cols["time_utc"] = np.repeat(np.asarray(stamps, dtype=object), ny * nx)
    flat = grid.values.reshape(-1, len(grid.channels))
    for k, name in enumerate(grid.channels):
        cols[name] = [f"{v:.4f}" for v in flat[:, k]]
    pd.DataFrame(cols).to_csv(path, index=False, lineterminator="\n")


def read_issuance(path, channels: Sequence[str], issued: int) -> IssuanceGrid:
    df = pd.read_csv(path)
    _require_columns(df, ["lat", "lon", "time_utc", *channels], path)
    hours = parse_hours(df["time_utc"])
    uh = np.unique(hours)
    lats = np.unique(df["lat"].to_numpy(dtype=float))
    lons = np.unique(df["lon"].to_numpy(dtype=float))
    if len(df) != len(uh) * len(lats) * len(lons):
        raise DataFormatError(f"{path}: rows do not form a complete regular grid")
    values = np.full((len(uh), len(lats), len(lons), len(channels)), np.nan)
    ti = np.searchsorted(uh, hours)
    yi = np.searchsorted(lats, df["lat"].to_numpy(dtype=float))
    xi = np.searchsorted(lons, df["lon"].to_numpy(dtype=float))
    values[ti, yi, xi] = df[list(channels)].to_numpy(dtype=float)
    if np.isnan(values).any():
        raise DataFormatError(f"{path}: missing grid values")
    return IssuanceGrid(int(issued), uh, lats, lons, values, tuple(channels))


class IssuanceStore:
    """Directory of issuance files named ``YYYYMMDDTHHZ.csv`` (issuance time)."""

    def __init__(self, directory, channels, cache_size=8):
        self.directory = directory
        self.channels = tuple(channels)
        self.cache_size = cache_size
        self._cache: Dict[int, IssuanceGrid] = {}
        self.files: Dict[int, str] = {}
        if os.path.isdir(directory):
            for name in sorted(os.listdir(directory)):
                m = _ISSUANCE_NAME.match(name)
                if m:
                    stamp = pd.to_datetime(m.group(1), format="%Y%m%dT%H", utc=True)
                    self.files[int(stamp.value // 3_600_000_000_000)] = os.path.join(directory, name)

    def issuances(self) -> List[int]:
        return sorted(self.files)

    def get(self, issued: int) -> Optional[IssuanceGrid]:
        if issued not in self.files:
            return None
        if issued not in self._cache:
            if len(self._cache) >= self.cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[issued] = read_issuance(self.files[issued], self.channels, issued)
        return self._cache[issued]


# -- whole dataset ---------------------------------------------------------------------

class Dataset:
    """All sources of one dataset directory, loaded once."""

    def __init__(self, root, caps=None):
        from .features import validate_frame

        self.root = root
        raw = read_measurements(os.path.join(root, "measurements.csv"))
        clean, self.rejections = validate_frame(raw, caps)
        if sum(self.rejections.values()):
            logger.info("rejected measurements: %s", self.rejections)
        self.measurements = MeasurementStore.from_frame(clean)
        self.roads = read_roads(os.path.join(root, "roads.csv"))
        self.traffic = read_traffic(os.path.join(root, "traffic.csv"), self.roads)
        self.weather = IssuanceStore(os.path.join(root, "weather"), WEATHER_CHANNELS)
        self.physical = IssuanceStore(os.path.join(root, "physical"), PHYSICAL_CHANNELS)
        spath = os.path.join(root, "stations.csv")
        if os.path.exists(spath):
            known = {s.station_id: s for s in read_stations(spath)}
            self.cities = {sid: known[sid].city if sid in known else "unassigned"
                           for sid in self.measurements.station_ids}
        else:
            from .features import cluster_cities
            self.cities = cluster_cities(self.measurements.station_ids, self.measurements.lat,
                                         self.measurements.lon)
