"""Small hand-built datasets shared by several test modules."""
import math
from types import SimpleNamespace

import numpy as np

from plumecast.data import (
    PHYSICAL_CHANNELS,
    WEATHER_CHANNELS,
    IssuanceGrid,
    MeasurementStore,
    RoadNetwork,
    TrafficStore,
)
from plumecast.features import PatchConfig, TargetConfig

LAT0, LON0 = 48.85, 2.35
T_START = 438_000  # an arbitrary whole hour


def small_patch_config(**kw):
    base = dict(n_in=3, n_out=2, hi_size=8, hi_resolution_m=50.0, lo_size=4,
                lo_resolution_m=20000.0, hi_sigma_m=300.0, lo_sigma_m=30000.0,
                target=TargetConfig())
    base.update(kw)
    return PatchConfig(**base)


def offset(dx_m, dy_m, lat0=LAT0, lon0=LON0):
    """(lat, lon) at a local east/north offset from the reference point."""
    lat = lat0 + dy_m / 111_320.0
    lon = lon0 + dx_m / (111_320.0 * math.cos(math.radians(lat0)))
    return lat, lon


class MemoryIssuances:
    def __init__(self, grids):
        self.grids = {g.issued: g for g in grids}

    def issuances(self):
        return sorted(self.grids)

    def get(self, t):
        return self.grids.get(t)


def tiny_dataset(seed=0, n_stations=6, hours=12, issuance_every=3, n_out=2):
    rng = np.random.default_rng(seed)
    ids = [f"S{k:02d}" for k in range(n_stations)]
    pos = [offset(*rng.uniform(-400, 400, 2)) for _ in ids]
    values = rng.uniform(1, 80, (hours, n_stations, 4))
    values[rng.random(values.shape) < 0.15] = np.nan
    ms = MeasurementStore(ids, [p[0] for p in pos], [p[1] for p in pos], T_START, values)

    segs = []
    for k in range(5):
        a = offset(*rng.uniform(-500, 500, 2))
        b = offset(*rng.uniform(-500, 500, 2))
        segs.append(np.array([a, b]))
    roads = RoadNetwork([f"R{k}" for k in range(5)], ["Roads", "MajorRoads", "Roads", "Roads", "MajorRoads"],
                        segs)
    tv = np.stack([rng.uniform(0, 10, (hours, 5)), rng.uniform(5, 60, (hours, 5)),
                   rng.uniform(20, 60, (hours, 5))], axis=-1)
    traffic = TrafficStore(roads.segment_ids, T_START, tv)

    lats = LAT0 + np.arange(-8, 9) * 0.25
    lons = LON0 + np.arange(-10, 11) * 0.25
    plats = LAT0 + np.arange(-5, 6) * 0.4
    plons = LON0 + np.arange(-7, 8) * 0.4
    weather, physical = [], []
    for t in range(T_START, T_START + hours, issuance_every):
        hrs = np.arange(t + 1, t + n_out + 1)
        weather.append(IssuanceGrid(t, hrs, lats, lons,
                                    rng.uniform(0, 30, (n_out, len(lats), len(lons), len(WEATHER_CHANNELS))),
                                    WEATHER_CHANNELS))
        physical.append(IssuanceGrid(t, hrs, plats, plons,
                                     rng.uniform(0, 50, (n_out, len(plats), len(plons), 4)),
                                     PHYSICAL_CHANNELS))
    return SimpleNamespace(measurements=ms, roads=roads, traffic=traffic,
                           weather=MemoryIssuances(weather), physical=MemoryIssuances(physical),
                           cities={s: f"city_{k % 2}" for k, s in enumerate(ids)})


def tiny_archive(directory, seed=0, n_stations=6, hours=12, stations=None):
    """Patch archive over every (station, issuance) pair of :func:`tiny_dataset`."""
    from plumecast.archive import PatchArchive, PatchArchiveWriter
    from plumecast.features import build_patch, candidate_t0s

    ds = tiny_dataset(seed=seed, n_stations=n_stations, hours=hours)
    cfg = small_patch_config()
    w = PatchArchiveWriter(str(directory), cfg)
    for t0 in candidate_t0s(ds, cfg, stride_h=3):
        for s in stations or ds.measurements.station_ids:
            w.append(build_patch(s, t0, ds, cfg), city=ds.cities[s])
    w.close()
    return PatchArchive(str(directory))
