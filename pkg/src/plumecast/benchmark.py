"""Closest-measurement benchmark forecast."""
from __future__ import annotations

import numpy as np

from .geo import GeoPoint, LocalFrame


def closest_measurement_benchmark(center: GeoPoint, lat, lon, values_t0, station_ids) -> np.ndarray:
    """Per-pollutant constant forecast: the t0 reading of the nearest other station.

    Args:
        center: location of the evaluated station (its own readings must not be
            among the candidates).
        lat, lon: candidate station positions ``(S,)``.
        values_t0: candidate readings at t0, ``(S, K)`` with NaN where missing.
        station_ids: candidate ids, used to break distance ties (smaller wins).

    Returns:
        ``(K,)`` forecast, NaN for pollutants no candidate reports.
    """
    values_t0 = np.asarray(values_t0, dtype=float)
    k = values_t0.shape[1] if values_t0.ndim == 2 else 0
    out = np.full(k, np.nan)
    if len(station_ids) == 0:
        return out
    x, y = LocalFrame(center).to_local(np.asarray(lat, float), np.asarray(lon, float))
    d2 = x * x + y * y
    # stable ordering by (distance, station id)
    order = sorted(range(len(station_ids)), key=lambda i: (d2[i], station_ids[i]))
    for p in range(k):
        for i in order:
            v = values_t0[i, p]
            if not np.isnan(v):
                out[p] = v
                break
    return out
