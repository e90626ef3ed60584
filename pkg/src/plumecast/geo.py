"""Local euclidean frames, regular grids and point/grid projections.

All distances are meters in an equirectangular frame centred on a reference
point: one degree of latitude is 111 320 m and one degree of longitude is
111 320 m scaled by the cosine of the reference latitude. Grids are indexed
``(row, col)`` with row 0 on the northern edge.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels

M_PER_DEG = 111_320.0
TRUNCATE_SIGMAS = 6.0
EMPTY_WEIGHT = 1e-12


class InvalidParameterError(ValueError):
    pass


class RejectedPointError(ValueError):
    def __init__(self, offenders):
        self.offenders = list(offenders)
        super().__init__(f"non-finite values at point indices {self.offenders}")


class OutOfCoverageError(ValueError):
    pass


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise InvalidParameterError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise InvalidParameterError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class LocalFrame:
    origin: GeoPoint

    @property
    def meters_per_deg_lat(self) -> float:
        return M_PER_DEG

    @property
    def meters_per_deg_lon(self) -> float:
        return M_PER_DEG * math.cos(math.radians(self.origin.lat))

    def to_local(self, lat, lon):
        """Map degrees to ``(x east, y north)`` meters; accepts scalars or arrays."""
        x = (np.asarray(lon, dtype=float) - self.origin.lon) * self.meters_per_deg_lon
        y = (np.asarray(lat, dtype=float) - self.origin.lat) * self.meters_per_deg_lat
        return x, y

    def to_geo(self, x, y):
        lat = self.origin.lat + np.asarray(y, dtype=float) / self.meters_per_deg_lat
        lon = self.origin.lon + np.asarray(x, dtype=float) / self.meters_per_deg_lon
        return lat, lon


@dataclass(frozen=True)
class GridSpec:
    """Square-celled regular grid positioned by its centre.

    ``frame`` defaults to a frame centred on the grid centre.
    """

    center: GeoPoint
    resolution_m: float
    width: int
    height: int
    frame: LocalFrame = field(default=None)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError(f"grid must be at least 1x1, got {self.height}x{self.width}")
        if self.resolution_m <= 0:
            raise InvalidParameterError("resolution must be positive")
        if self.frame is None:
            object.__setattr__(self, "frame", LocalFrame(self.center))

    @property
    def shape(self):
        return (self.height, self.width)

    def _center_xy(self):
        cx, cy = self.frame.to_local(self.center.lat, self.center.lon)
        return float(cx), float(cy)

    def xs(self) -> np.ndarray:
        """x coordinate of every column centre (west to east)."""
        cx, _ = self._center_xy()
        return cx + (np.arange(self.width) - (self.width - 1) / 2.0) * self.resolution_m

    def ys(self) -> np.ndarray:
        """y coordinate of every row centre (north to south)."""
        _, cy = self._center_xy()
        return cy + ((self.height - 1) / 2.0 - np.arange(self.height)) * self.resolution_m

    def bounds(self):
        """``(west, south, east, north)`` cell-edge bounds in the grid frame."""
        cx, cy = self._center_xy()
        hw = self.width * self.resolution_m / 2.0
        hh = self.height * self.resolution_m / 2.0
        return cx - hw, cy - hh, cx + hw, cy + hh

    def cell_centers_geo(self):
        xx, yy = np.meshgrid(self.xs(), self.ys())
        return self.frame.to_geo(xx, yy)

    def cell_index(self, x, y):
        """Row/column of the cell containing local points (half-open cells).

        Points outside the grid get index -1 in both components.
        """
        west, _, _, north = self.bounds()
        j = np.floor((np.asarray(x, dtype=float) - west) / self.resolution_m).astype(int)
        i = np.floor((north - np.asarray(y, dtype=float)) / self.resolution_m).astype(int)
        outside = (i < 0) | (i >= self.height) | (j < 0) | (j >= self.width)
        return np.where(outside, -1, i), np.where(outside, -1, j)

    def in_frame(self, frame: LocalFrame) -> "GridSpec":
        return GridSpec(self.center, self.resolution_m, self.width, self.height, frame)


@dataclass
class WeightedGrid:
    values: np.ndarray      # (H, W, K)
    weight_sum: np.ndarray  # (H, W)


def gaussian_weight(d, sigma):
    """``exp(-d^2 / (2 sigma^2))`` for distances ``d`` in meters."""
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be positive, got {sigma}")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise InvalidParameterError("distances must be non-negative")
    w = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return float(w) if w.ndim == 0 else w


def project_arrays(lat, lon, values, grid: GridSpec, sigma, truncate=TRUNCATE_SIGMAS):
    """Gaussian-kernel weighted average of point values on every grid cell.

    Args:
        lat, lon: point positions, shape ``(P,)``.
        values: ``(P,)`` or ``(P, K)`` point values.
        grid: destination grid; distances are taken from cell centres in the
            grid's frame.
        sigma: kernel width in meters.
        truncate: points farther than ``truncate * sigma`` are ignored
            (``None`` disables truncation).

    Returns:
        :class:`WeightedGrid`; cells whose weight total is at most 1e-12 carry 0.
    """
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be positive, got {sigma}")
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    lat = np.asarray(lat, dtype=float).reshape(-1)
    lon = np.asarray(lon, dtype=float).reshape(-1)
    if len(lat) != len(values) or len(lon) != len(values):
        raise InvalidParameterError("positions and values have different lengths")
    bad = np.flatnonzero(~np.isfinite(values).all(axis=1))
    if bad.size:
        raise RejectedPointError(bad.tolist())
    h, w, k = grid.height, grid.width, values.shape[1]
    if len(values) == 0:
        return WeightedGrid(np.zeros((h, w, k)), np.zeros((h, w)))
    px, py = grid.frame.to_local(lat, lon)
    cutoff = math.inf if truncate is None else truncate * sigma
    vsum, wsum = kernels.gaussian_accumulate(px, py, values, grid.xs(), grid.ys(), sigma, cutoff)
    out = np.zeros_like(vsum)
    ok = wsum > EMPTY_WEIGHT
    out[ok] = vsum[ok] / wsum[ok][:, None]
    return WeightedGrid(out, wsum)


def project_points(points: Iterable[tuple[GeoPoint, float]], grid: GridSpec, sigma,
                   truncate=TRUNCATE_SIGMAS) -> WeightedGrid:
    """List-of-points front end to :func:`project_arrays`."""
    points = list(points)
    lat = np.array([p.lat for p, _ in points], dtype=float)
    lon = np.array([p.lon for p, _ in points], dtype=float)
    if not points:
        return project_arrays(lat, lon, np.zeros((0, 1)), grid, sigma, truncate)
    vals = np.array([np.atleast_1d(v) for _, v in points], dtype=float).reshape(len(points), -1)
    return project_arrays(lat, lon, vals, grid, sigma, truncate)


def bilinear_sample(values, xs, ys, qx, qy, what="destination"):
    """Bilinear interpolation of a rectilinear field at query points.

    ``values`` is ``(H, W, ...)`` sampled at column coordinates ``xs`` and row
    coordinates ``ys`` (each strictly monotone). Queries must fall inside the
    hull of the sample positions.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    qx = np.asarray(qx, dtype=float)
    qy = np.asarray(qy, dtype=float)
    fx = _fractional_index(xs, qx)
    fy = _fractional_index(ys, qy)
    tol = 1e-9
    bad = (fx < -tol) | (fx > len(xs) - 1 + tol) | (fy < -tol) | (fy > len(ys) - 1 + tol)
    if np.any(bad):
        k = int(np.flatnonzero(bad.reshape(-1))[0])
        raise OutOfCoverageError(
            f"{what} point at local ({qx.reshape(-1)[k]:.1f}, {qy.reshape(-1)[k]:.1f}) m "
            f"lies outside the source hull")
    fx = np.clip(fx, 0, len(xs) - 1)
    fy = np.clip(fy, 0, len(ys) - 1)
    j0 = np.minimum(np.floor(fx).astype(int), max(len(xs) - 2, 0))
    i0 = np.minimum(np.floor(fy).astype(int), max(len(ys) - 2, 0))
    j1 = np.minimum(j0 + 1, len(xs) - 1)
    i1 = np.minimum(i0 + 1, len(ys) - 1)
    tx = fx - j0
    ty = fy - i0
    v = np.asarray(values, dtype=float)
    extra = (None,) * (v.ndim - 2)
    tx = tx[(...,) + extra]
    ty = ty[(...,) + extra]
    return ((1 - ty) * ((1 - tx) * v[i0, j0] + tx * v[i0, j1])
            + ty * ((1 - tx) * v[i1, j0] + tx * v[i1, j1]))


def _fractional_index(axis, q):
    if len(axis) == 1:
        return np.where(np.isclose(q, axis[0]), 0.0, np.where(q < axis[0], -1.0, 1.0))
    if axis[1] > axis[0]:
        return np.interp(q, axis, np.arange(len(axis)), left=-1.0, right=len(axis))
    return np.interp(-q, -axis, np.arange(len(axis)), left=-1.0, right=len(axis))


_CORNERS = {(0, 0): "north-west", (0, -1): "north-east", (-1, 0): "south-west", (-1, -1): "south-east"}


def bilinear_resample(src_values, src: GridSpec, dst: GridSpec):
    """Resample ``(H, W, ...)`` values defined on ``src`` onto ``dst`` cell centres."""
    lat, lon = dst.cell_centers_geo()
    qx, qy = src.frame.to_local(lat, lon)
    for (ci, cj), name in _CORNERS.items():
        try:
            bilinear_sample(np.zeros((src.height, src.width)), src.xs(), src.ys(),
                            qx[ci, cj], qy[ci, cj])
        except OutOfCoverageError:
            raise OutOfCoverageError(f"destination {name} corner lies outside the source grid") from None
    return bilinear_sample(src_values, src.xs(), src.ys(), qx, qy)


def nearest_upsample(values, factor):
    """Replicate each cell of a ``(..., H, W)`` array into a ``factor x factor`` block."""
    f = int(factor)
    if f < 1:
        raise InvalidParameterError("upsampling factor must be >= 1")
    return np.repeat(np.repeat(np.asarray(values), f, axis=-2), f, axis=-1)


def avg_downsample(values, factor):
    """Mean over ``factor x factor`` blocks of a ``(..., H, W)`` array."""
    f = int(factor)
    if f < 1:
        raise InvalidParameterError("downsampling factor must be >= 1")
    v = np.asarray(values)
    *lead, h, w = v.shape
    if h % f or w % f:
        raise InvalidParameterError(f"grid {h}x{w} is not divisible by {f}")
    b = v.reshape(*lead, h // f, f, w // f, f)
    # shifted by each block's first cell: a constant block averages to itself exactly
    ref = b[..., :1, :, :1]
    return ref[..., 0, :, 0] + (b - ref).mean(axis=(-3, -1))


def covering_window(coarse: GridSpec, support: GridSpec, tol=1e-6):
    """Smallest block of ``coarse`` cells whose union covers ``support``'s extent.

    Returns ``(row0, row1, col0, col1)`` with exclusive upper bounds.
    """
    west, south, east, north = _bounds_in(support, coarse.frame)
    cw, cs, ce, cn = coarse.bounds()
    if west < cw - tol or east > ce + tol or south < cs - tol or north > cn + tol:
        raise OutOfCoverageError("high-resolution support is not contained in the coarse grid")
    res = coarse.resolution_m
    c0 = int(math.floor((west - cw) / res + tol))
    c1 = int(math.ceil((east - cw) / res - tol))
    r0 = int(math.floor((cn - north) / res + tol))
    r1 = int(math.ceil((cn - south) / res - tol))
    return r0, max(r1, r0 + 1), c0, max(c1, c0 + 1)


def _bounds_in(grid: GridSpec, frame: LocalFrame):
    west, south, east, north = grid.bounds()
    lats, lons = grid.frame.to_geo(np.array([west, east]), np.array([south, north]))
    xs, ys = frame.to_local(lats, lons)
    return float(xs[0]), float(ys[0]), float(xs[1]), float(ys[1])


def grid_for(center: GeoPoint, resolution_m: float, size: Sequence[int] | int) -> GridSpec:
    if isinstance(size, int):
        size = (size, size)
    return GridSpec(center, float(resolution_m), int(size[1]), int(size[0]))
