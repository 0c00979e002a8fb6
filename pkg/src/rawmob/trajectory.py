"""Trajectories, the 15-minute grid, coordinate normalization and region membership."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import geo
from .errors import ConfigError, ContractError, InsufficientDataError

GRID_SECONDS = 900
STEPS_PER_DAY = 86400 // GRID_SECONDS
DEFAULT_PROXIMITY_M = 200.0


class GpsPoint(NamedTuple):
    lon: float
    lat: float
    t: float


def _check_lonlat(lon, lat) -> None:
    lon, lat = np.asarray(lon), np.asarray(lat)
    if np.any(np.abs(lon) > 180) or np.any(np.abs(lat) > 90):
        raise ContractError("coordinates outside WGS84 lon/lat bounds")


@dataclass
class RawTrajectory:
    """Irregularly sampled observations of one user; ``points`` rows are (lon, lat, t)."""

    user_id: str
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        _check_lonlat(pts[:, 0], pts[:, 1])
        if np.any(np.diff(pts[:, 2]) <= 0):
            raise ContractError(f"timestamps of {self.user_id!r} are not strictly increasing")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_points(cls, user_id: str, points: Iterable[GpsPoint | Sequence[float]]) -> "RawTrajectory":
        return cls(user_id, np.array([tuple(p) for p in points], dtype=np.float64))


@dataclass
class GriddedTrajectory:
    """Coordinates at ``start_t + 900 * j``; ``coords`` rows are (lon, lat)."""

    user_id: str
    start_t: int
    coords: np.ndarray

    def __post_init__(self):
        if self.start_t % GRID_SECONDS:
            raise ContractError(f"grid start {self.start_t} is not a multiple of {GRID_SECONDS} s")
        self.start_t = int(self.start_t)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def times(self) -> np.ndarray:
        return self.start_t + GRID_SECONDS * np.arange(len(self.coords), dtype=np.int64)

    def window(self, t0: float, t1: float) -> "GriddedTrajectory":
        """Points with ``t0 <= t < t1`` (may be empty)."""
        times = self.times
        keep = np.flatnonzero((times >= t0) & (times < t1))
        if keep.size == 0:
            start = max(self.start_t, int(np.ceil(t0 / GRID_SECONDS)) * GRID_SECONDS)
            return GriddedTrajectory(self.user_id, start, np.empty((0, 2)))
        return GriddedTrajectory(self.user_id, int(times[keep[0]]), self.coords[keep[0]:keep[-1] + 1])

    def tail(self, n: int) -> "GriddedTrajectory":
        if n >= len(self):
            return self
        return GriddedTrajectory(self.user_id, self.start_t + GRID_SECONDS * (len(self) - n), self.coords[-n:])


def interpolate_to_grid(raw: RawTrajectory, grid_start: int, n_steps: int | None = None) -> GriddedTrajectory:
    """Linearly interpolate lon and lat onto the 15-minute grid, clamping outside the raw span.

    Without ``n_steps`` the grid runs from ``grid_start`` to the last grid time not after the
    final observation.
    """
    if len(raw) < 2:
        raise InsufficientDataError(f"trajectory {raw.user_id!r} has {len(raw)} point(s); need at least 2")
    if grid_start % GRID_SECONDS:
        raise ContractError(f"grid start {grid_start} is not a multiple of {GRID_SECONDS} s")
    t_last = raw.points[-1, 2]
    if n_steps is None:
        if grid_start > t_last:
            raise ContractError("grid start lies after the last observation")
        n_steps = int((t_last - grid_start) // GRID_SECONDS) + 1
    times = grid_start + GRID_SECONDS * np.arange(n_steps, dtype=np.float64)
    t = raw.points[:, 2]
    lon = np.interp(times, t, raw.points[:, 0])
    lat = np.interp(times, t, raw.points[:, 1])
    return GriddedTrajectory(raw.user_id, int(grid_start), np.column_stack([lon, lat]))


@dataclass(frozen=True)
class NormalizationStats:
    lon_center: float
    lat_center: float
    lon_scale: float
    lat_scale: float

    def __post_init__(self):
        if self.lon_scale <= 0 or self.lat_scale <= 0:
            raise ContractError("normalization scales must be positive")

    def normalize(self, coords) -> np.ndarray:
        c = np.asarray(coords, dtype=np.float64)
        return np.stack([(c[..., 0] - self.lon_center) / self.lon_scale,
                         (c[..., 1] - self.lat_center) / self.lat_scale], axis=-1)

    def denormalize(self, coords) -> np.ndarray:
        c = np.asarray(coords, dtype=np.float64)
        return np.stack([c[..., 0] * self.lon_scale + self.lon_center,
                         c[..., 1] * self.lat_scale + self.lat_center], axis=-1)

    def to_dict(self) -> dict:
        return {"lon_center": self.lon_center, "lat_center": self.lat_center,
                "lon_scale": self.lon_scale, "lat_scale": self.lat_scale}


def normalize(traj: GriddedTrajectory, stats: NormalizationStats) -> np.ndarray:
    return stats.normalize(traj.coords)


def denormalize(coords, stats: NormalizationStats) -> np.ndarray:
    return stats.denormalize(coords)


def fit_stats(dataset: Iterable[GriddedTrajectory | RawTrajectory | np.ndarray]) -> NormalizationStats:
    """Center on the midpoint of the lon/lat ranges; scale by the half-extents (floored at 1e-6)."""
    lo = np.array([np.inf, np.inf])
    hi = -lo
    for item in dataset:
        if isinstance(item, GriddedTrajectory):
            c = item.coords
        elif isinstance(item, RawTrajectory):
            c = item.points[:, :2]
        else:
            c = np.asarray(item, dtype=np.float64).reshape(-1, 2)
        if len(c):
            lo = np.minimum(lo, c.min(axis=0))
            hi = np.maximum(hi, c.max(axis=0))
    if not np.all(np.isfinite(lo)):
        raise InsufficientDataError("cannot fit normalization stats on an empty dataset")
    center = (lo + hi) / 2
    scale = np.maximum((hi - lo) / 2, 1e-6)
    return NormalizationStats(float(center[0]), float(center[1]), float(scale[0]), float(scale[1]))


@dataclass
class Region:
    """A polygon (closed lon/lat ring) or a circle (center + radius in meters)."""

    region_id: str
    ring: np.ndarray | None = None
    center: tuple[float, float] | None = None
    radius_m: float | None = None
    properties: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.ring is None) == (self.center is None):
            raise ConfigError(f"region {self.region_id!r} needs exactly one of ring or center")
        if self.ring is not None:
            ring = np.asarray(self.ring, dtype=np.float64).reshape(-1, 2)
            if not np.array_equal(ring[0], ring[-1]):
                ring = np.vstack([ring, ring[:1]])
            if len(ring) < 4:
                raise ConfigError(f"region {self.region_id!r} ring needs at least 3 distinct vertices")
            if geo.ring_self_intersects(ring):
                raise ConfigError(f"region {self.region_id!r} ring self-intersects")
            self.ring = ring
        elif self.radius_m is None or self.radius_m <= 0:
            raise ConfigError(f"region {self.region_id!r} radius must be positive")

    @property
    def centroid(self) -> tuple[float, float]:
        if self.center is not None:
            return tuple(self.center)
        r = self.ring[:-1]
        return float(r[:, 0].mean()), float(r[:, 1].mean())

    def bounds(self) -> tuple[float, float, float, float]:
        if self.ring is not None:
            return (*self.ring.min(axis=0), *self.ring.max(axis=0))
        dlon, dlat = geo.meters_to_degrees(self.radius_m, self.radius_m, self.center[1])
        return self.center[0] - dlon, self.center[1] - dlat, self.center[0] + dlon, self.center[1] + dlat

    def expanded_bounds(self, proximity_m: float) -> tuple[float, float, float, float]:
        """Bounding box grown by ``proximity_m`` (slightly generous), for cheap prefiltering."""
        lon0, lat0, lon1, lat1 = self.bounds()
        pad = max(proximity_m, 0.0) * 1.01 + 1.0
        worst_lat = min(max(abs(lat0), abs(lat1)) + pad / geo.M_PER_DEG_LAT, 89.0)
        dlon, dlat = geo.meters_to_degrees(pad, pad, worst_lat)
        return lon0 - dlon, lat0 - dlat, lon1 + dlon, lat1 + dlat

    def contains(self, lon, lat) -> np.ndarray:
        if self.ring is not None:
            return geo.points_in_polygon(lon, lat, self.ring)
        return np.atleast_1d(geo.haversine_m(lon, lat, self.center[0], self.center[1]) <= self.radius_m)

    def near(self, lon, lat, proximity_m: float) -> np.ndarray:
        """Inside the geometry or within ``proximity_m`` of its boundary."""
        if self.ring is not None:
            inside = geo.points_in_polygon(lon, lat, self.ring)
            if proximity_m <= 0:
                return inside
            return inside | (geo.distance_to_ring_m(lon, lat, self.ring) <= proximity_m)
        d = geo.haversine_m(lon, lat, self.center[0], self.center[1])
        return np.atleast_1d(d <= self.radius_m + max(proximity_m, 0.0))


class WindowIndex:
    """Window slices of many trajectories packed into one NaN-padded array for fast membership queries."""

    def __init__(self, trajs: Sequence[GriddedTrajectory], window: tuple[float, float]):
        t0, t1 = window
        if t1 <= t0:
            raise ContractError(f"empty membership window [{t0}, {t1})")
        parts = [t.window(t0, t1) for t in trajs]
        self.ids = [t.user_id for t in trajs]
        width = max((len(p) for p in parts), default=0)
        self.coords = np.full((len(parts), width, 2), np.nan)
        for i, part in enumerate(parts):
            self.coords[i, :len(part)] = part.coords

    def members(self, region: Region, proximity_m: float = DEFAULT_PROXIMITY_M) -> list[str]:
        """Sorted ids with a grid point inside or within ``proximity_m`` of ``region``."""
        if not self.ids:
            return []
        lon0, lat0, lon1, lat1 = region.expanded_bounds(proximity_m)
        lon, lat = self.coords[..., 0], self.coords[..., 1]
        with np.errstate(invalid="ignore"):
            cand = (lon >= lon0) & (lon <= lon1) & (lat >= lat0) & (lat <= lat1)
        out = []
        for i in np.flatnonzero(cand.any(axis=1)):
            c = self.coords[i][cand[i]]
            if region.near(c[:, 0], c[:, 1], proximity_m).any():
                out.append(self.ids[i])
        return sorted(out)


def members(trajs: Sequence[GriddedTrajectory], region: Region, window: tuple[float, float],
            proximity_m: float = DEFAULT_PROXIMITY_M) -> list[str]:
    """Sorted ids of trajectories for which :func:`region_membership` holds."""
    return WindowIndex(trajs, window).members(region, proximity_m)


def region_membership(traj: GriddedTrajectory, region: Region, window: tuple[float, float],
                      proximity_m: float = DEFAULT_PROXIMITY_M) -> bool:
    """True iff some grid point in ``[t0, t1)`` is inside or within ``proximity_m`` of the region."""
    t0, t1 = window
    if t1 <= t0:
        raise ContractError(f"empty membership window [{t0}, {t1})")
    part = traj.window(t0, t1)
    if len(part) == 0:
        return False
    return bool(region.near(part.coords[:, 0], part.coords[:, 1], proximity_m).any())
