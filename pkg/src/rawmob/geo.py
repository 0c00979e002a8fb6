"""Great-circle distance, point-in-polygon and small-area planar helpers."""
from __future__ import annotations

import numpy as np

EARTH_RADIUS_M = 6371008.8
M_PER_DEG_LAT = np.pi * EARTH_RADIUS_M / 180.0


def haversine_m(lon1, lat1, lon2, lat2):
    """Great-circle distance in meters; broadcasts over array arguments."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(v, dtype=np.float64)) for v in (lon1, lat1, lon2, lat2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    d = 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return float(d) if d.ndim == 0 else d


def meters_to_degrees(dx_m, dy_m, lat):
    """Convert east/north offsets in meters to (dlon, dlat) degrees at latitude ``lat``."""
    dlat = np.asarray(dy_m) / M_PER_DEG_LAT
    dlon = np.asarray(dx_m) / (M_PER_DEG_LAT * np.cos(np.radians(lat)))
    return dlon, dlat


def to_local_xy(lon, lat, lon0: float, lat0: float):
    """Equirectangular projection to meters around (lon0, lat0); accurate for areas of a few km."""
    x = (np.asarray(lon, dtype=np.float64) - lon0) * M_PER_DEG_LAT * np.cos(np.radians(lat0))
    y = (np.asarray(lat, dtype=np.float64) - lat0) * M_PER_DEG_LAT
    return x, y


def points_in_polygon(lon, lat, ring) -> np.ndarray:
    """Even-odd rule containment for many points against one closed ring of (lon, lat)."""
    ring = np.asarray(ring, dtype=np.float64)
    px = np.atleast_1d(np.asarray(lon, dtype=np.float64))
    py = np.atleast_1d(np.asarray(lat, dtype=np.float64))
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = ring[:-1, 0], ring[:-1, 1]
    x1, y1 = ring[1:, 0], ring[1:, 1]
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        crosses = (ay > py) != (by > py)
        if not crosses.any():
            continue
        xint = ax + (py - ay) * (bx - ax) / np.where(by != ay, by - ay, 1.0)
        inside ^= crosses & (px < xint)
    return inside


def distance_to_ring_m(lon, lat, ring) -> np.ndarray:
    """Distance in meters from each point to the nearest edge of a ring (planar, local projection)."""
    ring = np.asarray(ring, dtype=np.float64)
    lon0, lat0 = ring[:-1, 0].mean(), ring[:-1, 1].mean()
    px, py = to_local_xy(np.atleast_1d(lon), np.atleast_1d(lat), lon0, lat0)
    rx, ry = to_local_xy(ring[:, 0], ring[:, 1], lon0, lat0)
    best = np.full(px.shape, np.inf)
    for ax, ay, bx, by in zip(rx[:-1], ry[:-1], rx[1:], ry[1:]):
        dx, dy = bx - ax, by - ay
        length2 = dx * dx + dy * dy
        t = np.zeros_like(px) if length2 == 0 else np.clip(((px - ax) * dx + (py - ay) * dy) / length2, 0.0, 1.0)
        best = np.minimum(best, np.hypot(px - (ax + t * dx), py - (ay + t * dy)))
    return best


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    return (orient(p1, p2, q1) * orient(p1, p2, q2) < 0) and (orient(q1, q2, p1) * orient(q1, q2, p2) < 0)


def ring_self_intersects(ring) -> bool:
    ring = np.asarray(ring, dtype=np.float64)
    n = len(ring) - 1
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(ring[i], ring[i + 1], ring[j], ring[j + 1]):
                return True
    return False
