"""Seeded synthetic city with commuters, subway riders and POI-labelled regions.

The generator plans each user's day as dwell and travel segments in a local metric
frame, samples irregular noisy observations of that plan, and records the labels it
knows by construction (commuter flag, subway legs ridden, POI counts per region).

Land use drives everything downstream: homes go where residential POIs are, workplaces
where companies are, and leisure trips toward shops, restaurants and car dealers with a
distance decay from home. Outer suburban cells carry most car selling services.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import geo
from .errors import ConfigError
from .trajectory import GRID_SECONDS, STEPS_PER_DAY, RawTrajectory, Region, interpolate_to_grid

POI_TYPES = (
    "catering", "shopping", "life_service", "sports_recreation", "medical", "accommodation",
    "scenic_spot", "residential", "government", "education", "transport", "finance", "company",
    "car_service",
)
LAND_USES = ("office", "commercial", "residential", "park", "suburban")

# mean POI counts per land use, columns in POI_TYPES order
_POI_RATES = np.array([
    # cat shop life sport med acc scen res gov edu trans fin comp car
    [16, 6, 6, 2, 2, 5, 1, 3, 6, 2, 4, 12, 40, 1],    # office
    [30, 34, 10, 5, 2, 8, 2, 4, 1, 1, 4, 5, 8, 2],     # commercial
    [10, 6, 14, 3, 3, 1, 1, 30, 1, 5, 2, 1, 2, 1],     # residential
    [4, 2, 1, 12, 1, 1, 12, 2, 1, 1, 1, 0, 0, 0],      # park
    [5, 6, 5, 2, 1, 1, 1, 14, 0, 2, 3, 0, 1, 12],      # suburban
], dtype=np.float64)

# land-use probabilities by normalized distance from the city centre
_RING_EDGES = (0.35, 0.75)
_RING_MIX = np.array([
    [0.45, 0.35, 0.15, 0.05, 0.00],
    [0.15, 0.15, 0.55, 0.10, 0.05],
    [0.00, 0.05, 0.30, 0.10, 0.55],
])

MONDAY_2024 = 1704067200  # 2024-01-01 00:00 UTC, a Monday


@dataclass
class SyntheticWorldConfig:
    bbox: tuple[float, float, float, float] = (116.20, 39.80, 116.56, 40.06)
    n_users: int = 200
    n_days: int = 1
    commuter_fraction: float = 0.5
    travel_speed_m: float = 3000.0
    walk_speed_m: float = 1000.0
    subway_speed_m: float = 8000.0
    noise_sigma: float = 50.0
    obs_gap_s: float = 300.0
    rng_seed: int = 0
    start_t: int = MONDAY_2024
    region_grid: tuple[int, int] = (12, 12)
    subway_stations: list[tuple[float, float]] | None = None
    poi_table: dict[str, list[int]] | None = None

    def validate(self) -> None:
        lon0, lat0, lon1, lat1 = self.bbox
        if not (lon1 > lon0 and lat1 > lat0):
            raise ConfigError(f"degenerate bbox {self.bbox}")
        if not -180 <= lon0 < lon1 <= 180 or not -90 <= lat0 < lat1 <= 90:
            raise ConfigError(f"bbox {self.bbox} outside WGS84 bounds")
        if not 0.0 <= self.commuter_fraction <= 1.0:
            raise ConfigError(f"commuter_fraction {self.commuter_fraction} not in [0, 1]")
        if self.n_users < 1 or self.n_days < 1:
            raise ConfigError("n_users and n_days must be positive")
        if min(self.travel_speed_m, self.walk_speed_m, self.subway_speed_m) <= 0:
            raise ConfigError("speeds must be positive")
        if self.noise_sigma < 0 or self.obs_gap_s <= 0:
            raise ConfigError("noise_sigma must be >= 0 and obs_gap_s > 0")
        if self.start_t % 86400:
            raise ConfigError("start_t must fall on a midnight (UTC)")
        if min(self.region_grid) < 1:
            raise ConfigError("region_grid must be at least 1x1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bbox"] = list(self.bbox)
        d["region_grid"] = list(self.region_grid)
        return d


@dataclass(frozen=True)
class UserLabel:
    is_commuter: bool
    subway_trip_count: int


@dataclass
class SyntheticWorld:
    config: SyntheticWorldConfig
    trajectories: list[RawTrajectory]
    labels: dict[str, UserLabel]
    regions: list[Region]
    anchors: dict[str, dict] = field(default_factory=dict)

    def gridded(self):
        steps = self.config.n_days * STEPS_PER_DAY
        return [interpolate_to_grid(r, self.config.start_t, steps) for r in self.trajectories]


class _Frame:
    """Local metric frame around the bbox centre."""

    def __init__(self, bbox):
        self.lon0 = (bbox[0] + bbox[2]) / 2
        self.lat0 = (bbox[1] + bbox[3]) / 2

    def to_xy(self, lon, lat):
        return geo.to_local_xy(lon, lat, self.lon0, self.lat0)

    def to_lonlat(self, x, y):
        dlon, dlat = geo.meters_to_degrees(x, y, self.lat0)
        return self.lon0 + dlon, self.lat0 + dlat


def default_stations(bbox, spacing_m: float = 1500.0) -> list[tuple[float, float]]:
    """Two lines crossing at the centre plus a ring line at ~40% of the half-extent."""
    frame = _Frame(bbox)
    x_hi, y_hi = frame.to_xy(bbox[2], bbox[3])
    hx, hy = float(x_hi) * 0.9, float(y_hi) * 0.9
    pts = [(x, 0.0) for x in np.arange(-hx, hx + 1, spacing_m)]
    pts += [(0.0, y) for y in np.arange(-hy, hy + 1, spacing_m) if abs(y) > spacing_m / 2]
    radius = 0.4 * min(hx, hy)
    n_ring = max(int(2 * np.pi * radius / spacing_m), 4)
    pts += [(radius * np.cos(a), radius * np.sin(a)) for a in np.linspace(0, 2 * np.pi, n_ring, endpoint=False)]
    out = []
    for x, y in pts:
        lon, lat = frame.to_lonlat(x, y)
        out.append((round(float(lon), 6), round(float(lat), 6)))
    return out


def _build_regions(cfg: SyntheticWorldConfig, rng: np.random.Generator):
    nx, ny = cfg.region_grid
    lon_edges = np.linspace(cfg.bbox[0], cfg.bbox[2], nx + 1)
    lat_edges = np.linspace(cfg.bbox[1], cfg.bbox[3], ny + 1)
    regions = []
    for j in range(ny):
        for i in range(nx):
            rid = f"r{j:02d}_{i:02d}"
            ring = [(lon_edges[i], lat_edges[j]), (lon_edges[i + 1], lat_edges[j]),
                    (lon_edges[i + 1], lat_edges[j + 1]), (lon_edges[i], lat_edges[j + 1])]
            cx = ((i + 0.5) / nx - 0.5) * 2
            cy = ((j + 0.5) / ny - 0.5) * 2
            r = float(np.hypot(cx, cy))
            ring_idx = int(np.searchsorted(_RING_EDGES, r, side="right"))
            use = int(rng.choice(len(LAND_USES), p=_RING_MIX[ring_idx]))
            if cfg.poi_table is not None:
                counts = np.asarray(cfg.poi_table[rid], dtype=np.int64)
                if counts.shape != (len(POI_TYPES),):
                    raise ConfigError(f"poi_table[{rid!r}] must have {len(POI_TYPES)} counts")
            else:
                lam = _POI_RATES[use] * rng.lognormal(0.0, 0.5, size=len(POI_TYPES))
                counts = rng.poisson(lam)
            props = {
                "land_use": LAND_USES[use],
                "poi_counts": {name: int(c) for name, c in zip(POI_TYPES, counts)},
                "car_service_count": int(counts[POI_TYPES.index("car_service")]),
                "poi_most_type": POI_TYPES[int(np.argmax(counts))],
            }
            regions.append(Region(rid, ring=np.array(ring), properties=props))
    return regions


class _DayPlanner:
    """Builds piecewise-linear (t, x, y) keypoints for one user."""

    def __init__(self, cfg, stations_xy, rng):
        self.cfg = cfg
        self.stations = stations_xy
        self.rng = rng
        self.kt: list[float] = []
        self.kx: list[float] = []
        self.ky: list[float] = []
        self.subway_legs = 0

    def at(self, t, p):
        if self.kt and t <= self.kt[-1]:
            t = self.kt[-1] + 1.0
        self.kt.append(float(t))
        self.kx.append(float(p[0]))
        self.ky.append(float(p[1]))

    @property
    def now(self):
        return self.kt[-1]

    @property
    def here(self):
        return np.array([self.kx[-1], self.ky[-1]])

    def _nearest_station(self, p):
        d = np.hypot(self.stations[:, 0] - p[0], self.stations[:, 1] - p[1])
        k = int(np.argmin(d))
        return k, float(d[k])

    def travel_time(self, a, b, subway: bool) -> float:
        return sum(seg[0] for seg in self._route(a, b, subway))

    def _route(self, a, b, subway: bool):
        """List of (duration_s, end_point, is_subway_ride) segments."""
        dist = float(np.hypot(*(b - a)))
        cfg = self.cfg
        if subway and dist > 3000.0 and len(self.stations):
            ka, da = self._nearest_station(a)
            kb, db = self._nearest_station(b)
            ride = float(np.hypot(*(self.stations[kb] - self.stations[ka])))
            if ka != kb and da + db < 0.6 * dist:
                return [
                    (900.0 * da / cfg.walk_speed_m + 60.0, self.stations[ka], False),
                    (900.0 * ride / cfg.subway_speed_m + 300.0, self.stations[kb], True),
                    (900.0 * db / cfg.walk_speed_m + 60.0, b, False),
                ]
        return [(900.0 * dist / cfg.travel_speed_m + 60.0, b, False)]

    def go(self, b, subway: bool):
        for duration, end, ride in self._route(self.here, b, subway):
            self.at(self.now + duration, end)
            self.subway_legs += int(ride)

    def stay_until(self, t):
        if t > self.now:
            self.at(t, self.here)


def _sample_point(rng, region_box, frame):
    lon0, lat0, lon1, lat1 = region_box
    lon = rng.uniform(lon0, lon1)
    lat = rng.uniform(lat0, lat1)
    x, y = frame.to_xy(lon, lat)
    return np.array([float(x), float(y)])


def generate_synthetic_world(cfg: SyntheticWorldConfig) -> SyntheticWorld:
    """Deterministic in ``cfg`` (seed included)."""
    cfg.validate()
    seeds = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.n_users + 1)
    world_rng = np.random.default_rng(seeds[0])
    frame = _Frame(cfg.bbox)
    regions = _build_regions(cfg, world_rng)
    stations_ll = cfg.subway_stations if cfg.subway_stations is not None else default_stations(cfg.bbox)
    sx, sy = frame.to_xy([s[0] for s in stations_ll], [s[1] for s in stations_ll])
    stations = np.column_stack([np.atleast_1d(sx), np.atleast_1d(sy)]) if len(stations_ll) else np.empty((0, 2))

    boxes = [r.bounds() for r in regions]
    centers = np.array([frame.to_xy(*r.centroid) for r in regions], dtype=np.float64).reshape(-1, 2)
    poi = np.array([[r.properties["poi_counts"][k] for k in POI_TYPES] for r in regions], dtype=np.float64)
    col = {k: i for i, k in enumerate(POI_TYPES)}
    home_w = poi[:, col["residential"]] + 1.0
    work_w = poi[:, col["company"]] + 0.5 * poi[:, col["finance"]] + 0.5 * poi[:, col["government"]] + 0.5
    leisure_w = (poi[:, col["shopping"]] + poi[:, col["catering"]] + 0.5 * poi[:, col["scenic_spot"]]
                 + 0.5 * poi[:, col["sports_recreation"]] + 2.0 * poi[:, col["car_service"]] + 1.0)

    n_comm = int(round(cfg.commuter_fraction * cfg.n_users))
    commuter_flags = np.zeros(cfg.n_users, dtype=bool)
    commuter_flags[world_rng.permutation(cfg.n_users)[:n_comm]] = True

    trajectories, labels, anchors = [], {}, {}
    end_t = cfg.start_t + cfg.n_days * 86400
    width = len(str(cfg.n_users - 1))
    for u in range(cfg.n_users):
        rng = np.random.default_rng(seeds[u + 1])
        uid = f"u{u:0{width}d}"
        home_reg = int(rng.choice(len(regions), p=home_w / home_w.sum()))
        home = _sample_point(rng, boxes[home_reg], frame)
        is_comm = bool(commuter_flags[u])
        work = None
        if is_comm:
            for _ in range(50):
                work_reg = int(rng.choice(len(regions), p=work_w / work_w.sum()))
                work = _sample_point(rng, boxes[work_reg], frame)
                if np.hypot(*(work - home)) >= 1500.0:
                    break
        near_station = len(stations) and np.min(np.hypot(*(stations - home).T)) < 1200.0
        p_subway = 0.85 if near_station else 0.15

        plan = _DayPlanner(cfg, stations, rng)
        plan.at(cfg.start_t, home)
        for day in range(cfg.n_days):
            midnight = cfg.start_t + day * 86400
            weekday = ((midnight - MONDAY_2024) // 86400) % 7 < 5
            if is_comm and weekday:
                _commute_day(plan, rng, midnight, home, work, p_subway, centers, leisure_w)
            else:
                _leisure_day(plan, rng, midnight, home, p_subway, centers, leisure_w)
        plan.stay_until(end_t)

        obs_t = _observation_times(rng, cfg.start_t, end_t, cfg.obs_gap_s)
        x = np.interp(obs_t, plan.kt, plan.kx) + rng.normal(0.0, cfg.noise_sigma, obs_t.size)
        y = np.interp(obs_t, plan.kt, plan.ky) + rng.normal(0.0, cfg.noise_sigma, obs_t.size)
        lon, lat = frame.to_lonlat(x, y)
        trajectories.append(RawTrajectory(uid, np.column_stack([lon, lat, obs_t])))
        labels[uid] = UserLabel(is_comm, int(plan.subway_legs))
        hl = frame.to_lonlat(*home)
        anchors[uid] = {"home": (float(hl[0]), float(hl[1]))}
        if work is not None:
            wl = frame.to_lonlat(*work)
            anchors[uid]["work"] = (float(wl[0]), float(wl[1]))
    return SyntheticWorld(cfg, trajectories, labels, regions, anchors)


def _observation_times(rng, t0, t1, mean_gap):
    n = int((t1 - t0) / mean_gap * 1.5) + 16
    gaps = rng.exponential(mean_gap, size=n)
    t = t0 + np.cumsum(gaps)
    t = t[t < t1]
    t = np.unique(np.round(t))
    return np.concatenate([[t0], t[(t > t0) & (t < t1)], [t1]]).astype(np.float64)


def _commute_day(plan, rng, midnight, home, work, p_subway, centers, leisure_w):
    subway = rng.random() < p_subway
    arrive = midnight + float(np.clip(rng.normal(8 * 3600 + 1200, 600), 8 * 3600, 8 * 3600 + 2400))
    depart = arrive - plan.travel_time(home, work, subway)
    plan.stay_until(max(depart, midnight + 5 * 3600))
    plan.go(work, subway)
    leave = midnight + float(np.clip(rng.normal(18 * 3600, 1800), 16.5 * 3600, 20 * 3600))
    plan.stay_until(leave)
    plan.go(home, rng.random() < p_subway)
    if rng.random() < 0.25 and plan.now < midnight + 20.5 * 3600:
        plan.stay_until(plan.now + rng.uniform(1200, 3600))
        _excursion(plan, rng, midnight + 23.5 * 3600, home, p_subway, centers, leisure_w)


def _leisure_day(plan, rng, midnight, home, p_subway, centers, leisure_w):
    n_trips = int(rng.choice(4, p=[0.15, 0.35, 0.35, 0.15]))
    plan.stay_until(midnight + rng.uniform(7 * 3600, 11 * 3600))
    for _ in range(n_trips):
        if plan.now > midnight + 21 * 3600:
            break
        _excursion(plan, rng, midnight + 23.5 * 3600, home, p_subway, centers, leisure_w)
        plan.stay_until(plan.now + rng.uniform(1800, 3 * 3600))


def _excursion(plan, rng, deadline, home, p_subway, centers, leisure_w):
    dist = np.hypot(*(centers - home).T)
    w = leisure_w * np.exp(-dist / 5000.0)
    dest_reg = int(rng.choice(len(centers), p=w / w.sum()))
    dest = centers[dest_reg] + rng.normal(0.0, 300.0, size=2)
    subway_out = rng.random() < p_subway
    subway_back = rng.random() < p_subway
    dwell = rng.uniform(1800, 9000)
    total = plan.travel_time(plan.here, dest, subway_out) + dwell + plan.travel_time(dest, home, subway_back)
    if plan.now + total > deadline:
        return
    plan.go(dest, subway_out)
    plan.stay_until(plan.now + dwell)
    plan.go(home, subway_back)
