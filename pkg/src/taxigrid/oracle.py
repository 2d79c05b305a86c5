"""Synthetic city with known ground truth.

A block of crossing corridors (arterial and local tiers) sits on a grid of
slow background cells.  Trips run along corridors, turning at
intersections, plus a trickle of background trips anywhere.  The day is
played out by the same stepper the forecaster uses, but with the true
diagrams and a true capacity coefficient, and the resulting routes can be
turned into noisy taxi GPS reports.
"""
from __future__ import annotations

import datetime as _dt
import heapq
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fd import FdField
from .grid import GridConfig, Projection, step_directions
from .ingest import OCCUPIED, GpsRecord
from .routes import RouteSet
from .simulator import ChiProfile, SimConfig, Simulator


@dataclass
class Tier:
    vf_lo: float
    vf_hi: float
    q_cap: float            # vehicles per hour per direction at capacity
    vs_ratio: float = 0.25
    nm_ratio: float = 3.0
    jitter: float = 0.08


ARTERIAL = Tier(14.0, 18.0, 800.0)
LOCAL = Tier(10.5, 13.5, 640.0)
BACKGROUND = Tier(5.0, 8.0, 100.0)


@dataclass
class Corridor:
    axis: str               # "h": along a row (Right/Left); "v": along a column (Up/Down)
    index: int
    lo: int
    hi: int                 # inclusive
    tier: str = "local"

    def cells(self) -> np.ndarray:
        pos = np.arange(self.lo, self.hi + 1)
        fixed = np.full_like(pos, self.index)
        return np.stack([pos, fixed] if self.axis == "h" else [fixed, pos], axis=1)

    @property
    def dirs(self) -> tuple[int, int]:
        return (0, 2) if self.axis == "h" else (1, 3)

    def keys(self, cfg: GridConfig) -> np.ndarray:
        c = self.cells()
        return np.concatenate([(c[:, 0] * cfg.ny + c[:, 1]) * 4 + d for d in self.dirs])


@dataclass
class Surge:
    t_center: float          # seconds of day
    width_min: float
    rate_per_min: float
    corridor: int            # index into the corridor list


@dataclass
class DemandProfile:
    """Trip departures per minute; a daytime envelope with two peaks plus optional surges."""

    corridor_per_min: float = 170.0
    background_per_min: float = 3.0
    night_frac: float = 0.12
    rise_s: float = 5.5 * 3600
    fall_s: float = 21.5 * 3600
    ramp_min: float = 30.0
    am_peak_s: float = 8.0 * 3600
    pm_peak_s: float = 17.75 * 3600
    peak_amp: float = 0.9
    peak_width_min: float = 50.0
    last_departure_s: float = 23.0 * 3600
    surges: list = field(default_factory=list)

    def envelope(self, t):
        t = np.asarray(t, dtype=float)
        r = self.ramp_min * 60.0
        day = 1.0 / (1.0 + np.exp(-(t - self.rise_s) / r)) / (1.0 + np.exp(-(self.fall_s - t) / r))
        w = self.peak_width_min * 60.0
        peaks = self.peak_amp * (np.exp(-(t - self.am_peak_s) ** 2 / (2 * w * w))
                                 + np.exp(-(t - self.pm_peak_s) ** 2 / (2 * w * w)))
        return (self.night_frac + (1 - self.night_frac) * day) * (1.0 + peaks)

    def surge_rate(self, t, corridor: int):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for s in self.surges:
            if s.corridor == corridor:
                w = s.width_min * 60.0
                out = out + s.rate_per_min * np.exp(-(t - s.t_center) ** 2 / (2 * w * w))
        return out


@dataclass
class OracleCity:
    grid: GridConfig
    truth: FdField
    corridors: list
    demand: DemandProfile
    chi: ChiProfile
    seed: int = 0

    def corridor_keys(self) -> np.ndarray:
        return np.unique(np.concatenate([c.keys(self.grid) for c in self.corridors])) if self.corridors \
            else np.zeros(0, dtype=np.int64)


def _tier_params(rng, tier: Tier, n: int):
    vf = rng.uniform(tier.vf_lo, tier.vf_hi, n)
    j = 1.0 + rng.uniform(-tier.jitter, tier.jitter, n)
    nc = tier.q_cap / vf * j
    return vf, tier.vs_ratio * vf, nc, tier.nm_ratio * nc


def corridor_layout(grid: GridConfig, n: int, block: int | None = None) -> list[Corridor]:
    """``n`` corridors split between rows and columns of a central block; the central row and column come first."""
    if n <= 0:
        return []
    block = block or max(8, min(grid.nx, grid.ny) // 2)
    cx, cy = grid.nx // 2, grid.ny // 2
    lo_x, hi_x = max(0, cx - block // 2), min(grid.nx - 1, cx + block // 2 - 1)
    lo_y, hi_y = max(0, cy - block // 2), min(grid.ny - 1, cy + block // 2 - 1)
    nh = (n + 1) // 2
    nv = n - nh

    def spread(center, lo, hi, k):
        if k == 0:
            return []
        spacing = max(1, (hi - lo + 1) // k)
        picks = [center]
        off = 1
        while len(picks) < k:
            for s in (-1, 1):
                p = center + s * off * spacing
                if lo <= p <= hi and p not in picks and len(picks) < k:
                    picks.append(p)
            off += 1
            if off > 4 * k:
                break
        return picks

    out = []
    rows = spread(cy, lo_y, hi_y, nh)
    cols = spread(cx, lo_x, hi_x, nv)
    for i, r in enumerate(rows):
        out.append(Corridor("h", r, lo_x, hi_x, "arterial" if i % 3 == 0 else "local"))
    for i, c in enumerate(cols):
        out.append(Corridor("v", c, lo_y, hi_y, "arterial" if i % 3 == 0 else "local"))
    return out


def generate_city(seed: int = 0, nx: int = 64, ny: int = 64, corridors: int = 20,
                  demand: DemandProfile | None = None, chi: ChiProfile | None = None,
                  block: int | None = None, tiers: dict | None = None) -> OracleCity:
    """Deterministic city from ``seed``: corridor tiers on a slow background."""
    if nx < 8 or ny < 8:
        raise ValueError("oracle city needs at least 8x8 cells")
    tiers = tiers or {"arterial": ARTERIAL, "local": LOCAL, "background": BACKGROUND}
    grid = GridConfig.centered(nx, ny)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    vf, vs, nc, nm = _tier_params(rng, tiers["background"], grid.n_keys)
    layout = corridor_layout(grid, corridors, block)
    for cor in layout:
        k = cor.keys(grid)
        vf[k], vs[k], nc[k], nm[k] = _tier_params(rng, tiers[cor.tier], len(k))
    truth = FdField(grid, vf, vs, nc, nm, np.ones(grid.n_keys, dtype=bool))
    return OracleCity(grid, truth, layout, demand or DemandProfile(),
                      chi or ChiProfile(a_am=0.4, a_pm=0.4), seed)


# --- demand ----------------------------------------------------------------

def _leg(a, b) -> np.ndarray:
    """Straight cells from ``a`` (exclusive) to ``b`` (inclusive); a and b share a row or column."""
    (c0, r0), (c1, r1) = a, b
    if c0 != c1:
        s = 1 if c1 > c0 else -1
        cs = np.arange(c0 + s, c1 + s, s)
        return np.stack([cs, np.full_like(cs, r0)], axis=1)
    s = 1 if r1 > r0 else -1
    rs = np.arange(r0 + s, r1 + s, s)
    return np.stack([np.full_like(rs, c0), rs], axis=1)


def waypoint_path(points) -> np.ndarray:
    cells = [np.asarray([points[0]], dtype=np.int64)]
    for a, b in zip(points[:-1], points[1:]):
        if tuple(a) != tuple(b):
            cells.append(_leg(a, b))
    return np.concatenate(cells).astype(np.int64)


def _crossings(corridors):
    out = []
    for cor in corridors:
        cross = sorted((c.index, j) for j, c in enumerate(corridors)
                       if c.axis != cor.axis and c.lo <= cor.index <= c.hi and cor.lo <= c.index <= cor.hi)
        out.append(cross)
    return out


def _corridor_trip(rng, corridors, crossings, first: int) -> list:
    """Enter at one end of a corridor, turn at up to two intersections, leave at a corridor end."""
    ci = first
    cor = corridors[ci]
    s = 1 if rng.random() < 0.5 else -1
    pos = cor.lo if s > 0 else cor.hi

    def point(c, p):
        return (p, c.index) if c.axis == "h" else (c.index, p)

    pts = [point(cor, pos)]
    legs = int(rng.choice([1, 2, 3], p=[0.25, 0.45, 0.3]))
    for _ in range(legs - 1):
        ahead = [(idx, j) for idx, j in crossings[ci] if (idx - pos) * s > 0]
        if not ahead:
            break
        idx, j = ahead[int(rng.integers(len(ahead)))]
        nxt = corridors[j]
        dirs = [d for d in (1, -1) if (nxt.hi if d > 0 else nxt.lo) != cor.index]
        if not dirs:
            break
        pts.append(point(cor, idx))
        s = dirs[int(rng.integers(len(dirs)))]
        pos, ci, cor = cor.index, j, nxt
    pts.append(point(cor, cor.hi if s > 0 else cor.lo))
    return pts


def _background_trip(rng, grid: GridConfig) -> list:
    while True:
        c0, c1 = (int(v) for v in rng.integers(0, grid.nx, 2))
        r0, r1 = (int(v) for v in rng.integers(0, grid.ny, 2))
        if abs(c1 - c0) + abs(r1 - r0) >= 3:
            return [(c0, r0), (c1, r0), (c1, r1)]


def _poisson_times(rng, rate_fn, t0: float, t1: float, dt: float = 60.0) -> np.ndarray:
    starts = np.arange(t0, t1, dt)
    lam = np.maximum(rate_fn(starts + dt / 2), 0.0) * dt / 60.0
    n = rng.poisson(lam)
    t = np.repeat(starts, n) + rng.uniform(0, dt, int(n.sum()))
    return np.sort(t)


def sample_trips(city: OracleCity, seed: int = 0, t_begin: float = 0.0, t_end: float | None = None) -> RouteSet:
    """Planned trips (cell paths with departure times; later entries are placeholders)."""
    d = city.demand
    t_end = d.last_departure_s if t_end is None else min(t_end, d.last_departure_s)
    rng = np.random.default_rng(np.random.SeedSequence([city.seed, seed, 2]))
    paths, departs = [], []
    ncor = len(city.corridors)
    crossings = _crossings(city.corridors)
    if ncor and d.corridor_per_min > 0:
        for t in _poisson_times(rng, lambda x: d.corridor_per_min * d.envelope(x), t_begin, t_end):
            paths.append(_corridor_trip(rng, city.corridors, crossings, int(rng.integers(ncor))))
            departs.append(t)
    for s in d.surges:
        for t in _poisson_times(rng, lambda x, c=s.corridor: d.surge_rate(x, c), t_begin, t_end):
            paths.append(_corridor_trip(rng, city.corridors, crossings, s.corridor))
            departs.append(t)
    if d.background_per_min > 0:
        for t in _poisson_times(rng, lambda x: d.background_per_min * d.envelope(x), t_begin, t_end):
            paths.append(_background_trip(rng, city.grid))
            departs.append(t)
    order = np.argsort(np.asarray(departs), kind="stable")
    cells = [waypoint_path(paths[i]) for i in order]
    departs = np.asarray(departs)[order]
    if not cells:
        return RouteSet.empty()
    lens = np.array([len(c) for c in cells], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
    entries = np.repeat(departs, lens)
    ids = [f"trip{i:07d}" for i in range(len(cells))]
    return RouteSet(ids, offsets, np.concatenate(cells), entries)


def assign_taxis(routes: RouteSet, min_gap_s: float = 600.0, prefix: str = "T") -> RouteSet:
    """Give trips to a fleet so no taxi starts a trip within ``min_gap_s`` of finishing one."""
    depart, arrive = routes.depart, routes.arrive
    order = np.lexsort((np.arange(len(routes)), depart))
    free: list[tuple[float, int]] = []
    n_taxis = 0
    ids = [None] * len(routes)
    for i in order:
        if free and free[0][0] + min_gap_s <= depart[i]:
            _, tx = heapq.heappop(free)
        else:
            tx = n_taxis
            n_taxis += 1
        ids[i] = f"{prefix}{tx:06d}"
        heapq.heappush(free, (float(arrive[i]), tx))
    return RouteSet(ids, routes.offsets, routes.cells, routes.entries, routes.days)


@dataclass
class OracleRun:
    routes: RouteSet
    field_snapshots: dict
    estimated_snapshots: dict
    injected: int
    arrived: int
    log: list


def run_oracle(city: OracleCity, seed: int = 0, t_begin: float = 0.0, t_end: float = 86400.0,
               trips: RouteSet | None = None, fd: FdField | None = None, day: str | None = "2024-03-04",
               sim_cfg: SimConfig | None = None) -> OracleRun:
    """Play out a day with the true diagrams and true capacity coefficient."""
    trips = sample_trips(city, seed, t_begin, t_end) if trips is None else trips
    cfg = sim_cfg or SimConfig(seed=int(np.random.SeedSequence([city.seed, seed, 3]).generate_state(1)[0]))
    sim = Simulator(city.grid, fd or city.truth, trips, city.chi, cfg, t_start=t_begin)
    sim.run_to_completion(t_end)
    routes = sim.routes(extrapolate_active=False)
    routes = assign_taxis(routes)
    if day is not None:
        routes.days = [day] * len(routes)
    return OracleRun(routes, sim.field_snapshots, sim.snapshots, sim.injected, sim.arrived, sim.log)


# --- GPS emission ----------------------------------------------------------

@dataclass
class EmissionConfig:
    interval_lo: float = 20.0
    interval_hi: float = 60.0
    noise_m: float = 10.0
    dropout: float = 0.0
    corruption: float = 0.0
    teleport_share: float = 0.5
    teleport_m: float = 15_000.0
    base_date: str = "2024-03-04"
    utc_offset_s: float = 8 * 3600.0

    def __post_init__(self):
        for name in ("dropout", "corruption", "teleport_share"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 < self.interval_lo <= self.interval_hi:
            raise ValueError("need 0 < interval_lo <= interval_hi")

    def epoch_of_midnight(self) -> float:
        d = _dt.datetime.strptime(self.base_date, "%Y-%m-%d").replace(tzinfo=_dt.timezone.utc)
        return d.timestamp() - self.utc_offset_s


@dataclass
class EmissionTruth:
    """Per record: source route index (-1 never) and kind (0 clean, 1 off-grid, 2 teleport)."""

    route: np.ndarray
    kind: np.ndarray


def taxi_seed(run_seed: int, taxi_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([run_seed, zlib.crc32(taxi_id.encode())])


def _emission_times(rng, entries: np.ndarray, dirs: np.ndarray, interval: float) -> np.ndarray:
    t0, t1 = entries[0], entries[-1]
    periodic = t0 + interval * np.arange(int(math.floor((t1 - t0) / interval)) + 1)
    turns = entries[1:-1][dirs[1:] != dirs[:-1]] if len(dirs) > 1 else np.zeros(0)
    t = np.round(np.concatenate([periodic, turns, [t1]]), 3)
    return np.unique(t)


def emit_gps(routes: RouteSet, grid: GridConfig, cfg: EmissionConfig | None = None, seed: int = 0,
             projection: Projection | None = None):
    """Occupied-status GPS reports for each route plus the record-to-route truth table.

    Reports come every ``interval`` seconds (fixed per taxi), at every turn,
    and at departure and arrival.  Returns ``(records, truth)`` with records
    in time order.
    """
    cfg = cfg or EmissionConfig()
    proj = projection or Projection()
    epoch0 = cfg.epoch_of_midnight()
    cs = grid.cell_size
    taxis = sorted(set(routes.taxi_ids))
    intervals, rngs = {}, {}
    for tx in taxis:
        rngs[tx] = np.random.default_rng(taxi_seed(seed, tx))
        intervals[tx] = float(rngs[tx].uniform(cfg.interval_lo, cfg.interval_hi))
    half_w = grid.nx * cs / 2
    depart = routes.depart
    order = sorted(range(len(routes)), key=lambda i: (routes.taxi_ids[i], depart[i], i))
    ts, xs, ys, tids, src, kinds = [], [], [], [], [], []
    for i in order:
        a, b = routes.offsets[i], routes.offsets[i + 1]
        cells = routes.cells[a:b]
        if len(cells) < 2:
            continue
        entries = routes.entries[a:b]
        tx = routes.taxi_ids[i]
        rng = rngs[tx]
        dirs = step_directions(cells)
        t = _emission_times(rng, entries, dirs, intervals[tx])
        cx = grid.origin_x + (cells[:, 0] + 0.5) * cs
        cy = grid.origin_y + (cells[:, 1] + 0.5) * cs
        x = np.interp(t, entries, cx)
        y = np.interp(t, entries, cy)
        n = len(t)
        if cfg.noise_m > 0:
            x = x + rng.normal(0, cfg.noise_m, n)
            y = y + rng.normal(0, cfg.noise_m, n)
        keep = np.ones(n, dtype=bool)
        if cfg.dropout > 0 and n > 2:
            keep[1:-1] = rng.random(n - 2) >= cfg.dropout
        kind = np.zeros(n, dtype=np.int8)
        if cfg.corruption > 0:
            hit = rng.random(n) < cfg.corruption
            u = rng.random(n)
            ang = rng.uniform(0, 2 * np.pi, n)
            prev = -2
            for j in np.flatnonzero(hit & keep):
                if prev == j - 1:
                    continue
                prev = j
                if u[j] < cfg.teleport_share:
                    # push 15 km away, picking an angle that stays on the grid when one exists
                    for k in range(16):
                        a2 = ang[j] + k * np.pi / 8
                        nxp, nyp = x[j] + cfg.teleport_m * np.cos(a2), y[j] + cfg.teleport_m * np.sin(a2)
                        if grid.origin_x < nxp < grid.origin_x + grid.nx * cs and \
                                grid.origin_y < nyp < grid.origin_y + grid.ny * cs:
                            break
                    x[j], y[j] = nxp, nyp
                    kind[j] = 2
                else:
                    x[j] = x[j] + 2 * half_w + 30_000.0
                    kind[j] = 1
        lon, lat = proj.to_lonlat(x[keep], y[keep])
        ts.append(t[keep] + epoch0)
        xs.append(lon)
        ys.append(lat)
        tids.extend([tx] * int(keep.sum()))
        src.append(np.full(int(keep.sum()), i))
        kinds.append(kind[keep])
    if not ts:
        return [], EmissionTruth(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int8))
    T = np.concatenate(ts)
    LON = np.concatenate(xs)
    LAT = np.concatenate(ys)
    S = np.concatenate(src)
    K = np.concatenate(kinds)
    tid_arr = np.array(tids)
    ordr = np.lexsort((np.arange(len(T)), tid_arr, T))
    records = [GpsRecord(str(tid_arr[j]), float(T[j]), float(LON[j]), float(LAT[j]), OCCUPIED) for j in ordr]
    return records, EmissionTruth(S[ordr], K[ordr])


# --- scenario files --------------------------------------------------------

@dataclass
class Scenario:
    seed: int = 0
    run_seed: int = 1
    emission_seed: int = 2
    nx: int = 64
    ny: int = 64
    corridors: int = 20
    block: int | None = None
    t_begin: float = 0.0
    t_end: float = 86400.0
    demand: dict = field(default_factory=dict)
    chi: dict = field(default_factory=lambda: {"a_am": 0.4, "a_pm": 0.4})
    emission: dict = field(default_factory=dict)

    def city(self) -> OracleCity:
        dem = dict(self.demand)
        surges = [Surge(**s) for s in dem.pop("surges", [])]
        return generate_city(self.seed, self.nx, self.ny, self.corridors,
                             DemandProfile(**dem, surges=surges), ChiProfile(**self.chi), self.block)

    def emission_config(self) -> EmissionConfig:
        return EmissionConfig(**self.emission)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "Scenario":
        return cls(**d)


def write_scenario(path: str | Path, sc: Scenario) -> None:
    Path(path).write_text(json.dumps(sc.to_json(), indent=2, sort_keys=True) + "\n")


def read_scenario(path: str | Path) -> Scenario:
    return Scenario.from_json(json.loads(Path(path).read_text()))
