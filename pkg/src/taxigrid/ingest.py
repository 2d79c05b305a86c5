"""Raw GPS probe records to continuous, grid-rasterized occupied-trip routes.

Pipeline: drop records off the grid, group per (taxi, local civil day) and
sort by time, keep occupied records, drop implausible jumps, split on long
silences, then rasterize each trip onto the cell lattice with cell-entry
times interpolated along the path.
"""
from __future__ import annotations

import csv
import datetime as _dt
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import groupby
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .grid import CellIndex, GridConfig, Projection, cell_of_point, rasterize_segment
from .routes import ContinuousRoute

VACANT, OCCUPIED, NON_OPERATING = 0, 1, 2
MAX_JUMP_M = 10_000.0
MAX_GAP_S = 300.0
DAY_S = 86400.0


@dataclass(frozen=True)
class GpsRecord:
    taxi_id: str
    timestamp: float
    lon: float
    lat: float
    status: int

    def __post_init__(self):
        if self.status not in (VACANT, OCCUPIED, NON_OPERATING):
            raise ValueError(f"status must be 0, 1 or 2, got {self.status!r}")
        if not math.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")


@dataclass
class IngestConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    projection: Projection = field(default_factory=Projection)
    utc_offset_s: float = 8 * 3600.0
    max_jump_m: float = MAX_JUMP_M
    max_gap_s: float = MAX_GAP_S
    split_on_status: bool = True


@dataclass
class IngestStats:
    """Record accounting; ``kept`` plus every drop counter equals ``input``."""

    input: int = 0
    macroscopic: int = 0
    dedup: int = 0
    status: int = 0
    mesoscopic: int = 0
    short: int = 0
    kept: int = 0
    routes: int = 0
    degenerate: int = 0

    def merge(self, other: "IngestStats") -> None:
        for k in self.__dataclass_fields__:
            setattr(self, k, getattr(self, k) + getattr(other, k))

    @property
    def dropped(self) -> int:
        return self.macroscopic + self.dedup + self.status + self.mesoscopic + self.short

    def balanced(self) -> bool:
        return self.kept + self.dropped == self.input

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class DiscreteRoute:
    taxi_id: str
    times: list          # seconds of local day
    cells: list          # CellIndex per record
    day: str
    xy: list = field(default_factory=list)


# --- stages ----------------------------------------------------------------

def _xy(rec: GpsRecord, proj: Projection):
    x, y = proj.to_xy(rec.lon, rec.lat)
    return float(x), float(y)


def filter_macroscopic(records: Iterable[GpsRecord], cfg: IngestConfig, stats: IngestStats | None = None
                       ) -> Iterator[GpsRecord]:
    """Yield records with finite coordinates that fall on the grid, in input order."""
    for rec in records:
        if stats is not None:
            stats.input += 1
        if math.isfinite(rec.lon) and math.isfinite(rec.lat):
            x, y = _xy(rec, cfg.projection)
            if cell_of_point(x, y, cfg.grid) is not None:
                yield rec
                continue
        if stats is not None:
            stats.macroscopic += 1


def civil_day(ts: float, utc_offset_s: float) -> tuple[str, float]:
    """``(YYYY-MM-DD, seconds since local midnight)`` of a unix timestamp."""
    local = ts + utc_offset_s
    day0 = math.floor(local / DAY_S) * DAY_S
    tag = _dt.datetime.fromtimestamp(day0, tz=_dt.timezone.utc).strftime("%Y-%m-%d")
    return tag, local - day0


def build_trajectories(records: Iterable[GpsRecord], utc_offset_s: float = 8 * 3600.0,
                       stats: IngestStats | None = None) -> dict[tuple[str, str], list[GpsRecord]]:
    """Group by (taxi, civil day), sort by time, drop repeated timestamps (first wins)."""
    groups: dict[tuple[str, str], list[GpsRecord]] = {}
    for rec in records:
        day, _ = civil_day(rec.timestamp, utc_offset_s)
        groups.setdefault((rec.taxi_id, day), []).append(rec)
    out = {}
    for key in sorted(groups):
        recs = sorted(groups[key], key=lambda r: r.timestamp)  # stable: first of equal timestamps first
        kept = [recs[0]]
        for r in recs[1:]:
            if r.timestamp == kept[-1].timestamp:
                if stats is not None:
                    stats.dedup += 1
                continue
            kept.append(r)
        out[key] = kept
    return out


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def split_trips(trajectory: list[GpsRecord], cfg: IngestConfig, day: str = "",
                stats: IngestStats | None = None) -> list[DiscreteRoute]:
    """Occupied-only routes with implausible jumps removed and long silences split."""
    st = stats if stats is not None else IngestStats()
    proj, grid = cfg.projection, cfg.grid
    # occupied runs; a status change closes the run when split_on_status is set
    runs: list[list[GpsRecord]] = []
    for occ, grp in groupby(trajectory, key=lambda r: r.status == OCCUPIED):
        grp = list(grp)
        if not occ:
            st.status += len(grp)
        elif cfg.split_on_status or not runs:
            runs.append(grp)
        else:
            runs[-1].extend(grp)
    routes = []
    for run in runs:
        pts = [(_xy(r, proj), r) for r in run]
        pieces: list[list] = []
        prev = None
        for i, (p, r) in enumerate(pts):
            new_piece = prev is None or r.timestamp - prev[1].timestamp >= cfg.max_gap_s
            if new_piece:
                # a lone bad first record would otherwise poison every successor
                if (i + 2 < len(pts) and pts[i + 1][1].timestamp - r.timestamp < cfg.max_gap_s
                        and _dist(p, pts[i + 1][0]) >= cfg.max_jump_m
                        and _dist(pts[i + 1][0], pts[i + 2][0]) < cfg.max_jump_m):
                    st.mesoscopic += 1
                    continue
                pieces.append([(p, r)])
                prev = (p, r)
                continue
            if _dist(p, prev[0]) >= cfg.max_jump_m:
                st.mesoscopic += 1
                continue
            pieces[-1].append((p, r))
            prev = (p, r)
        for piece in pieces:
            if len(piece) < 2:
                st.short += len(piece)
                continue
            times, cells, xy = [], [], []
            for p, r in piece:
                _, tod = civil_day(r.timestamp, cfg.utc_offset_s)
                times.append(tod)
                cells.append(cell_of_point(p[0], p[1], grid))
                xy.append(p)
            st.kept += len(piece)
            routes.append(DiscreteRoute(piece[0][1].taxi_id, times, cells, day, xy))
    return routes


def rasterize_route(r: DiscreteRoute) -> ContinuousRoute:
    """Staircase between consecutive record cells with linearly interpolated entry times.

    Records that stay in the same cell add dwell time to that cell.  A route
    that never leaves its first cell comes back with zero moves.
    """
    cells = [tuple(r.cells[0])]
    entries = [float(r.times[0])]
    for i in range(1, len(r.cells)):
        a, b = CellIndex(*r.cells[i - 1]), CellIndex(*r.cells[i])
        steps = rasterize_segment(a, b)
        if not steps:
            continue
        t0, t1 = float(r.times[i - 1]), float(r.times[i])
        k = len(steps)
        for j, (c, _) in enumerate(steps, 1):
            cells.append(tuple(c))
            entries.append(t0 + (t1 - t0) * j / k)
    return ContinuousRoute(r.taxi_id, np.array(cells, dtype=np.int64), np.array(entries), r.day)


# --- whole pipeline --------------------------------------------------------

def _process_group(args):
    (taxi, day), recs, cfg = args
    st = IngestStats()
    out = []
    for dr in split_trips(recs, cfg, day, st):
        cr = rasterize_route(dr)
        st.routes += 1
        if cr.is_degenerate:
            st.degenerate += 1
        out.append(cr)
    return out, st


def preprocess(records: Iterable[GpsRecord], cfg: IngestConfig | None = None, workers: int = 1,
               keep_degenerate: bool = False) -> tuple[list[ContinuousRoute], IngestStats]:
    """Run the full cleaning pipeline; output sorted by taxi id, then departure."""
    cfg = cfg or IngestConfig()
    stats = IngestStats()
    groups = build_trajectories(filter_macroscopic(records, cfg, stats), cfg.utc_offset_s, stats)
    jobs = [(k, v, cfg) for k, v in groups.items()]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_process_group, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_process_group(j) for j in jobs]
    routes = []
    for rs, st in results:
        stats.merge(st)
        routes.extend(rs)
    if not keep_degenerate:
        routes = [r for r in routes if not r.is_degenerate]
    routes.sort(key=lambda r: (r.taxi_id, r.day or "", r.depart_s))
    return routes, stats


# --- CSV I/O ---------------------------------------------------------------

GPS_HEADER = ["taxi_id", "timestamp_unix_s", "lon_deg", "lat_deg", "status"]


def _looks_like_header(row) -> bool:
    try:
        float(row[1])
        return False
    except (IndexError, ValueError):
        return True


def read_gps_csv(path: str | Path) -> list[GpsRecord]:
    """Parse ``taxi_id,timestamp_unix_s,lon_deg,lat_deg,status``; a header line is optional."""
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            if lineno == 1 and _looks_like_header(row):
                continue
            try:
                if len(row) != 5:
                    raise ValueError(f"expected 5 fields, got {len(row)}")
                lon = float(row[2]) if row[2].strip() else math.nan
                lat = float(row[3]) if row[3].strip() else math.nan
                out.append(GpsRecord(row[0], float(row[1]), lon, lat, int(row[4])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_gps_csv(path: str | Path, records: Iterable[GpsRecord]) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GPS_HEADER)
        for r in records:
            w.writerow([r.taxi_id, f"{r.timestamp:.3f}", f"{r.lon:.8f}", f"{r.lat:.8f}", r.status])
            n += 1
    return n
