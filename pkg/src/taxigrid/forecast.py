"""Speed-field correction from observations and one-hour rollouts.

Each forecast restarts the vehicle population from historical routes at the
origin ``t0``: vehicles en route are placed where their route puts them, the
occupancy buffer is filled from the preceding historical instants, the speed
field is overwritten wherever the historical snapshot at ``t0`` has data,
and the stepper then runs on its own for the horizon with the historical
departures as demand.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimation import DEFAULT_V_CAP, DT, KMH_PER_MPS, WINDOW, DirectedCellState, instant_samples
from .fd import FdField
from .grid import GridConfig, unflat_key
from .routes import RouteSet, _ranges
from .simulator import ACTIVE, ChiProfile, SimConfig, Simulator

_SPAN = 1.0e6  # wider than any time of day in seconds; separates routes in the flat position index


class History:
    """Historical routes indexed for fast restarts and snapshot lookups."""

    def __init__(self, routes, grid: GridConfig, t_begin: float = 0.0, t_end: float = 86400.0,
                 dt: float = DT, window: int = WINDOW, v_cap: float = DEFAULT_V_CAP):
        rs = RouteSet.coerce(routes)
        keep = np.flatnonzero(rs.n_steps > 0)
        self.routes = rs if len(keep) == len(rs) else rs.subset(keep)
        self.grid = grid
        self.dt, self.window, self.v_cap = dt, window, v_cap
        self.t_begin = t_begin
        self.n_inst = int(round((t_end - t_begin) / dt)) + 1
        k, key, speed = instant_samples(self.routes, grid, t_begin, self.n_inst, dt, v_cap)
        self._key = key.astype(np.int32)
        self._speed = speed
        self._bounds = np.searchsorted(k, np.arange(self.n_inst + 1))
        self.depart = self.routes.depart
        self.arrive = self.routes.arrive
        rid = np.repeat(np.arange(len(self.routes)), self.routes.lengths)
        self._flat = rid * _SPAN + self.routes.entries

    def __len__(self) -> int:
        return len(self.routes)

    def _lattice(self, t: float) -> int:
        q = (t - self.t_begin) / self.dt
        k = int(round(q))
        if abs(q - k) > 1e-9 or not 0 <= k < self.n_inst:
            raise ValueError(f"t={t} is not an instant of this history")
        return k

    def instant(self, t: float):
        """``(count, vhat)`` per key at lattice instant ``t``; vhat is 0 where empty."""
        n = self.grid.n_keys
        if (t - self.t_begin) / self.dt < -1e-9:
            return np.zeros(n, dtype=np.int64), np.zeros(n)
        k = self._lattice(t)
        lo, hi = self._bounds[k], self._bounds[k + 1]
        key = self._key[lo:hi]
        count = np.bincount(key, minlength=n)
        vsum = np.bincount(key, weights=self._speed[lo:hi], minlength=n)
        return count, np.where(count > 0, vsum / np.maximum(count, 1), 0.0)

    def snapshot(self, T: float) -> DirectedCellState:
        n = self.grid.n_keys
        vs = np.zeros(n)
        N = np.zeros(n)
        for s in range(self.window):
            c, v = self.instant(T - s * self.dt)
            vs += v
            N += c
        return DirectedCellState((vs / self.window).reshape(self.grid.shape), N.reshape(self.grid.shape), float(T))

    def snapshots(self, times) -> dict[float, DirectedCellState]:
        return {float(T): self.snapshot(T) for T in times}

    def positions(self, t0: float):
        """Routes en route at ``t0`` with the index of their current cell and distance along the route."""
        idx = np.flatnonzero((self.depart <= t0) & (self.arrive > t0))
        if len(idx) == 0:
            return idx, idx, np.zeros(0)
        pos = np.searchsorted(self._flat, idx * _SPAN + t0, side="right") - 1
        i = pos - self.routes.offsets[idx]
        K = self.routes.n_steps[idx]
        i = np.clip(i, 0, K - 1)
        e = self.routes.entries
        e0 = e[self.routes.offsets[idx] + i]
        e1 = e[self.routes.offsets[idx] + i + 1]
        span = e1 - e0
        frac = np.where(span > 0, (t0 - e0) / np.where(span > 0, span, 1.0), 0.0)
        return idx, i, (i + np.clip(frac, 0.0, 1.0 - 1e-9)) * self.grid.cell_size


def restart(history: History, t0: float, fd: FdField, chi: ChiProfile | None = None,
            cfg: SimConfig | None = None, horizon: float = 3600.0) -> Simulator:
    """A simulator at clock ``t0`` holding the historical vehicles en route at ``t0``.

    Departures in ``(t0, t0 + horizon]`` are pending.  The occupancy buffer
    holds the preceding ``window - 1`` historical instants and the speed
    field starts at the diagram target for the historical occupancy.
    """
    chi = chi or ChiProfile()
    cfg = cfg or SimConfig()
    grid = history.grid
    on_road, cell_i, l0 = history.positions(t0)
    later = np.flatnonzero((history.depart > t0) & (history.depart <= t0 + horizon))
    sel = np.concatenate([on_road, later])
    sim = Simulator(grid, fd, history.routes.subset(sel), chi, cfg, t_start=t0)
    n_on = len(on_road)
    a = np.arange(n_on)
    if n_on:
        src = history.routes
        sim.status[a] = ACTIVE
        sim.l[a] = l0
        e0 = src.entries[src.offsets[on_road] + cell_i]
        e1 = src.entries[src.offsets[on_road] + cell_i + 1]
        dur = e1 - e0
        sim.v[a] = np.where(dur > 0, np.minimum(grid.cell_size / np.where(dur > 0, dur, 1.0) * KMH_PER_MPS,
                                                cfg.v_cap), cfg.v_cap)
        lens = cell_i + 1
        sim.entries[_ranges(sim.cell_off[a], lens)] = src.entries[_ranges(src.offsets[on_road], lens)]
        sim.active = a
        sim.injected = n_on
    # every en-route trip departed at or before t0, so they lead the pending order
    sim._next_pending = n_on
    assert np.all(sim.pending[:n_on] < n_on)
    total = np.zeros(grid.n_keys)
    for s in range(cfg.window, 0, -1):
        c, v = history.instant(t0 - s * cfg.dt) if t0 - s * cfg.dt >= history.t_begin else (
            np.zeros(grid.n_keys, dtype=np.int64), np.zeros(grid.n_keys))
        total += c
        if s < cfg.window:
            sim.push_counts(c)
            sim._vhat.append(v)
    sim.V = np.maximum(fd.speed(chi(t0 - cfg.dt) * total, cfg.v_min), cfg.v_min)
    return sim


def assimilate(sim: Simulator, observed: DirectedCellState, tol: float = 1e-6) -> Simulator:
    """Overwrite the speed field wherever the observation has data; occupancy and vehicles are untouched."""
    if abs(float(observed.t) - sim.clock) > tol:
        raise ValueError(f"observation at t={observed.t} does not match simulator clock {sim.clock}")
    obs = np.asarray(observed.V, dtype=float).reshape(-1)
    hit = obs > 0
    sim.V = sim.V.copy()
    sim.V[hit] = np.maximum(obs[hit], sim.cfg.v_min)
    return sim


@dataclass
class Forecast:
    t0: float
    times: np.ndarray                       # t0 + lead for each stored lead
    estimated: dict = field(default_factory=dict)   # time -> (nx, ny, 4) estimated V
    field: dict = field(default_factory=dict)       # time -> (nx, ny, 4) simulator speed field

    def leads_min(self) -> np.ndarray:
        return np.round((self.times - self.t0) / 60.0).astype(int)


def forecast(sim: Simulator, horizon: float = 3600.0, every: float = 600.0, include_origin: bool = True) -> Forecast:
    """Run the stepper ``horizon`` ahead with no further observations; 10-minute speed snapshots."""
    t0 = sim.clock
    sim.record_snapshots = True
    sim.snapshots.clear()
    sim.field_snapshots.clear()
    n = int(round(horizon / sim.cfg.dt))
    for _ in range(n + 1):
        sim.step()
    leads = every * np.arange(0 if include_origin else 1, int(round(horizon / every)) + 1)
    times = t0 + leads
    fc = Forecast(t0, times)
    for T in times:
        T = float(T)
        if T in sim.snapshots:
            fc.estimated[T] = sim.snapshots[T].V
            fc.field[T] = sim.field_snapshots[T]
    return fc


def origin_seed(seed: int, t0: float) -> int:
    return int(np.random.SeedSequence([seed, int(round(t0))]).generate_state(1)[0])


def forecast_from_history(history: History, t0: float, fd: FdField, chi: ChiProfile | None = None,
                          cfg: SimConfig | None = None, observed: DirectedCellState | None = None,
                          horizon: float = 3600.0) -> Forecast:
    base = cfg or SimConfig()
    cfg_t = SimConfig(**{**base.__dict__, "seed": origin_seed(base.seed, t0)})
    sim = restart(history, t0, fd, chi, cfg_t, horizon)
    obs = history.snapshot(t0) if observed is None else observed
    assimilate(sim, obs)
    return forecast(sim, horizon)


def origins(t_begin: float, t_end: float, every: float = 600.0) -> np.ndarray:
    """Forecast origins on the ``every`` lattice in ``[t_begin, t_end)``."""
    first = np.ceil(t_begin / every - 1e-9) * every
    return np.arange(first, t_end - 1e-9, every)


def rolling_evaluation(history: History, fd: FdField, chi: ChiProfile | None, t0s, cfg: SimConfig | None = None,
                       horizon: float = 3600.0, keep_leads=None, progress=None) -> list[Forecast]:
    """One forecast per origin in ``t0s``; ``keep_leads`` (minutes) trims what is stored."""
    out = []
    for t0 in t0s:
        fc = forecast_from_history(history, float(t0), fd, chi, cfg, horizon=horizon)
        if keep_leads is not None:
            keep = set(int(x) for x in keep_leads)
            mask = np.isin(fc.leads_min(), list(keep))
            drop = [float(T) for T in fc.times[~mask]]
            for T in drop:
                fc.estimated.pop(T, None)
                fc.field.pop(T, None)
            fc.times = fc.times[mask]
        out.append(fc)
        if progress:
            progress(t0)
    return out


FORECAST_HEADER = ["t0_s", "lead_min", "col", "row", "dir", "V_pred_kmh"]


def write_forecasts(path: str | Path, forecasts, grid: GridConfig, product: str = "estimated") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FORECAST_HEADER)
        for fc in forecasts:
            frames = fc.estimated if product == "estimated" else fc.field
            for T, lead in zip(fc.times, fc.leads_min()):
                V = frames[float(T)].reshape(-1)
                nz = np.flatnonzero(V > 0)
                cols, rows, dirs = unflat_key(nz, grid)
                for c, r, d, v in zip(cols, rows, dirs, V[nz]):
                    w.writerow([f"{fc.t0:g}", int(lead), c, r, "RULD"[d], f"{v:.6g}"])


def read_forecasts(path: str | Path, grid: GridConfig) -> list[Forecast]:
    by_t0: dict[float, dict[float, np.ndarray]] = {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != FORECAST_HEADER:
            raise ValueError(f"{path}: expected header {FORECAST_HEADER}, got {header}")
        for lineno, row in enumerate(rd, 2):
            try:
                t0, lead = float(row[0]), int(row[1])
                c, r, d = int(row[2]), int(row[3]), "RULD".index(row[4])
                v = float(row[5])
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            frames = by_t0.setdefault(t0, {})
            T = t0 + 60.0 * lead
            if T not in frames:
                frames[T] = np.zeros(grid.shape)
            frames[T][c, r, d] = v
    out = []
    for t0 in sorted(by_t0):
        times = np.array(sorted(by_t0[t0]))
        out.append(Forecast(t0, times, estimated=by_t0[t0]))
    return out
