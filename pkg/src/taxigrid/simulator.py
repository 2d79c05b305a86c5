"""Coarse-grained cellular-automaton stepper.

Vehicles follow pre-planned cell paths and never interact directly.  Each
step: inject departures, count vehicles per (cell, direction), scale the
ten-step occupancy by the capacity coefficient, look up target speeds on the
fundamental diagrams, relax the speed field toward them, then advance every
vehicle at a speed blended from its current and next cell.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass

import numpy as np

from .estimation import KMH_PER_MPS, DirectedCellState
from .fd import FdField
from .grid import GridConfig
from .routes import RouteSet, _ranges


@dataclass
class ChiProfile:
    """Two-Gaussian rush-hour multiplier on occupancy; times in seconds of day, widths in minutes."""

    t_am: float = 7 * 3600.0
    t_pm: float = 17.5 * 3600.0
    a_am: float = 0.5
    a_pm: float = 0.5
    sigma_am: float = 60.0
    sigma_pm: float = 60.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        sa, sp = self.sigma_am * 60.0, self.sigma_pm * 60.0
        chi = (1.0 + self.a_am * np.exp(-(t - self.t_am) ** 2 / (2 * sa * sa))
               + self.a_pm * np.exp(-(t - self.t_pm) ** 2 / (2 * sp * sp)))
        return float(chi) if chi.ndim == 0 else chi

    @classmethod
    def flat(cls) -> "ChiProfile":
        return cls(a_am=0.0, a_pm=0.0)


@dataclass
class SimConfig:
    dt: float = 60.0
    lam: float = 0.5
    omega: float = 0.5
    sigma_eta: float = 2.0
    v_min: float = 1.0
    v_cap: float = 120.0
    window: int = 10
    snapshot_every: float = 600.0
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0 or self.window < 1:
            raise ValueError("dt must be positive and window >= 1")
        if not 0 <= self.omega <= 1 or not 0 <= self.lam <= 1:
            raise ValueError("omega and lam must lie in [0, 1]")
        if self.v_min <= 0 or self.v_cap < self.v_min:
            raise ValueError("need 0 < v_min <= v_cap")


def relax(current, target, omega: float):
    return current + omega * (target - current)


def look_ahead_speed(v_cur, v_next, lam: float, eta, v_min: float, v_cap: float):
    return np.clip(lam * np.asarray(v_cur) + (1.0 - lam) * np.asarray(v_next) + eta, v_min, v_cap)


PENDING, ACTIVE, ARRIVED = 0, 1, 2


class Simulator:
    """Mutable simulation state plus the per-step operations.

    ``trips`` supplies each vehicle's cell path; only ``entries[0]`` (the
    departure time) is read from it.  Entry times are re-recorded as the
    simulation runs and are available through :meth:`routes`.
    """

    def __init__(self, grid: GridConfig, fd: FdField, trips, chi: ChiProfile | None = None,
                 cfg: SimConfig | None = None, t_start: float = 0.0, record_snapshots: bool = True):
        self.grid = grid
        self.fd = fd
        self.chi = chi or ChiProfile()
        self.cfg = cfg or SimConfig()
        trips = RouteSet.coerce(trips)
        keep = np.flatnonzero(trips.n_steps > 0)
        self.n_degenerate = len(trips) - len(keep)
        self.trips = trips if len(keep) == len(trips) else trips.subset(keep)
        tr = self.trips
        self.n = len(tr)
        self.K = tr.n_steps.astype(np.int64)
        self.cell_off = tr.offsets[:-1].astype(np.int64)
        self.key_off = np.concatenate([[0], np.cumsum(self.K)[:-1]]).astype(np.int64) if self.n else np.zeros(0, np.int64)
        _, _, keys, _, _ = tr.step_table(grid)
        self.keys = keys.astype(np.int64)
        self.depart = tr.depart.astype(float)
        self.pending = np.argsort(self.depart, kind="stable")
        self._next_pending = 0
        self.status = np.zeros(self.n, dtype=np.int8)
        self.l = np.zeros(self.n)
        self.v = np.zeros(self.n)
        self.entries = np.full(len(tr.entries), np.nan)
        self.arrive_t = np.full(self.n, np.nan)
        self.active = np.zeros(0, dtype=np.int64)
        self.injected = 0
        self.arrived = 0

        self.clock = float(t_start)
        self.V = self.fd.Vf.reshape(-1).copy()
        self._counts: deque = deque(maxlen=self.cfg.window)
        self._vhat: deque = deque(maxlen=self.cfg.window)
        self._count_sum = np.zeros(grid.n_keys, dtype=np.int64)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.record_snapshots = record_snapshots
        self.snapshots: dict[float, DirectedCellState] = {}
        self.field_snapshots: dict[float, np.ndarray] = {}
        self.log: list[tuple[float, int, int, int]] = []

    # --- per-step operations -------------------------------------------------

    def inject_departures(self, t: float) -> np.ndarray:
        """Activate every pending trip with departure <= t; returns the new trip indices."""
        j = self._next_pending
        hi = j
        while hi < self.n and self.depart[self.pending[hi]] <= t:
            hi += 1
        new = self.pending[j:hi]
        self._next_pending = hi
        if len(new):
            first = self.keys[self.key_off[new]]
            self.status[new] = ACTIVE
            self.v[new] = self.fd.Vf.reshape(-1)[first]
            self.entries[self.cell_off[new]] = self.depart[new]
            # a trip requested mid-step has been under way since its departure time
            head = t - self.depart[new]
            self.l[new] = 0.0
            late = head > 0
            if late.any():
                idx = np.flatnonzero(late)
                kmh = np.maximum(self.V[first[idx]], self.cfg.v_min)
                l0 = np.minimum(kmh * head[idx] / KMH_PER_MPS, (self.K[new[idx]] - 1) * self.grid.cell_size)
                self._record_crossings(new[idx], np.zeros(len(idx)), l0, self.depart[new[idx]], kmh)
                self.l[new[idx]] = l0
            self.active = np.concatenate([self.active, new])
            self.injected += len(new)
        return new

    def _record_crossings(self, trips, l_old, l_new, t_ref, kmh):
        """Entry times of every cell boundary passed between ``l_old`` and ``l_new`` at ``kmh`` from ``t_ref``."""
        cs = self.grid.cell_size
        c_old = (l_old // cs).astype(np.int64)
        c_new = np.minimum((l_new // cs).astype(np.int64), self.K[trips])
        n_cross = np.maximum(c_new - c_old, 0)
        if n_cross.any():
            rep = np.repeat(np.arange(len(trips)), n_cross)
            m = _ranges(c_old + 1, n_cross)
            self.entries[self.cell_off[trips][rep] + m] = t_ref[rep] + (m * cs - l_old[rep]) * KMH_PER_MPS / kmh[rep]

    def _positions(self):
        a = self.active
        i = np.minimum((self.l[a] // self.grid.cell_size).astype(np.int64), self.K[a] - 1)
        cur = self.keys[self.key_off[a] + i]
        nxt = self.keys[self.key_off[a] + np.minimum(i + 1, self.K[a] - 1)]
        return cur, nxt

    def count_instant(self, cur_keys) -> np.ndarray:
        return self.push_counts(np.bincount(cur_keys, minlength=self.grid.n_keys))

    def push_counts(self, counts) -> np.ndarray:
        """Append one instant's per-key counts to the rolling occupancy buffer."""
        counts = np.asarray(counts, dtype=np.int64)
        if len(self._counts) == self._counts.maxlen:
            self._count_sum -= self._counts[0]
        self._counts.append(counts)
        self._count_sum += counts
        return counts

    def effective_occupancy(self, t: float) -> np.ndarray:
        return self.chi(t) * self._count_sum

    def update_speed_field(self, N_eff) -> np.ndarray:
        target = self.fd.speed(N_eff, self.cfg.v_min)
        self.V = np.maximum(relax(self.V, target, self.cfg.omega), self.cfg.v_min)
        return self.V

    def vehicle_speed(self, cur_keys, next_keys) -> np.ndarray:
        c = self.cfg
        if c.sigma_eta > 0:
            eta = self.rng.normal(0.0, c.sigma_eta, size=len(cur_keys))
        else:
            eta = 0.0
        return look_ahead_speed(self.V[cur_keys], self.V[next_keys], c.lam, eta, c.v_min, c.v_cap)

    def advance_vehicles(self, t: float, v: np.ndarray, dt: float | None = None) -> np.ndarray:
        """Move active vehicles at constant speed ``v`` for one step; returns arrived trip indices."""
        dt = self.cfg.dt if dt is None else dt
        a = self.active
        if len(a) == 0:
            return a
        cs = self.grid.cell_size
        l_old = self.l[a]
        l_new = l_old + v * dt / KMH_PER_MPS
        K = self.K[a]
        self._record_crossings(a, l_old, l_new, np.full(len(a), t), v)
        done = l_new >= K * cs
        self.l[a] = np.minimum(l_new, K * cs)
        self.v[a] = v
        arrived = a[done]
        if len(arrived):
            self.arrive_t[arrived] = self.entries[self.cell_off[arrived] + self.K[arrived]]
            self.status[arrived] = ARRIVED
            self.active = a[~done]
            self.arrived += len(arrived)
        return arrived

    def step(self) -> np.ndarray:
        t = self.clock
        self.inject_departures(t)
        cur, nxt = self._positions()
        self.count_instant(cur)
        self.update_speed_field(self.effective_occupancy(t))
        v = self.vehicle_speed(cur, nxt)
        self._sample_speeds(cur, v)
        if self.record_snapshots and self._on_snapshot_lattice(t):
            self.snapshots[t] = self.snapshot(t)
            self.field_snapshots[t] = self.V.reshape(self.grid.shape).copy()
        arrived = self.advance_vehicles(t, v)
        self.log.append((t, self.injected, len(self.active), self.arrived))
        self.clock = t + self.cfg.dt
        return arrived

    # --- bookkeeping ---------------------------------------------------------

    def _sample_speeds(self, cur, v):
        n = self.grid.n_keys
        cnt = self._counts[-1]
        vs = np.bincount(cur, weights=v, minlength=n)
        self._vhat.append(np.where(cnt > 0, vs / np.maximum(cnt, 1), 0.0))

    def _on_snapshot_lattice(self, t: float) -> bool:
        q = t / self.cfg.snapshot_every
        return abs(q - round(q)) < 1e-9

    def snapshot(self, t: float | None = None) -> DirectedCellState:
        """Ten-instant average of the simulated vehicles' speeds and counts."""
        w = self.cfg.window
        shape = self.grid.shape
        if not self._counts:
            return DirectedCellState(np.zeros(shape), np.zeros(shape), self.clock if t is None else t)
        vsum = np.sum(self._vhat, axis=0)
        N = self._count_sum.astype(float)
        return DirectedCellState((vsum / w).reshape(shape), N.reshape(shape),
                                 float(self.clock if t is None else t))

    def run_until(self, t_end: float) -> None:
        while self.clock < t_end - 1e-9:
            self.step()

    def run_to_completion(self, t_min: float, max_extra: float = 6 * 3600.0) -> None:
        """Step past ``t_min`` until no vehicle is pending or active (or the safety margin runs out)."""
        self.run_until(t_min)
        stop = max(t_min, self.clock) + max_extra
        while (len(self.active) or self._next_pending < self.n) and self.clock < stop:
            self.step()

    @property
    def n_pending(self) -> int:
        return self.n - self._next_pending

    def routes(self, extrapolate_active: bool = True) -> RouteSet:
        """Recorded routes of arrived trips, plus (optionally) active ones closed off at their current cell."""
        tr = self.trips
        arrived = np.flatnonzero(self.status == ARRIVED)
        if len(arrived):
            sub = tr.subset(arrived)
            gather = _ranges(self.cell_off[arrived], self.K[arrived] + 1)
            sub.entries = self.entries[gather].copy()
            pieces = [sub]
        else:
            pieces = []
        if extrapolate_active and len(self.active):
            a = self.active
            cs = self.grid.cell_size
            i = np.minimum((self.l[a] // cs).astype(np.int64), self.K[a] - 1)
            lens = i + 2
            gather = _ranges(self.cell_off[a], lens)
            ent = self.entries[gather].copy()
            last = np.cumsum(lens) - 1
            mps = np.maximum(self.v[a], self.cfg.v_min) / KMH_PER_MPS
            ent[last] = self.clock + ((i + 1) * cs - self.l[a]) / mps
            offsets = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
            pieces.append(RouteSet([tr.taxi_ids[j] for j in a], offsets, tr.cells[gather].copy(), ent,
                                   None if tr.days is None else [tr.days[j] for j in a]))
        return concat_routesets(pieces)

    def arrivals(self):
        """``(taxi_id, depart_s, arrive_s, route_len_m)`` for every arrived trip, in arrival order."""
        done = np.flatnonzero(self.status == ARRIVED)
        done = done[np.lexsort((done, self.arrive_t[done]))]
        cs = self.grid.cell_size
        return [(self.trips.taxi_ids[j], float(self.depart[j]), float(self.arrive_t[j]), float(self.K[j] * cs))
                for j in done]


def concat_routesets(parts) -> RouteSet:
    parts = [p for p in parts if len(p)]
    if not parts:
        return RouteSet.empty()
    if len(parts) == 1:
        return parts[0]
    offs, base = [np.zeros(1, dtype=np.int64)], 0
    for p in parts:
        offs.append(p.offsets[1:] + base)
        base += p.offsets[-1]
    days = None
    if any(p.days is not None for p in parts):
        days = [d for p in parts for d in (p.days if p.days is not None else [None] * len(p))]
    return RouteSet([t for p in parts for t in p.taxi_ids], np.concatenate(offs),
                    np.concatenate([p.cells for p in parts]), np.concatenate([p.entries for p in parts]), days)


ARRIVALS_HEADER = ["taxi_id", "depart_s", "arrive_s", "route_len_m"]


def write_arrivals(path, rows) -> None:
    """Arrivals log: one ``taxi_id,depart_s,arrive_s,route_len_m`` line per finished trip."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ARRIVALS_HEADER)
        for tx, d, a, ln in rows:
            w.writerow([tx, f"{d:.3f}", f"{a:.3f}", f"{ln:g}"])
