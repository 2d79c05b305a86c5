"""Speed and occupancy fields estimated from continuous routes.

An *instant* is a point on the 60 s lattice.  At each instant every en-route
vehicle contributes one count and its cell-traversal speed to the
``(cell, direction)`` it occupies.  Ten consecutive instants are then folded
into a snapshot: occupancy is the sum of the counts and speed is the sum of
the per-instant mean speeds divided by ten, empty instants counting as zero.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import CellIndex, Direction, GridConfig, unflat_key
from .routes import ContinuousRoute, RouteSet, _ranges

KMH_PER_MPS = 3.6
DEFAULT_V_CAP = 120.0
WINDOW = 10
DT = 60.0


@dataclass
class InstantSample:
    """Per-(cell, direction) count and mean speed at one instant; speed is NaN where empty."""

    count: np.ndarray
    speed: np.ndarray
    t: float


@dataclass
class DirectedCellState:
    """Averaged speed ``V`` (km/h) and summed occupancy ``N`` at snapshot time ``t``."""

    V: np.ndarray
    N: np.ndarray
    t: float


@dataclass
class SampleArchive:
    """Flux-occupancy points, one per (key, window) with non-zero occupancy."""

    key: np.ndarray
    t: np.ndarray
    N: np.ndarray
    flux: np.ndarray

    def __len__(self) -> int:
        return len(self.key)

    def grouped(self):
        """Yield ``(key, N, flux, t)`` per key, keys ascending, windows in time order."""
        if not len(self.key):
            return
        order = np.lexsort((self.t, self.key))
        k = self.key[order]
        bounds = np.flatnonzero(np.diff(k)) + 1
        for idx in np.split(order, bounds):
            yield int(self.key[idx[0]]), self.N[idx], self.flux[idx], self.t[idx]

    def counts_per_key(self, n_keys: int) -> np.ndarray:
        return np.bincount(self.key, minlength=n_keys)


def vehicle_state_at(route: ContinuousRoute, t: float, v_cap: float = DEFAULT_V_CAP,
                     cell_size: float = 100.0):
    """``(cell, direction, speed_kmh)`` of the vehicle at ``t``, or ``None`` if not en route."""
    if route.is_degenerate or t < route.depart_s or t >= route.arrive_s:
        return None
    i = int(np.searchsorted(route.entries, t, side="right")) - 1
    i = min(max(i, 0), route.n_steps - 1)
    dur = route.entries[i + 1] - route.entries[i]
    v = v_cap if dur <= 0 else min(cell_size / dur * KMH_PER_MPS, v_cap)
    cell = CellIndex(int(route.cells[i, 0]), int(route.cells[i, 1]))
    return cell, Direction(int(route.directions[i])), float(v)


def instant_samples(routes, cfg: GridConfig, t_start: float, n_instants: int,
                    dt: float = DT, v_cap: float = DEFAULT_V_CAP, chunk: int = 20000):
    """Presence of every vehicle at instants ``t_start + k * dt``, ``0 <= k < n_instants``.

    Returns ``(k, key, speed)`` arrays sorted by ``k``.  Routes are processed
    ``chunk`` at a time to bound memory.
    """
    rs = RouteSet.coerce(routes)
    parts = []
    if n_instants > 0:
        for lo in range(0, len(rs), chunk):
            sub = rs if len(rs) <= chunk else rs.subset(np.arange(lo, min(lo + chunk, len(rs))))
            parts.append(_chunk_samples(sub, cfg, t_start, n_instants, dt, v_cap))
    if not parts:
        z = np.zeros(0, dtype=np.int64)
        return z, z, np.zeros(0)
    k = np.concatenate([p[0] for p in parts])
    key = np.concatenate([p[1] for p in parts])
    speed = np.concatenate([p[2] for p in parts])
    order = np.argsort(k, kind="stable")
    return k[order], key[order], speed[order]


def _chunk_samples(rs: RouteSet, cfg, t_start, n_instants, dt, v_cap):
    _, _, key, tin, tout = rs.step_table(cfg)
    kin = np.ceil((tin - t_start) / dt)
    kout = np.ceil((tout - t_start) / dt)
    np.clip(kin, 0, n_instants, out=kin)
    np.clip(kout, 0, n_instants, out=kout)
    cnt = (kout - kin).astype(np.int64)
    live = cnt > 0
    key, tin, tout, kin, cnt = key[live], tin[live], tout[live], kin[live].astype(np.int64), cnt[live]
    dur = tout - tin
    speed = np.where(dur > 0, cfg.cell_size / np.where(dur > 0, dur, 1.0) * KMH_PER_MPS, v_cap)
    np.minimum(speed, v_cap, out=speed)
    return _ranges(kin, cnt), np.repeat(key, cnt), np.repeat(speed, cnt)


def _fold(k, key, speed, n_inst: int, n_keys: int):
    """Per-instant counts and speed sums for samples with local instant ``k``."""
    idx = k * n_keys + key
    count = np.bincount(idx, minlength=n_inst * n_keys).reshape(n_inst, n_keys)
    vsum = np.bincount(idx, weights=speed, minlength=n_inst * n_keys).reshape(n_inst, n_keys)
    return count, vsum


def average_instants(count: np.ndarray, vsum: np.ndarray, window: int = WINDOW):
    """Fold ``(window, n_keys)`` per-instant counts and speed sums into ``(V, N)``."""
    with np.errstate(invalid="ignore", divide="ignore"):
        vhat = np.where(count > 0, vsum / np.maximum(count, 1), 0.0)
    return vhat.sum(axis=0) / window, count.sum(axis=0)


def instantaneous_state(routes, t: float, cfg: GridConfig, v_cap: float = DEFAULT_V_CAP) -> InstantSample:
    k, key, speed = instant_samples(routes, cfg, t, 1, v_cap=v_cap)
    count, vsum = _fold(k, key, speed, 1, cfg.n_keys)
    with np.errstate(invalid="ignore", divide="ignore"):
        vhat = np.where(count[0] > 0, vsum[0] / count[0], np.nan)
    return InstantSample(count[0].reshape(cfg.shape), vhat.reshape(cfg.shape), float(t))


def averaged_state(routes, t_n: float, cfg: GridConfig, window: int = WINDOW, dt: float = DT,
                   v_cap: float = DEFAULT_V_CAP) -> DirectedCellState:
    t0 = t_n - (window - 1) * dt
    k, key, speed = instant_samples(routes, cfg, t0, window, dt, v_cap)
    count, vsum = _fold(k, key, speed, window, cfg.n_keys)
    V, N = average_instants(count, vsum, window)
    return DirectedCellState(V.reshape(cfg.shape), N.reshape(cfg.shape).astype(float), float(t_n))


def snapshot_series(routes, cfg: GridConfig, times, window: int = WINDOW, dt: float = DT,
                    v_cap: float = DEFAULT_V_CAP) -> list[DirectedCellState]:
    """:func:`averaged_state` at each time in ``times`` (all on one ``dt`` lattice)."""
    times = np.asarray(sorted(times), dtype=float)
    if len(times) == 0:
        return []
    first = times[0] - (window - 1) * dt
    lattice = np.round((times - first) / dt)
    if not np.allclose(lattice * dt + first, times):
        raise ValueError("snapshot times must share one dt lattice")
    n_inst = int(lattice[-1]) + 1
    k, key, speed = instant_samples(routes, cfg, first, n_inst, dt, v_cap)
    out = []
    for T, L in zip(times, lattice.astype(np.int64)):
        lo, hi = np.searchsorted(k, [L - window + 1, L + 1])
        count, vsum = _fold(k[lo:hi] - (L - window + 1), key[lo:hi], speed[lo:hi], window, cfg.n_keys)
        V, N = average_instants(count, vsum, window)
        out.append(DirectedCellState(V.reshape(cfg.shape), N.reshape(cfg.shape).astype(float), float(T)))
    return out


def snapshot_times(t_begin: float, t_end: float, stride: float = 600.0) -> np.ndarray:
    """End times of the non-overlapping windows tiling ``[t_begin, t_end]``."""
    n = int(math.floor((t_end - t_begin) / stride + 1e-9))
    return t_begin + stride * np.arange(1, n + 1)


def window_samples(routes, cfg: GridConfig, t_begin: float, t_end: float, stride: float = 600.0,
                   dt: float = DT, v_cap: float = DEFAULT_V_CAP) -> SampleArchive:
    """``(N, N * V)`` per key for each non-overlapping window of the span; empty windows omitted."""
    window = int(round(stride / dt))
    keys, ts, Ns, fl = [], [], [], []
    for s in snapshot_series(routes, cfg, snapshot_times(t_begin, t_end, stride), window, dt, v_cap):
        N = s.N.reshape(-1)
        nz = np.flatnonzero(N > 0)
        keys.append(nz)
        ts.append(np.full(len(nz), s.t))
        Ns.append(N[nz])
        fl.append(N[nz] * s.V.reshape(-1)[nz])
    if not keys:
        z = np.zeros(0)
        return SampleArchive(np.zeros(0, dtype=np.int64), z, z, z)
    return SampleArchive(np.concatenate(keys).astype(np.int64), np.concatenate(ts),
                         np.concatenate(Ns), np.concatenate(fl))


# --- artifacts -------------------------------------------------------------

SNAPSHOT_HEADER = ["t_s", "col", "row", "dir", "V_kmh", "N"]
SAMPLE_HEADER = ["col", "row", "dir", "t_s", "N", "flux"]


def write_snapshots(path: str | Path, states, cfg: GridConfig) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SNAPSHOT_HEADER)
        for s in states:
            V = s.V.reshape(-1)
            N = s.N.reshape(-1)
            nz = np.flatnonzero((V != 0) | (N != 0))
            cols, rows, dirs = unflat_key(nz, cfg)
            for c, r, d, v, n in zip(cols, rows, dirs, V[nz], N[nz]):
                w.writerow([f"{s.t:g}", c, r, "RULD"[d], f"{v:.6g}", f"{n:.6g}"])


def read_snapshots(path: str | Path, cfg: GridConfig) -> list[DirectedCellState]:
    by_t: dict[float, DirectedCellState] = {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != SNAPSHOT_HEADER:
            raise ValueError(f"{path}: expected header {SNAPSHOT_HEADER}, got {header}")
        for lineno, row in enumerate(rd, 2):
            try:
                t = float(row[0])
                c, r = int(row[1]), int(row[2])
                d = Direction.from_letter(row[3])
                v, n = float(row[4]), float(row[5])
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if not (0 <= c < cfg.nx and 0 <= r < cfg.ny):
                raise ValueError(f"{path}:{lineno}: cell ({c},{r}) outside grid")
            s = by_t.get(t)
            if s is None:
                s = by_t[t] = DirectedCellState(np.zeros(cfg.shape), np.zeros(cfg.shape), t)
            s.V[c, r, d] = v
            s.N[c, r, d] = n
    return [by_t[t] for t in sorted(by_t)]


def write_samples(path: str | Path, archive: SampleArchive, cfg: GridConfig) -> None:
    cols, rows, dirs = unflat_key(archive.key, cfg)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLE_HEADER)
        for c, r, d, t, n, f in zip(cols, rows, dirs, archive.t, archive.N, archive.flux):
            w.writerow([c, r, "RULD"[d], f"{t:g}", f"{n:.6g}", f"{f:.6g}"])


def read_samples(path: str | Path, cfg: GridConfig) -> SampleArchive:
    keys, ts, Ns, fl = [], [], [], []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != SAMPLE_HEADER:
            raise ValueError(f"{path}: expected header {SAMPLE_HEADER}, got {header}")
        for lineno, row in enumerate(rd, 2):
            try:
                c, r, d = int(row[0]), int(row[1]), Direction.from_letter(row[2])
                keys.append((c * cfg.ny + r) * 4 + int(d))
                ts.append(float(row[3]))
                Ns.append(float(row[4]))
                fl.append(float(row[5]))
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return SampleArchive(np.asarray(keys, dtype=np.int64), np.asarray(ts), np.asarray(Ns), np.asarray(fl))
