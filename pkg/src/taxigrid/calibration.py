"""Iterative tuning of free-flow speeds and capacities against historical speed statistics.

Regular hours drive V_f: a cell simulated faster than history loses a
little free-flow speed, a slower one gains it.  The morning rush drives
N_c (and N_m by the same factor): a cell whose simulated rush-hour minimum
is too fast loses capacity.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fd import FdField
from .grid import GridConfig
from .routes import RouteSet
from .simulator import ChiProfile, SimConfig, Simulator

log = logging.getLogger(__name__)


@dataclass
class TuningConfig:
    regular: tuple = (12 * 3600.0, 15 * 3600.0)
    rush: tuple = (7 * 3600.0, 9 * 3600.0)
    dv: float = 0.5
    dn: float = 0.05
    max_iter: int = 20
    tol: float = 1.0
    patience: int = 3
    v_min: float = 1.0
    nc_floor: float = 1e-3
    min_snapshots: int = 1
    min_occupancy: float = 0.0     # mean historical N over the regular window needed to tune a cell
    tune_chi: bool = False
    da: float = 0.05
    schedule: str = "joint"        # "joint": both rules every iteration; "alternate": V_f on even, N_c on odd
    rush_gate: float = 1.0         # N_c moves only on cells whose regular gap is within this (km/h)

    def __post_init__(self):
        (a0, a1), (b0, b1) = self.regular, self.rush
        if not (a0 < a1 and b0 < b1):
            raise ValueError("tuning windows must have positive length")
        if a0 < b1 and b0 < a1:
            raise ValueError("regular and rush windows overlap")
        if self.dv <= 0 or self.dn <= 0:
            raise ValueError("step sizes must be positive")
        if self.schedule not in ("joint", "alternate"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def _window_stack(snapshots, window, attr: str = "V") -> np.ndarray:
    lo, hi = window
    items = snapshots.items() if isinstance(snapshots, dict) else ((s.t, s) for s in snapshots)
    rows = [np.asarray(getattr(s, attr), dtype=float).reshape(-1) for t, s in sorted(items, key=lambda x: x[0])
            if lo <= t <= hi]
    return np.stack(rows) if rows else np.zeros((0, 0))


def regular_stat(snapshots, window, min_snapshots: int = 1) -> np.ndarray:
    """Mean of the nonzero snapshot speeds in the window per key; NaN where absent."""
    V = _window_stack(snapshots, window)
    if V.size == 0:
        return V.reshape(-1)
    n = (V > 0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        m = V.sum(axis=0) / n
    return np.where(n >= max(min_snapshots, 1), m, np.nan)


def rush_stat(snapshots, window, min_snapshots: int = 1) -> np.ndarray:
    """Minimum nonzero snapshot speed in the window per key; NaN where absent."""
    V = _window_stack(snapshots, window)
    if V.size == 0:
        return V.reshape(-1)
    n = (V > 0).sum(axis=0)
    m = np.where(V > 0, V, np.inf).min(axis=0)
    return np.where(n >= max(min_snapshots, 1), m, np.nan)


def tune_iteration(fd: FdField, sim_reg, sim_rush, real_reg, real_rush, cfg: TuningConfig | None = None,
                   dv: float | None = None, dn: float | None = None, mask=None, rush_mask=None) -> FdField:
    """One sign-rule update; keys lacking either side of a statistic are left alone."""
    cfg = cfg or TuningConfig()
    dv = cfg.dv if dv is None else dv
    dn = cfg.dn if dn is None else dn
    out = fd.copy()
    Vf = out.Vf.reshape(-1)
    Nc = out.Nc.reshape(-1)
    Nm = out.Nm.reshape(-1)
    sim_reg, real_reg = np.asarray(sim_reg, float), np.asarray(real_reg, float)
    sim_rush, real_rush = np.asarray(sim_rush, float), np.asarray(real_rush, float)
    allow = np.ones(len(Vf), dtype=bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    reg = allow & np.isfinite(sim_reg) & np.isfinite(real_reg)
    step = np.sign(real_reg - sim_reg, where=reg, out=np.zeros(len(Vf)))
    Vf[reg] = np.maximum(Vf[reg] + dv * step[reg], cfg.v_min)
    rush = allow & np.isfinite(sim_rush) & np.isfinite(real_rush)
    if rush_mask is not None:
        rush &= np.asarray(rush_mask, bool).reshape(-1)
    sgn = np.sign(real_rush - sim_rush, where=rush, out=np.zeros(len(Vf)))
    factor = 1.0 + dn * sgn
    scale = np.where(rush, factor, 1.0)
    # keep the N_c/N_m ratio when the floor bites
    scale = np.where(Nc * scale < cfg.nc_floor, cfg.nc_floor / Nc, scale)
    Nc *= scale
    Nm *= scale
    out._law = None
    return out


class DayRunner:
    """Callable that replays the historical demand through the stepper and returns its snapshots."""

    def __init__(self, grid: GridConfig, trips, chi: ChiProfile | None = None, cfg: SimConfig | None = None,
                 t_begin: float = 0.0, t_end: float = 15 * 3600.0):
        rs = RouteSet.coerce(trips)
        keep = np.flatnonzero((rs.n_steps > 0) & (rs.depart <= t_end))
        self.trips = rs.subset(keep)
        self.grid, self.chi, self.cfg = grid, chi or ChiProfile(), cfg or SimConfig()
        self.t_begin, self.t_end = t_begin, t_end

    def __call__(self, fd: FdField, chi: ChiProfile | None = None) -> dict:
        sim = Simulator(self.grid, fd, self.trips, chi or self.chi, self.cfg, t_start=self.t_begin)
        sim.run_until(self.t_end + self.cfg.dt / 2)
        return sim.snapshots


@dataclass
class CalibrationResult:
    fd: FdField
    chi: ChiProfile | None
    report: list = field(default_factory=list)      # (iter, mean_gap_kmh, cells_tuned)
    tuned: np.ndarray | None = None
    gap0: np.ndarray | None = None
    gap_final: np.ndarray | None = None
    best_iter: int = 0
    events: list = field(default_factory=list)


def _mean_drop(reg, rush, mask):
    ok = mask & np.isfinite(reg) & np.isfinite(rush)
    return float(np.mean(reg[ok] - rush[ok])) if ok.any() else 0.0


def calibrate(fd: FdField, real_snapshots, runner, cfg: TuningConfig | None = None,
              chi: ChiProfile | None = None) -> CalibrationResult:
    """Alternate simulate / compare / tune until the regular-hour gap is small or iterations run out.

    The field with the smallest mean gap seen is returned.
    """
    cfg = cfg or TuningConfig()
    real_reg = regular_stat(real_snapshots, cfg.regular, cfg.min_snapshots)
    real_rush = rush_stat(real_snapshots, cfg.rush, cfg.min_snapshots)
    if real_reg.size == 0 or not np.isfinite(real_reg).any():
        warnings.warn("no historical speeds in the regular window; parameters left unchanged")
        return CalibrationResult(fd.copy(), chi)
    mask = np.isfinite(real_reg)
    if cfg.min_occupancy > 0:
        Nreg = _window_stack(real_snapshots, cfg.regular, "N")
        mask &= Nreg.mean(axis=0) >= cfg.min_occupancy
    dv, dn, da = cfg.dv, cfg.dn, cfg.da
    cur, cur_chi = fd.copy(), chi
    res = CalibrationResult(cur, chi)
    best_gap, stall, prev_gap = np.inf, 0, np.inf
    tuned = None
    for it in range(cfg.max_iter + 1):
        snaps = runner(cur, cur_chi) if cur_chi is not None else runner(cur)
        sim_reg = regular_stat(snaps, cfg.regular, cfg.min_snapshots)
        sim_rush = rush_stat(snaps, cfg.rush, cfg.min_snapshots)
        if tuned is None:
            tuned = mask & np.isfinite(sim_reg)
            res.tuned = tuned
        gap_cells = np.abs(sim_reg - real_reg)
        ok = tuned & np.isfinite(gap_cells)
        gap = float(gap_cells[ok].mean()) if ok.any() else 0.0
        res.report.append((it, gap, int(tuned.sum())))
        log.info("calibration iter %d: mean gap %.3f km/h over %d keys", it, gap, int(tuned.sum()))
        if it == 0:
            res.gap0 = gap_cells
        if gap < best_gap:
            best_gap = gap
            res.fd, res.chi, res.best_iter, res.gap_final = cur, cur_chi, it, gap_cells
        if gap < cfg.tol or it == cfg.max_iter:
            break
        stall = stall + 1 if gap >= prev_gap else 0
        prev_gap = gap
        if stall >= cfg.patience:
            dv, dn, da = dv / 2, dn / 2, da / 2
            stall = 0
            res.events.append((it, "halved step sizes"))
        step_v, step_n = dv, dn
        if cfg.schedule == "alternate":
            step_v, step_n = (dv, 0.0) if it % 2 == 0 else (0.0, dn)
        settled = ~(gap_cells > cfg.rush_gate)
        cur = tune_iteration(cur, sim_reg, sim_rush, real_reg, real_rush, cfg, step_v, step_n, mask=tuned,
                             rush_mask=settled)
        if cfg.tune_chi and cur_chi is not None:
            drop_sim = _mean_drop(sim_reg, sim_rush, tuned)
            drop_real = _mean_drop(real_reg, real_rush, tuned)
            s = np.sign(drop_real - drop_sim)
            cur_chi = ChiProfile(cur_chi.t_am, cur_chi.t_pm, max(cur_chi.a_am + s * da, 0.0),
                                 max(cur_chi.a_pm + s * da, 0.0), cur_chi.sigma_am, cur_chi.sigma_pm)
    return res


REPORT_HEADER = ["iter", "mean_gap_kmh", "cells_tuned"]


def write_convergence(path: str | Path, report) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for it, gap, n in report:
            w.writerow([it, f"{gap:.6f}", n])
