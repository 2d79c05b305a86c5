"""Coarse-grained fundamental diagrams fitted per (cell, direction).

The speed law is flat at the free-flow speed up to the effective capacity and
hyperbolic beyond it, passing through ``(N_c, V_f)`` and ``(N_m, V_s)``::

    V(N) = V_f                                                 N <= N_c
    V(N) = V_f V_s (N_m - N_c) / ((V_f - V_s) N - (V_f N_c - V_s N_m))   N > N_c
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .estimation import SampleArchive
from .grid import Direction, GridConfig, unflat_key

DEFAULT_VF = 20.0
DEFAULT_VS = 5.0
DEFAULT_NC = 1.0
DEFAULT_NM = 0.5
DEFAULT_V_MIN = 1.0
MIN_SAMPLES = 50


@dataclass(frozen=True)
class FdParams:
    Vf: float = DEFAULT_VF
    Vs: float = DEFAULT_VS
    Nc: float = DEFAULT_NC
    Nm: float = DEFAULT_NM
    fitted: bool = False

    @property
    def has_congested_branch(self) -> bool:
        return self.Nm > self.Nc and self.Vf > self.Vs


class InsufficientData(Exception):
    pass


@dataclass
class FitConfig:
    outlier_frac: float = 0.05
    top_frac: float = 0.20
    left_frac: float = 0.20
    min_samples: int = MIN_SAMPLES


def select_pq(N, flux, cfg: FitConfig | None = None, order_key=None):
    """Locate the free-flow anchor P and congested anchor Q of a flux-occupancy cloud.

    Returns ``((P_N, P_flux), (Q_N, Q_flux))``; raises :class:`InsufficientData`.
    ``order_key`` (e.g. window index) breaks ties after flux and N.
    """
    cfg = cfg or FitConfig()
    N = np.asarray(N, dtype=float)
    flux = np.asarray(flux, dtype=float)
    n = len(N)
    if n < max(cfg.min_samples, 1):
        raise InsufficientData(f"{n} samples < {cfg.min_samples}")
    idx = np.arange(n) if order_key is None else np.asarray(order_key)
    # descending flux, then descending N, then ascending window index
    by_flux = np.lexsort((idx, -N, -flux))
    n_drop = math.ceil(cfg.outlier_frac * n)
    survivors = by_flux[n_drop:]
    if len(survivors) == 0:
        raise InsufficientData("no samples left after outlier removal")
    top = survivors[:math.ceil(cfg.top_frac * len(survivors))]
    left = top[np.lexsort((idx[top], -flux[top], N[top]))]
    green = left[:math.ceil(cfg.left_frac * len(top))]
    blue = survivors[N[survivors] > N[green].max()]
    if len(blue) == 0:
        raise InsufficientData("no samples to the right of the free-flow group")
    P = (float(N[green].mean()), float(flux[green].mean()))
    Q = (float(N[blue].mean()), float(flux[blue].mean()))
    if P[0] <= 0 or Q[0] <= 0:
        raise InsufficientData("anchor at zero occupancy")
    return P, Q


def fit_cell(N, flux, cfg: FitConfig | None = None, order_key=None) -> FdParams:
    try:
        P, Q = select_pq(N, flux, cfg, order_key)
    except InsufficientData:
        return FdParams()
    Vf = P[1] / P[0]
    Vs = Q[1] / Q[0]
    if not (Vf > 0 and Vs > 0):
        return FdParams()
    return FdParams(Vf, Vs, P[0], Q[0], True)


def eval_vn(params: FdParams, N: float, v_min: float = DEFAULT_V_MIN) -> float:
    Vf, Vs, Nc, Nm = params.Vf, params.Vs, params.Nc, params.Nm
    if N <= Nc:
        v = Vf
    elif params.has_congested_branch:
        v = Vf * Vs * (Nm - Nc) / ((Vf - Vs) * N - (Vf * Nc - Vs * Nm))
    else:
        v = Vs
    return max(v, v_min)


class FdField:
    """Complete per-(cell, direction) parameter set on a grid; arrays are ``(nx, ny, 4)``."""

    def __init__(self, cfg: GridConfig, Vf, Vs, Nc, Nm, fitted):
        self.cfg = cfg
        self.Vf = np.asarray(Vf, dtype=float).reshape(cfg.shape)
        self.Vs = np.asarray(Vs, dtype=float).reshape(cfg.shape)
        self.Nc = np.asarray(Nc, dtype=float).reshape(cfg.shape)
        self.Nm = np.asarray(Nm, dtype=float).reshape(cfg.shape)
        self.fitted = np.asarray(fitted, dtype=bool).reshape(cfg.shape)
        self._law = None

    @classmethod
    def default(cls, cfg: GridConfig) -> "FdField":
        ones = np.ones(cfg.shape)
        return cls(cfg, DEFAULT_VF * ones, DEFAULT_VS * ones, DEFAULT_NC * ones,
                   DEFAULT_NM * ones, np.zeros(cfg.shape, dtype=bool))

    def copy(self) -> "FdField":
        return FdField(self.cfg, self.Vf.copy(), self.Vs.copy(), self.Nc.copy(),
                       self.Nm.copy(), self.fitted.copy())

    def params(self, col: int, row: int, d: int) -> FdParams:
        return FdParams(float(self.Vf[col, row, d]), float(self.Vs[col, row, d]),
                        float(self.Nc[col, row, d]), float(self.Nm[col, row, d]),
                        bool(self.fitted[col, row, d]))

    def set(self, col: int, row: int, d: int, p: FdParams) -> None:
        self.Vf[col, row, d], self.Vs[col, row, d] = p.Vf, p.Vs
        self.Nc[col, row, d], self.Nm[col, row, d] = p.Nc, p.Nm
        self.fitted[col, row, d] = p.fitted
        self._law = None

    @property
    def n_fitted(self) -> int:
        return int(self.fitted.sum())

    def _coefficients(self):
        if self._law is None:
            vf, vs, nc, nm = (a.reshape(-1) for a in (self.Vf, self.Vs, self.Nc, self.Nm))
            hyper = (nm > nc) & (vf > vs)
            denom = np.where(hyper, vf - vs, 1.0)
            a = np.where(hyper, vf * vs * (nm - nc), 0.0)
            b = np.where(hyper, vf * nc - vs * nm, 0.0)
            self._law = (vf, vs, nc, hyper, a, denom, b)
        return self._law

    def speed(self, N, v_min: float = DEFAULT_V_MIN) -> np.ndarray:
        """Vectorised speed law over a raveled occupancy field."""
        vf, vs, nc, hyper, a, denom, b = self._coefficients()
        N = np.asarray(N, dtype=float).reshape(-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            congested = np.where(hyper, a / (denom * N - b), vs)
        v = np.where(N <= nc, vf, congested)
        return np.maximum(v, v_min)


def fit_field(archive: SampleArchive, cfg: GridConfig, fit_cfg: FitConfig | None = None):
    """Fit every key with samples; all others keep defaults.  Returns ``(field, report)``."""
    fit_cfg = fit_cfg or FitConfig()
    fd = FdField.default(cfg)
    tried = 0
    for key, N, flux, t in archive.grouped():
        if len(N) < fit_cfg.min_samples:
            continue
        tried += 1
        p = fit_cell(N, flux, fit_cfg, order_key=t)
        if p.fitted:
            c, r, d = (int(x) for x in unflat_key(key, cfg))
            fd.set(c, r, d, p)
    report = {"keys": cfg.n_keys, "fitted": fd.n_fitted, "default": cfg.n_keys - fd.n_fitted,
              "attempted": tried}
    return fd, report


# --- artifacts -------------------------------------------------------------

FD_HEADER = ["col", "row", "dir", "Vf", "Vs", "Nc", "Nm", "fitted"]


def write_fd(path: str | Path, fd: FdField) -> None:
    cfg = fd.cfg
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FD_HEADER)
        for c in range(cfg.nx):
            for r in range(cfg.ny):
                for d in range(4):
                    w.writerow([c, r, "RULD"[d], f"{fd.Vf[c, r, d]:.10g}", f"{fd.Vs[c, r, d]:.10g}",
                                f"{fd.Nc[c, r, d]:.10g}", f"{fd.Nm[c, r, d]:.10g}", int(fd.fitted[c, r, d])])


def read_fd(path: str | Path, cfg: GridConfig) -> FdField:
    fd = FdField.default(cfg)
    seen = np.zeros(cfg.shape, dtype=bool)
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != FD_HEADER:
            raise ValueError(f"{path}: expected header {FD_HEADER}, got {header}")
        for lineno, row in enumerate(rd, 2):
            try:
                c, r, d = int(row[0]), int(row[1]), int(Direction.from_letter(row[2]))
                p = FdParams(float(row[3]), float(row[4]), float(row[5]), float(row[6]), row[7] == "1")
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if not (0 <= c < cfg.nx and 0 <= r < cfg.ny):
                raise ValueError(f"{path}:{lineno}: cell ({c},{r}) outside grid")
            fd.set(c, r, d, p)
            seen[c, r, d] = True
    if not seen.all():
        raise ValueError(f"{path}: field incomplete ({int((~seen).sum())} keys missing)")
    return fd


def write_scatter(path: str | Path, archive: SampleArchive, fd: FdField, keys, n_curve: int = 100) -> None:
    """Per-key flux-occupancy points plus the fitted curve at ``n_curve`` occupancies."""
    cfg = fd.cfg
    wanted = set(int(k) for k in keys)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["col", "row", "dir", "kind", "N", "flux"])
        for key, N, flux, _ in archive.grouped():
            if key not in wanted:
                continue
            c, r, d = (int(x) for x in unflat_key(key, cfg))
            for n, f in zip(N, flux):
                w.writerow([c, r, "RULD"[d], "sample", f"{n:.6g}", f"{f:.6g}"])
            p = fd.params(c, r, d)
            hi = max(float(N.max()), p.Nm, p.Nc) * 1.1
            for n in np.linspace(0.0, hi, n_curve):
                w.writerow([c, r, "RULD"[d], "curve", f"{n:.6g}", f"{n * eval_vn(p, n):.6g}"])
