"""Road-segment scoring, the persistence baseline and travel-time estimates."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .estimation import KMH_PER_MPS
from .grid import CellIndex, Direction, GridConfig, flat_key, step_directions

SEGMENT_CELLS = 10


@dataclass(frozen=True)
class RoadSegment:
    """Ten consecutive cells traversed in one direction (1 km at 100 m cells)."""

    cells: tuple
    direction: Direction
    label: str = ""

    def __post_init__(self):
        cells = tuple(CellIndex(*c) for c in self.cells)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "direction", Direction(self.direction))
        if len(cells) != SEGMENT_CELLS:
            raise ValueError(f"a road segment has {SEGMENT_CELLS} cells, got {len(cells)}")
        dx, dy = self.direction.delta
        for a, b in zip(cells[:-1], cells[1:]):
            if (b.col - a.col, b.row - a.row) != (dx, dy):
                raise ValueError("segment cells must be consecutive along its direction")

    @classmethod
    def starting_at(cls, start, direction: Direction, label: str = "") -> "RoadSegment":
        dx, dy = Direction(direction).delta
        cells = tuple(CellIndex(start[0] + i * dx, start[1] + i * dy) for i in range(SEGMENT_CELLS))
        return cls(cells, direction, label or f"{start[0]}_{start[1]}_{Direction(direction).letter}")

    def keys(self, grid: GridConfig) -> np.ndarray:
        c = np.array(self.cells)
        return flat_key(c[:, 0], c[:, 1], np.full(len(c), int(self.direction)), grid)


def central_segments(grid: GridConfig, lo: int | None = None, hi: int | None = None,
                     stride: int = SEGMENT_CELLS) -> list[RoadSegment]:
    """Segments in all four directions that start on the central row or central column.

    ``lo``/``hi`` bound the cells segments may cover (default: whole grid).
    """
    cr, cc = grid.ny // 2, grid.nx // 2
    out = []
    lo_x = 0 if lo is None else lo
    hi_x = grid.nx - 1 if hi is None else hi
    lo_y = 0 if lo is None else lo
    hi_y = grid.ny - 1 if hi is None else hi
    n = SEGMENT_CELLS
    for s in range(lo_x, hi_x - n + 2, stride):
        out.append(RoadSegment.starting_at((s, cr), Direction.RIGHT))
        out.append(RoadSegment.starting_at((hi_x - (s - lo_x), cr), Direction.LEFT))
    for s in range(lo_y, hi_y - n + 2, stride):
        out.append(RoadSegment.starting_at((cc, s), Direction.UP))
        out.append(RoadSegment.starting_at((cc, hi_y - (s - lo_y)), Direction.DOWN))
    return out


def segment_speed(field, seg: RoadSegment, grid: GridConfig) -> float:
    """Mean directional speed over the segment's cells with data; NaN if none has data."""
    V = np.asarray(field, dtype=float).reshape(-1)[seg.keys(grid)]
    V = V[V > 0]
    return float(V.mean()) if len(V) else math.nan


def segment_series(frames, segs, grid: GridConfig) -> np.ndarray:
    """``(n_segments, n_frames)`` segment speeds for a sequence of V fields."""
    keys = np.stack([s.keys(grid) for s in segs])
    out = np.full((len(segs), len(frames)), np.nan)
    for j, F in enumerate(frames):
        V = np.asarray(F, dtype=float).reshape(-1)[keys]
        n = (V > 0).sum(axis=1)
        with np.errstate(invalid="ignore"):
            out[:, j] = np.where(n > 0, np.where(V > 0, V, 0).sum(axis=1) / np.maximum(n, 1), np.nan)
    return out


def _pairs(pred, real):
    pred = np.asarray(pred, dtype=float)
    real = np.asarray(real, dtype=float)
    ok = np.isfinite(pred) & np.isfinite(real)
    return pred[ok], real[ok]


def rmse(pred, real) -> float:
    p, r = _pairs(pred, real)
    if len(p) == 0:
        raise ValueError("no scored pairs")
    return float(np.sqrt(np.mean((r - p) ** 2)))


def accuracy(pred, real) -> tuple[float, int]:
    """``1 - MAPE`` over pairs with positive truth; returns ``(accuracy, zero-truth pairs dropped)``."""
    p, r = _pairs(pred, real)
    zero = r <= 0
    p, r = p[~zero], r[~zero]
    if len(p) == 0:
        raise ValueError("no scored pairs")
    return float(1.0 - np.mean(np.abs(r - p) / r)), int(zero.sum())


@dataclass
class Score:
    method: str
    rmse_kmh: float
    accuracy: float
    n_segments: int
    dropped_zero: int = 0


def score_segments(pred: np.ndarray, real: np.ndarray, method: str = "model") -> Score:
    """Per-segment RMSE and accuracy over time, then the unweighted mean across segments."""
    rm, ac, dropped = [], [], 0
    for p, r in zip(np.atleast_2d(pred), np.atleast_2d(real)):
        try:
            e = rmse(p, r)
            a, d = accuracy(p, r)
        except ValueError:
            continue
        rm.append(e)
        ac.append(a)
        dropped += d
    if not rm:
        raise ValueError("no segment has scored pairs")
    return Score(method, float(np.mean(rm)), float(np.mean(ac)), len(rm), dropped)


def extrapolation_baseline(real_at_origin):
    """Persistence: the prediction for ``t0 + lead`` is the value observed at ``t0``."""
    return np.array(real_at_origin, dtype=float, copy=True)


def travel_time(cells, depart: float, frame_times, frames, grid: GridConfig, v_min: float = 1.0):
    """Predicted duration of a cell path driven through piecewise-constant speed frames.

    ``frames[j]`` (an ``(nx, ny, 4)`` field) holds from ``frame_times[j]``
    until the next frame; before the first frame the first applies, past the
    last the last.  Returns ``(seconds, used_floor)`` where ``used_floor``
    flags a zero speed replaced by ``v_min``.
    """
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    if len(cells) < 2:
        return 0.0, False
    times = np.asarray(frame_times, dtype=float)
    dirs = step_directions(cells)
    keys = flat_key(cells[:-1, 0], cells[:-1, 1], dirs, grid)
    speeds = np.stack([np.asarray(F, dtype=float).reshape(-1)[keys] for F in frames])  # (n_frames, K)
    floored = bool((speeds <= 0).any())
    speeds = np.maximum(speeds, v_min) / KMH_PER_MPS
    t = float(depart)
    j = max(int(np.searchsorted(times, t, side="right")) - 1, 0)
    cs = grid.cell_size
    for k in range(len(keys)):
        left = cs
        while True:
            v = speeds[j, k]
            nxt = times[j + 1] if j + 1 < len(times) else math.inf
            need = left / v
            if t + need <= nxt:
                t += need
                break
            left -= v * (nxt - t)
            t = nxt
            j += 1
    return t - float(depart), floored


def relative_errors(pred, real) -> np.ndarray:
    pred = np.asarray(pred, dtype=float)
    real = np.asarray(real, dtype=float)
    return (pred - real) / real


def error_histogram(errors, bins: int = 20, lo: float = -1.0, hi: float = 1.0):
    """Counts per uniform bin on ``[lo, hi)`` plus underflow and overflow bins (last bin closed at ``hi``)."""
    e = np.asarray(errors, dtype=float)
    e = e[np.isfinite(e)]
    edges = np.linspace(lo, hi, bins + 1)
    inner = np.histogram(e[(e >= lo) & (e <= hi)], bins=edges)[0]
    rows = [(-math.inf, lo, int((e < lo).sum()))]
    rows += [(float(a), float(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], inner)]
    rows.append((hi, math.inf, int((e > hi).sum())))
    return rows


# --- artifacts -------------------------------------------------------------

REPORT_HEADER = ["method", "rmse_kmh", "accuracy"]
HISTOGRAM_HEADER = ["bin_lo", "bin_hi", "count"]
SERIES_HEADER = ["segment", "t_s", "method", "V_kmh"]


def write_report(path: str | Path, scores) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for s in scores:
            w.writerow([s.method, f"{s.rmse_kmh:.4f}", f"{s.accuracy:.4f}"])


def read_report(path: str | Path) -> list[Score]:
    out = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != REPORT_HEADER:
            raise ValueError(f"{path}: expected header {REPORT_HEADER}, got {header}")
        for lineno, row in enumerate(rd, 2):
            try:
                out.append(Score(row[0], float(row[1]), float(row[2]), 0))
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_histogram(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTOGRAM_HEADER)
        for a, b, c in rows:
            w.writerow([f"{a:g}", f"{b:g}", c])


def write_series(path: str | Path, segs, times, series_by_method: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SERIES_HEADER)
        for i, seg in enumerate(segs):
            for method, S in series_by_method.items():
                for t, v in zip(times, S[i]):
                    w.writerow([seg.label, f"{t:g}", method, "" if not np.isfinite(v) else f"{v:.4f}"])
