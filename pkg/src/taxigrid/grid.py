"""Uniform cell lattice, the four travel directions and staircase rasterization.

Cells are addressed by ``(col, row)``; ``col`` grows to the east (Right) and
``row`` grows to the north (Up).  Per-(cell, direction) fields are stored as
arrays of shape ``(nx, ny, 4)``; :func:`flat_key` gives the matching index into
the raveled array.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

import numpy as np

EARTH_RADIUS_M = 6371008.8


class Direction(IntEnum):
    RIGHT = 0
    UP = 1
    LEFT = 2
    DOWN = 3

    @property
    def opposite(self) -> "Direction":
        return Direction((self + 2) % 4)

    @property
    def delta(self) -> tuple[int, int]:
        return _DELTAS[self]

    @property
    def letter(self) -> str:
        return "RULD"[self]

    @classmethod
    def from_letter(cls, s: str) -> "Direction":
        try:
            return cls("RULD".index(s.strip().upper()))
        except ValueError:
            raise ValueError(f"unknown direction letter {s!r}") from None


_DELTAS = {
    Direction.RIGHT: (1, 0),
    Direction.UP: (0, 1),
    Direction.LEFT: (-1, 0),
    Direction.DOWN: (0, -1),
}

# step direction lookup indexed by (dcol + 1, drow + 1)
_DIR_LOOKUP = np.full((3, 3), -1, dtype=np.int8)
for _d, (_dx, _dy) in _DELTAS.items():
    _DIR_LOOKUP[_dx + 1, _dy + 1] = int(_d)


class CellIndex(NamedTuple):
    col: int
    row: int


@dataclass(frozen=True)
class GridConfig:
    """Planar lattice of ``nx * ny`` square cells anchored at ``(origin_x, origin_y)``."""

    origin_x: float = -12800.0
    origin_y: float = -12800.0
    cell_size: float = 100.0
    nx: int = 256
    ny: int = 256

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("nx and ny must be >= 1")

    @classmethod
    def centered(cls, nx: int = 256, ny: int = 256, cell_size: float = 100.0) -> "GridConfig":
        """Grid whose centre sits on the planar origin (the projection anchor)."""
        return cls(-nx * cell_size / 2, -ny * cell_size / 2, cell_size, nx, ny)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, 4)

    @property
    def n_keys(self) -> int:
        return self.nx * self.ny * 4

    def contains(self, cell: CellIndex) -> bool:
        return 0 <= cell.col < self.nx and 0 <= cell.row < self.ny

    def center_of(self, cell: CellIndex) -> tuple[float, float]:
        return (self.origin_x + (cell.col + 0.5) * self.cell_size,
                self.origin_y + (cell.row + 0.5) * self.cell_size)


@dataclass(frozen=True)
class Projection:
    """Equirectangular projection about ``(lon0, lat0)``; fine at city scale."""

    lon0: float = 116.397
    lat0: float = 39.908

    def to_xy(self, lon, lat):
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        k = math.pi / 180.0 * EARTH_RADIUS_M
        return (lon - self.lon0) * k * math.cos(math.radians(self.lat0)), (lat - self.lat0) * k

    def to_lonlat(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        k = math.pi / 180.0 * EARTH_RADIUS_M
        return self.lon0 + x / (k * math.cos(math.radians(self.lat0))), self.lat0 + y / k


def cell_of_point(x: float, y: float, cfg: GridConfig) -> CellIndex | None:
    """Cell containing planar point ``(x, y)``, or ``None`` when it lies off the grid."""
    if not (math.isfinite(x) and math.isfinite(y)):
        return None
    col = math.floor((x - cfg.origin_x) / cfg.cell_size)
    row = math.floor((y - cfg.origin_y) / cfg.cell_size)
    if 0 <= col < cfg.nx and 0 <= row < cfg.ny:
        return CellIndex(col, row)
    return None


def cells_of_points(x, y, cfg: GridConfig):
    """Vectorised :func:`cell_of_point`: returns ``(cols, rows, inside)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    with np.errstate(invalid="ignore"):
        fc = np.floor((x - cfg.origin_x) / cfg.cell_size)
        fr = np.floor((y - cfg.origin_y) / cfg.cell_size)
        inside = (np.isfinite(fc) & np.isfinite(fr)
                  & (fc >= 0) & (fc < cfg.nx) & (fr >= 0) & (fr < cfg.ny))
    cols = np.where(inside, fc, -1).astype(np.int64)
    rows = np.where(inside, fr, -1).astype(np.int64)
    return cols, rows, inside


def direction_between(a: CellIndex, b: CellIndex) -> Direction:
    dx, dy = b[0] - a[0], b[1] - a[1]
    if abs(dx) + abs(dy) != 1:
        raise ValueError(f"cells {tuple(a)} and {tuple(b)} are not 4-adjacent")
    return Direction(int(_DIR_LOOKUP[dx + 1, dy + 1]))


def _staircase(a: CellIndex, b: CellIndex) -> list[tuple[CellIndex, Direction]]:
    dx, dy = b[0] - a[0], b[1] - a[1]
    h = Direction.RIGHT if dx > 0 else Direction.LEFT
    v = Direction.UP if dy > 0 else Direction.DOWN
    nh, nv = abs(dx), abs(dy)
    pairs = min(nh, nv)
    moves = [h, v] * pairs + [h] * (nh - pairs) + [v] * (nv - pairs)
    out = []
    c, r = a
    for d in moves:
        ddx, ddy = _DELTAS[d]
        c += ddx
        r += ddy
        out.append((CellIndex(c, r), d))
    return out


def rasterize_segment(a: CellIndex, b: CellIndex) -> list[tuple[CellIndex, Direction]]:
    """4-connected staircase from ``a`` to ``b``.

    Each element is ``(cell entered, direction of the move)``, so the result
    has ``|dcol| + |drow|`` entries and ``a`` itself is implied.  Moves
    alternate horizontal/vertical starting horizontally, leftovers at the end.
    The pattern is laid out from the lexicographically smaller endpoint and
    reversed for the opposite orientation, which keeps ``a -> b`` and
    ``b -> a`` on the same cells.
    """
    a = CellIndex(*a)
    b = CellIndex(*b)
    if a == b:
        return []
    if a <= b:
        return _staircase(a, b)
    fwd = _staircase(b, a)
    cells = [b] + [c for c, _ in fwd]
    cells.reverse()
    return [(cells[i + 1], fwd[len(fwd) - 1 - i][1].opposite) for i in range(len(fwd))]


def path_cells(start: CellIndex, steps: list[tuple[CellIndex, Direction]]) -> list[CellIndex]:
    return [CellIndex(*start)] + [c for c, _ in steps]


def deltas_to_directions(d: np.ndarray) -> np.ndarray:
    """Directions of unit moves given as ``(M, 2)`` (dcol, drow); raises on gaps."""
    d = np.asarray(d, dtype=np.int64).reshape(-1, 2)
    if len(d) and np.any(np.abs(d).sum(axis=1) != 1):
        raise ValueError("cell path is not 4-connected")
    return _DIR_LOOKUP[d[:, 0] + 1, d[:, 1] + 1]


def step_directions(cells: np.ndarray) -> np.ndarray:
    """Direction of each move along an ``(K+1, 2)`` cell path."""
    cells = np.asarray(cells)
    if len(cells) < 2:
        return np.zeros(0, dtype=np.int8)
    return deltas_to_directions(np.diff(cells, axis=0))


def flat_key(cols, rows, dirs, cfg: GridConfig):
    """Index into a raveled ``(nx, ny, 4)`` field."""
    return (np.asarray(cols, dtype=np.int64) * cfg.ny + np.asarray(rows, dtype=np.int64)) * 4 + np.asarray(dirs, dtype=np.int64)


def unflat_key(keys, cfg: GridConfig):
    keys = np.asarray(keys, dtype=np.int64)
    d = keys % 4
    cr = keys // 4
    return cr // cfg.ny, cr % cfg.ny, d
