"""Continuous routes: cell paths with a cell-entry timestamp per cell.

A route with ``K`` moves has ``K + 1`` cells.  ``entries[0]`` is the
departure; ``entries[i]`` is when the vehicle enters ``cells[i]``; the last
entry is the arrival.  While ``entries[i] <= t < entries[i + 1]`` the vehicle
is in ``cells[i]`` heading in the direction of move ``i``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .grid import GridConfig, deltas_to_directions, flat_key, step_directions


@dataclass
class ContinuousRoute:
    taxi_id: str
    cells: np.ndarray          # (K+1, 2) int
    entries: np.ndarray        # (K+1,) seconds
    day: str | None = None

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, 2)
        self.entries = np.asarray(self.entries, dtype=float).reshape(-1)
        if len(self.cells) != len(self.entries) or len(self.cells) == 0:
            raise ValueError("cells and entries must be non-empty and equally long")

    @property
    def depart_s(self) -> float:
        return float(self.entries[0])

    @property
    def arrive_s(self) -> float:
        return float(self.entries[-1])

    @property
    def n_steps(self) -> int:
        return len(self.cells) - 1

    @property
    def is_degenerate(self) -> bool:
        return self.n_steps == 0

    @property
    def directions(self) -> np.ndarray:
        return step_directions(self.cells)

    def length_m(self, cell_size: float = 100.0) -> float:
        return self.n_steps * cell_size

    def to_json(self) -> dict:
        d = {
            "taxi_id": self.taxi_id,
            "depart_s": self.depart_s,
            "cells": self.cells.tolist(),
            "entries_s": [round(float(e), 3) for e in self.entries],
        }
        if self.day is not None:
            d["day"] = self.day
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ContinuousRoute":
        return cls(str(d["taxi_id"]), d["cells"], d["entries_s"], d.get("day"))


@dataclass
class RouteSet:
    """Columnar store of many routes (concatenated cells/entries with offsets)."""

    taxi_ids: list
    offsets: np.ndarray        # (n+1,) into cells/entries
    cells: np.ndarray          # (total, 2)
    entries: np.ndarray        # (total,)
    days: list | None = None

    def __len__(self) -> int:
        return len(self.offsets) - 1

    def __getitem__(self, i: int) -> ContinuousRoute:
        a, b = self.offsets[i], self.offsets[i + 1]
        return ContinuousRoute(self.taxi_ids[i], self.cells[a:b].copy(), self.entries[a:b].copy(),
                               None if self.days is None else self.days[i])

    def __iter__(self) -> Iterator[ContinuousRoute]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def empty(cls) -> "RouteSet":
        return cls([], np.zeros(1, dtype=np.int64), np.zeros((0, 2), dtype=np.int64), np.zeros(0))

    @classmethod
    def from_routes(cls, routes: Iterable[ContinuousRoute]) -> "RouteSet":
        routes = list(routes)
        if not routes:
            return cls.empty()
        lens = np.array([len(r.cells) for r in routes], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(lens)])
        days = [r.day for r in routes]
        return cls([r.taxi_id for r in routes], offsets,
                   np.concatenate([r.cells for r in routes]).astype(np.int64),
                   np.concatenate([r.entries for r in routes]).astype(float),
                   None if all(d is None for d in days) else days)

    @classmethod
    def coerce(cls, routes) -> "RouteSet":
        if isinstance(routes, RouteSet):
            return routes
        return cls.from_routes(routes)

    @property
    def lengths(self) -> np.ndarray:
        """Number of cells per route (moves + 1)."""
        return np.diff(self.offsets)

    @property
    def n_steps(self) -> np.ndarray:
        return self.lengths - 1

    @property
    def depart(self) -> np.ndarray:
        return self.entries[self.offsets[:-1]]

    @property
    def arrive(self) -> np.ndarray:
        return self.entries[self.offsets[1:] - 1]

    def subset(self, idx) -> "RouteSet":
        idx = np.asarray(idx, dtype=np.int64)
        lens = self.lengths[idx]
        offsets = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
        gather = _ranges(self.offsets[idx], lens)
        days = None if self.days is None else [self.days[i] for i in idx]
        return RouteSet([self.taxi_ids[i] for i in idx], offsets,
                        self.cells[gather], self.entries[gather], days)

    def step_table(self, cfg: GridConfig):
        """Every move of every route as flat arrays.

        Returns ``(route, step, key, t_in, t_out)`` where ``key`` is the
        ``(cell, direction)`` field index of the cell being traversed and
        ``[t_in, t_out)`` is the traversal interval.
        """
        n = len(self)
        lens = self.lengths
        ks = lens - 1
        last = self.offsets[1:] - 1
        mask = np.ones(len(self.cells), dtype=bool)
        mask[last] = False
        pos = np.flatnonzero(mask)
        route = np.repeat(np.arange(n, dtype=np.int64), ks)
        step = pos - self.offsets[:-1][route]
        d = self.cells[pos + 1] - self.cells[pos]
        dirs = deltas_to_directions(d)
        key = flat_key(self.cells[pos, 0], self.cells[pos, 1], dirs, cfg)
        return route, step, key, self.entries[pos], self.entries[pos + 1]


def _ranges(starts: np.ndarray, lens: np.ndarray) -> np.ndarray:
    """Concatenation of ``arange(s, s + l)`` for each pair."""
    lens = np.asarray(lens, dtype=np.int64)
    total = int(lens.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    rep = np.repeat(np.asarray(starts, dtype=np.int64) - np.concatenate([[0], np.cumsum(lens)[:-1]]), lens)
    return rep + np.arange(total, dtype=np.int64)


def write_routes(path: str | Path, routes: Iterable[ContinuousRoute]) -> int:
    n = 0
    with open(path, "w") as fh:
        for r in routes:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")
            n += 1
    return n


def read_routes(path: str | Path) -> RouteSet:
    routes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                routes.append(ContinuousRoute.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad route record ({exc})") from exc
    return RouteSet.from_routes(routes)
