import time

import numpy as np
import pytest

from taxigrid.estimation import window_samples
from taxigrid.fd import fit_field
from taxigrid.forecast import History
from taxigrid.grid import GridConfig
from taxigrid.oracle import DemandProfile, Surge, generate_city, run_oracle

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def grid8():
    return GridConfig(0.0, 0.0, 100.0, 8, 8)


class OracleDay:
    """One synthetic day on the 64x64 city with two corridor surges, plus the fit from its routes."""

    def __init__(self):
        t = time.perf_counter()
        self.demand = DemandProfile(surges=[Surge(10.5 * 3600, 20, 60, 0), Surge(15 * 3600, 20, 60, 10)])
        self.city = generate_city(0, demand=self.demand)
        self.run = run_oracle(self.city, 1)
        self.archive = window_samples(self.run.routes, self.city.grid, 0.0, 86400.0)
        self.fd, self.fit_report = fit_field(self.archive, self.city.grid)
        self.build_s = time.perf_counter() - t
        self._history = None
        self.history_s = 0.0

    @property
    def grid(self):
        return self.city.grid

    @property
    def history(self) -> History:
        if self._history is None:
            t = time.perf_counter()
            self._history = History(self.run.routes, self.grid)
            self.history_s = time.perf_counter() - t
        return self._history


@pytest.fixture(scope="session")
def oracle_day():
    return OracleDay()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
