"""Shared pipeline configuration: one JSON file, one section per stage, one global seed.

Unknown keys and wrongly typed values raise :class:`ConfigError` naming the
dotted path of the offending field, e.g. ``fit.top_frac``.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .calibration import TuningConfig
from .fd import FitConfig
from .grid import GridConfig, Projection
from .ingest import IngestConfig
from .oracle import DemandProfile, EmissionConfig, Scenario, Surge
from .simulator import ChiProfile, SimConfig


class ConfigError(ValueError):
    """Malformed configuration; ``path`` is the dotted field path."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path or '<root>'}: {msg}")
        self.path = path


@dataclass
class GridSection:
    nx: int = 64
    ny: int = 64
    cell_size: float = 100.0
    lon0: float = 116.397
    lat0: float = 39.908

    def grid(self) -> GridConfig:
        return GridConfig.centered(self.nx, self.ny, self.cell_size)

    def projection(self) -> Projection:
        return Projection(self.lon0, self.lat0)


@dataclass
class SynthSection:
    corridors: int = 20
    block: typing.Optional[int] = None
    t_begin: float = 0.0
    t_end: float = 86400.0
    demand: dict = field(default_factory=dict)
    chi: dict = field(default_factory=lambda: {"a_am": 0.4, "a_pm": 0.4})
    emission: dict = field(default_factory=dict)


@dataclass
class IngestSection:
    utc_offset_s: float = 8 * 3600.0
    max_jump_m: float = 10_000.0
    max_gap_s: float = 300.0
    split_on_status: bool = True


@dataclass
class EstimateSection:
    t_begin: float = 0.0
    t_end: float = 86400.0
    snapshot_every: float = 600.0


@dataclass
class FitSection:
    outlier_frac: float = 0.05
    top_frac: float = 0.20
    left_frac: float = 0.20
    min_samples: int = 50
    scatter_keys: int = 5


@dataclass
class ChiSection:
    t_am: float = 7 * 3600.0
    t_pm: float = 17.5 * 3600.0
    a_am: float = 0.5
    a_pm: float = 0.5
    sigma_am: float = 60.0
    sigma_pm: float = 60.0


@dataclass
class SimulationSection:
    dt: float = 60.0
    lam: float = 0.5
    omega: float = 0.5
    sigma_eta: float = 2.0
    v_min: float = 1.0
    v_cap: float = 120.0
    window: int = 10
    snapshot_every: float = 600.0
    chi: ChiSection = field(default_factory=ChiSection)


@dataclass
class CalibrateSection:
    t_begin: float = 0.0
    t_end: float = 15 * 3600.0
    regular: list = field(default_factory=lambda: [12 * 3600.0, 15 * 3600.0])
    rush: list = field(default_factory=lambda: [7 * 3600.0, 9 * 3600.0])
    dv: float = 0.5
    dn: float = 0.05
    max_iter: int = 20
    tol: float = 1.0
    patience: int = 3
    min_snapshots: int = 1
    min_occupancy: float = 0.0
    rush_gate: float = 1.0
    tune_chi: bool = False
    da: float = 0.05


@dataclass
class ForecastSection:
    t_begin: float = 5 * 3600.0
    t_end: float = 20 * 3600.0
    every: float = 600.0
    horizon: float = 3600.0
    params: str = "auto"          # "auto" (calibrated when present), "fit", "calibrate"
    compare_default: bool = True


@dataclass
class EvaluateSection:
    lead_min: int = 60
    segment_lo: typing.Optional[int] = None
    segment_hi: typing.Optional[int] = None
    tt_min_s: float = 1200.0
    tt_max_s: float = 1800.0
    tt_max_trips: int = 2000


@dataclass
class Config:
    seed: int = 0
    grid: GridSection = field(default_factory=GridSection)
    synth: SynthSection = field(default_factory=SynthSection)
    ingest: IngestSection = field(default_factory=IngestSection)
    estimate: EstimateSection = field(default_factory=EstimateSection)
    fit: FitSection = field(default_factory=FitSection)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    calibrate: CalibrateSection = field(default_factory=CalibrateSection)
    forecast: ForecastSection = field(default_factory=ForecastSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    # --- builders for the library objects --------------------------------

    def scenario(self) -> Scenario:
        s = self.synth
        return Scenario(seed=self.seed, run_seed=self.seed + 1, emission_seed=self.seed + 2,
                        nx=self.grid.nx, ny=self.grid.ny, corridors=s.corridors, block=s.block,
                        t_begin=s.t_begin, t_end=s.t_end, demand=dict(s.demand), chi=dict(s.chi),
                        emission=dict(s.emission))

    def ingest_config(self) -> IngestConfig:
        i = self.ingest
        return IngestConfig(self.grid.grid(), self.grid.projection(), i.utc_offset_s, i.max_jump_m,
                            i.max_gap_s, i.split_on_status)

    def fit_config(self) -> FitConfig:
        f = self.fit
        return FitConfig(f.outlier_frac, f.top_frac, f.left_frac, f.min_samples)

    def chi(self) -> ChiProfile:
        return ChiProfile(**dataclasses.asdict(self.simulation.chi))

    def sim_config(self) -> SimConfig:
        s = self.simulation
        return SimConfig(s.dt, s.lam, s.omega, s.sigma_eta, s.v_min, s.v_cap, s.window, s.snapshot_every,
                         self.seed)

    def tuning_config(self) -> TuningConfig:
        c = self.calibrate
        return TuningConfig(tuple(c.regular), tuple(c.rush), c.dv, c.dn, c.max_iter, c.tol, c.patience,
                            self.simulation.v_min, min_snapshots=c.min_snapshots, min_occupancy=c.min_occupancy,
                            tune_chi=c.tune_chi, da=c.da, rush_gate=c.rush_gate)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


# --- schema checking -------------------------------------------------------

def _check_value(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _check_value(args[0], value, path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if tp is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return value
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {value!r}")
        return value
    return value


def _build(cls, data, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown field")
    kw = {}
    for k, v in data.items():
        kw[k] = _check_value(hints[k], v, f"{path}.{k}" if path else k)
    return cls(**kw)


def _validate(cfg: Config) -> None:
    """Semantic checks that need the library constructors."""
    try:
        cfg.grid.grid()
    except ValueError as exc:
        raise ConfigError("grid", str(exc)) from None
    dem = dict(cfg.synth.demand)
    surges = dem.pop("surges", [])
    try:
        DemandProfile(**dem)
    except TypeError as exc:
        raise ConfigError("synth.demand", str(exc)) from None
    for i, s in enumerate(surges):
        try:
            Surge(**s)
        except TypeError as exc:
            raise ConfigError(f"synth.demand.surges[{i}]", str(exc)) from None
    for name, ctor in (("chi", ChiProfile), ("emission", EmissionConfig)):
        try:
            ctor(**getattr(cfg.synth, name))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"synth.{name}", str(exc)) from None
    try:
        cfg.sim_config()
    except ValueError as exc:
        raise ConfigError("simulation", str(exc)) from None
    try:
        cfg.tuning_config()
    except ValueError as exc:
        raise ConfigError("calibrate", str(exc)) from None
    if cfg.forecast.params not in ("auto", "fit", "calibrate"):
        raise ConfigError("forecast.params", f"expected auto, fit or calibrate, got {cfg.forecast.params!r}")
    for sec in ("synth", "estimate", "forecast", "calibrate"):
        s = getattr(cfg, sec)
        if not s.t_begin < s.t_end:
            raise ConfigError(f"{sec}.t_end", "must exceed t_begin")


def config_from_dict(data: dict) -> Config:
    cfg = _build(Config, data)
    _validate(cfg)
    return cfg


def load_config(path: str | Path | None, overrides: typing.Sequence[str] = ()) -> Config:
    """Read ``path`` (or defaults when ``None``) and apply ``section.key=value`` overrides.

    Override values are parsed as JSON, falling back to a plain string.
    """
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"{path}: not valid JSON ({exc})") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(dotted, "cannot override inside a non-object")
        node[parts[-1]] = value
    return config_from_dict(data)


def demo_config(seed: int = 0) -> Config:
    """A small morning on the 64x64 city, quick enough for an end-to-end smoke run."""
    cfg = Config(seed=seed)
    cfg.synth.t_begin, cfg.synth.t_end = 6 * 3600.0, 8.5 * 3600.0
    cfg.synth.demand = {"corridor_per_min": 120.0, "background_per_min": 2.0,
                        "surges": [{"t_center": 7.5 * 3600.0, "width_min": 15.0, "rate_per_min": 40.0,
                                    "corridor": 0}]}
    cfg.estimate.t_begin, cfg.estimate.t_end = 6 * 3600.0, 8.5 * 3600.0
    cfg.calibrate.t_begin, cfg.calibrate.t_end = 6 * 3600.0, 8.5 * 3600.0
    cfg.calibrate.regular, cfg.calibrate.rush = [6 * 3600.0, 6.9 * 3600.0], [7 * 3600.0, 8.5 * 3600.0]
    cfg.fit.min_samples = 12
    cfg.calibrate.max_iter = 3
    cfg.forecast.t_begin, cfg.forecast.t_end = 7 * 3600.0, 7.5 * 3600.0
    cfg.evaluate.tt_min_s, cfg.evaluate.tt_max_s = 300.0, 1800.0
    return cfg


def write_config(path: str | Path, cfg: Config) -> None:
    Path(path).write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
