"""``taxigrid`` command line: pipeline stages that talk through files in a work directory.

Layout under ``--workdir``::

    synth/       scenario.json gps.csv truth_fd.csv true_snapshots.csv truth_routes.jsonl arrivals.csv
    preprocess/  routes.jsonl ingest_stats.json
    estimate/    snapshots.csv samples.csv
    fit/         fd.csv fit_report.json scatter.csv
    calibrate/   fd.csv convergence.csv chi.json
    forecast/    forecasts.csv forecasts_field.csv [forecasts_default.csv] params.json
    evaluate/    report.csv series.csv travel_time.csv travel_time_hist.csv
    report/      table.csv summary.txt series.csv travel_time_hist.csv

Exit codes: 0 success, 2 bad config, 3 missing artifact, 4 data validation failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import DayRunner, calibrate, write_convergence
from .config import Config, ConfigError, demo_config, load_config, write_config
from .estimation import (read_samples, read_snapshots, snapshot_series, snapshot_times,
                         window_samples, write_samples, write_snapshots)
from .evaluation import (central_segments, error_histogram, extrapolation_baseline, read_report, score_segments,
                         segment_series, travel_time, write_histogram, write_report, write_series)
from .fd import FdField, fit_field, read_fd, write_fd, write_scatter
from .forecast import (History, assimilate, forecast, origin_seed, origins, read_forecasts, restart,
                       write_forecasts)
from .ingest import preprocess, read_gps_csv, write_gps_csv
from .oracle import emit_gps, run_oracle, write_scenario
from .routes import read_routes, write_routes
from .simulator import ChiProfile, SimConfig, write_arrivals

log = logging.getLogger("taxigrid")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA = 0, 2, 3, 4


class MissingArtifact(Exception):
    """A stage input is absent; ``stage`` names the stage that should have produced it."""

    def __init__(self, path: Path, stage: str):
        super().__init__(f"missing artifact {path} (run `taxigrid {stage}` first)")
        self.path, self.stage = path, stage


class EmptyReport(MissingArtifact):
    def __init__(self, path: Path):
        Exception.__init__(self, f"empty report: no evaluation outputs in {path} (run `taxigrid evaluate` first)")
        self.path, self.stage = path, "evaluate"


class DataError(Exception):
    """Input artifacts exist but do not support the requested stage."""


def _need(path: Path, stage: str) -> Path:
    if not path.is_file():
        raise MissingArtifact(path, stage)
    return path


def _out(workdir: Path, stage: str) -> Path:
    d = workdir / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- stages ----------------------------------------------------------------

def cmd_synth(cfg: Config, wd: Path, args) -> None:
    out = _out(wd, "synth")
    sc = cfg.scenario()
    city = sc.city()
    run = run_oracle(city, sc.run_seed, sc.t_begin, sc.t_end)
    ecfg = sc.emission_config()
    records, truth = emit_gps(run.routes, city.grid, ecfg, sc.emission_seed, cfg.grid.projection())
    write_scenario(out / "scenario.json", sc)
    write_gps_csv(out / "gps.csv", records)
    write_fd(out / "truth_fd.csv", city.truth)
    write_snapshots(out / "true_snapshots.csv", [run.estimated_snapshots[t] for t in sorted(run.estimated_snapshots)],
                    city.grid)
    write_routes(out / "truth_routes.jsonl", run.routes)
    rs = run.routes
    dep, arr = rs.depart, rs.arrive
    order = np.lexsort((np.arange(len(rs)), arr))
    write_arrivals(out / "arrivals.csv", [(rs.taxi_ids[i], dep[i], arr[i], rs.n_steps[i] * city.grid.cell_size)
                                          for i in order])
    with open(out / "emission_truth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record", "route", "kind"])
        for j, (r, k) in enumerate(zip(truth.route, truth.kind)):
            w.writerow([j, int(r), int(k)])
    log.info("synth: %d trips, %d GPS records", len(rs), len(records))


def cmd_preprocess(cfg: Config, wd: Path, args) -> None:
    src = Path(args.input) if args.input else wd / "synth" / "gps.csv"
    _need(src, "synth")
    try:
        records = read_gps_csv(src)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    routes, stats = preprocess(records, cfg.ingest_config(), workers=args.workers)
    out = _out(wd, "preprocess")
    write_routes(out / "routes.jsonl", routes)
    _dump(out / "ingest_stats.json", stats.as_dict())
    log.info("preprocess: %d routes from %d records", len(routes), stats.input)


def _routes(wd: Path):
    path = _need(wd / "preprocess" / "routes.jsonl", "preprocess")
    try:
        return read_routes(path)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def cmd_estimate(cfg: Config, wd: Path, args) -> None:
    rs = _routes(wd)
    grid = cfg.grid.grid()
    e = cfg.estimate
    sim = cfg.simulation
    times = snapshot_times(e.t_begin, e.t_end, e.snapshot_every)
    window = int(round(e.snapshot_every / sim.dt))
    states = snapshot_series(rs, grid, times, window, sim.dt, sim.v_cap)
    out = _out(wd, "estimate")
    write_snapshots(out / "snapshots.csv", states, grid)
    write_samples(out / "samples.csv", window_samples(rs, grid, e.t_begin, e.t_end, e.snapshot_every,
                                                      sim.dt, sim.v_cap), grid)
    log.info("estimate: %d snapshots", len(states))


def _snapshots(cfg: Config, wd: Path) -> dict:
    path = _need(wd / "estimate" / "snapshots.csv", "estimate")
    try:
        states = read_snapshots(path, cfg.grid.grid())
    except ValueError as exc:
        raise DataError(str(exc)) from None
    return {float(s.t): s for s in states}


def cmd_fit(cfg: Config, wd: Path, args) -> None:
    path = _need(wd / "estimate" / "samples.csv", "estimate")
    grid = cfg.grid.grid()
    try:
        arch = read_samples(path, grid)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    fd, report = fit_field(arch, grid, cfg.fit_config())
    out = _out(wd, "fit")
    write_fd(out / "fd.csv", fd)
    _dump(out / "fit_report.json", report)
    counts = arch.counts_per_key(grid.n_keys)
    top = np.argsort(-counts, kind="stable")[:cfg.fit.scatter_keys]
    write_scatter(out / "scatter.csv", arch, fd, top[counts[top] > 0])
    log.info("fit: %d of %d keys fitted", report["fitted"], report["keys"])


def _read_fd(path: Path, stage: str, cfg: Config) -> FdField:
    _need(path, stage)
    try:
        return read_fd(path, cfg.grid.grid())
    except ValueError as exc:
        raise DataError(str(exc)) from None


def cmd_calibrate(cfg: Config, wd: Path, args) -> None:
    fd = _read_fd(wd / "fit" / "fd.csv", "fit", cfg)
    real = _snapshots(cfg, wd)
    rs = _routes(wd)
    c = cfg.calibrate
    real = {t: s for t, s in real.items() if c.t_begin <= t <= c.t_end}
    runner = DayRunner(cfg.grid.grid(), rs, cfg.chi(), cfg.sim_config(), c.t_begin, c.t_end)
    res = calibrate(fd, real, runner, cfg.tuning_config(), chi=cfg.chi() if c.tune_chi else None)
    out = _out(wd, "calibrate")
    write_fd(out / "fd.csv", res.fd)
    write_convergence(out / "convergence.csv", res.report)
    _dump(out / "chi.json", dataclasses.asdict(res.chi or cfg.chi()))
    log.info("calibrate: best iteration %d", res.best_iter)


def _forecast_params(cfg: Config, wd: Path):
    choice = cfg.forecast.params
    cal = wd / "calibrate" / "fd.csv"
    if choice == "calibrate" or (choice == "auto" and cal.is_file()):
        fd = _read_fd(cal, "calibrate", cfg)
        chi_path = wd / "calibrate" / "chi.json"
        chi = ChiProfile(**json.loads(chi_path.read_text())) if chi_path.is_file() else cfg.chi()
        return "calibrate", fd, chi
    return "fit", _read_fd(wd / "fit" / "fd.csv", "fit", cfg), cfg.chi()


def run_forecasts(history: History, fd: FdField, chi: ChiProfile, t0s, observed: dict, cfg: SimConfig,
                  horizon: float):
    out = []
    for t0 in t0s:
        if float(t0) not in observed:
            raise DataError(f"no estimated snapshot at forecast origin t={t0:g}")
        sim = restart(history, float(t0), fd, chi,
                      SimConfig(**{**cfg.__dict__, "seed": origin_seed(cfg.seed, t0)}), horizon)
        assimilate(sim, observed[float(t0)])
        out.append(forecast(sim, horizon))
    return out


def cmd_forecast(cfg: Config, wd: Path, args) -> None:
    source, fd, chi = _forecast_params(cfg, wd)
    rs = _routes(wd)
    observed = _snapshots(cfg, wd)
    f = cfg.forecast
    grid = cfg.grid.grid()
    sim = cfg.sim_config()
    t0s = origins(f.t_begin, f.t_end, f.every)
    if len(t0s) == 0:
        raise DataError("forecast window holds no origins")
    hist = History(rs, grid, 0.0, max(86400.0, float(t0s[-1]) + f.horizon), sim.dt, sim.window, sim.v_cap)
    out = _out(wd, "forecast")
    fcs = run_forecasts(hist, fd, chi, t0s, observed, sim, f.horizon)
    write_forecasts(out / "forecasts.csv", fcs, grid)
    write_forecasts(out / "forecasts_field.csv", fcs, grid, product="field")
    if f.compare_default:
        dflt = run_forecasts(hist, FdField.default(grid), chi, t0s, observed, sim, f.horizon)
        write_forecasts(out / "forecasts_default.csv", dflt, grid)
    elif (out / "forecasts_default.csv").exists():
        (out / "forecasts_default.csv").unlink()
    _dump(out / "params.json", {"params": source, "chi": dataclasses.asdict(chi), "origins": len(t0s)})
    log.info("forecast: %d origins with %s parameters", len(t0s), source)


def _read_fc(path: Path, cfg: Config):
    try:
        return read_forecasts(path, cfg.grid.grid())
    except ValueError as exc:
        raise DataError(str(exc)) from None


def cmd_evaluate(cfg: Config, wd: Path, args) -> None:
    grid = cfg.grid.grid()
    ev = cfg.evaluate
    fc_dir = wd / "forecast"
    model = _read_fc(_need(fc_dir / "forecasts.csv", "forecast"), cfg)
    field = _read_fc(_need(fc_dir / "forecasts_field.csv", "forecast"), cfg)
    dflt = _read_fc(fc_dir / "forecasts_default.csv", cfg) if (fc_dir / "forecasts_default.csv").is_file() else None
    real = _snapshots(cfg, wd)
    segs = central_segments(grid, ev.segment_lo, ev.segment_hi)
    if not segs:
        raise DataError("segment bounds leave no road segment")
    lead = 60.0 * ev.lead_min
    t0s = [fc.t0 for fc in model]
    missing = [T for t0 in t0s for T in (t0, t0 + lead) if T not in real]
    if missing:
        raise DataError(f"estimated snapshots do not cover t={missing[0]:g}; widen the estimate window")
    zero = np.zeros(grid.shape)

    def frames(fcs):
        return [fc.estimated.get(fc.t0 + lead, zero) for fc in fcs]

    truth = segment_series([real[t0 + lead].V for t0 in t0s], segs, grid)
    series = {"real": truth, "model": segment_series(frames(model), segs, grid),
              "extrapolation": extrapolation_baseline(segment_series([real[t0].V for t0 in t0s], segs, grid))}
    if dflt is not None:
        series["default_params"] = segment_series(frames(dflt), segs, grid)
    scores = []
    for name in ("model", "extrapolation", "default_params"):
        if name in series:
            try:
                scores.append(score_segments(series[name], truth, name))
            except ValueError as exc:
                raise DataError(f"cannot score {name}: {exc}") from None
    out = _out(wd, "evaluate")
    write_report(out / "report.csv", scores)
    write_series(out / "series.csv", segs, [t0 + lead for t0 in t0s], series)
    _travel_times(cfg, wd, out, field, grid)
    log.info("evaluate: %s", ", ".join(f"{s.method} rmse {s.rmse_kmh:.3f}" for s in scores))


def _travel_times(cfg: Config, wd: Path, out: Path, field, grid) -> None:
    ev = cfg.evaluate
    rs = _routes(wd)
    dep, dur = rs.depart, rs.arrive - rs.depart
    every = cfg.forecast.every
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 9]))
    rows = []
    for fc in field:
        times = sorted(fc.estimated)
        cand = np.flatnonzero((dur >= ev.tt_min_s) & (dur <= ev.tt_max_s) & (dep >= fc.t0) & (dep < fc.t0 + every)
                              & (dep + dur <= times[-1] + every))
        rows.extend((fc, int(i)) for i in cand)
    if len(rows) > ev.tt_max_trips:
        keep = np.sort(rng.choice(len(rows), ev.tt_max_trips, replace=False))
        rows = [rows[k] for k in keep]
    errs = []
    with open(out / "travel_time.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["taxi_id", "depart_s", "real_s", "pred_s", "rel_err", "floored"])
        for fc, i in rows:
            times = sorted(fc.estimated)
            a, b = rs.offsets[i], rs.offsets[i + 1]
            pred, floored = travel_time(rs.cells[a:b], dep[i], times, [fc.estimated[T] for T in times], grid,
                                        cfg.simulation.v_min)
            e = (pred - dur[i]) / dur[i]
            errs.append(e)
            w.writerow([rs.taxi_ids[i], f"{dep[i]:.3f}", f"{dur[i]:.3f}", f"{pred:.3f}", f"{e:.6f}", int(floored)])
    write_histogram(out / "travel_time_hist.csv", error_histogram(errs))


def cmd_report(cfg: Config, wd: Path, args) -> None:
    ev_dir = wd / "evaluate"
    path = ev_dir / "report.csv"
    if not path.is_file():
        raise EmptyReport(ev_dir)
    try:
        scores = read_report(path)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if not scores:
        raise EmptyReport(ev_dir)
    out = _out(wd, "report")
    write_report(out / "table.csv", scores)
    by = {s.method: s for s in scores}
    lines = [f"{'method':<16}{'rmse_kmh':>10}{'accuracy':>10}"]
    lines += [f"{s.method:<16}{s.rmse_kmh:>10.3f}{s.accuracy:>10.3f}" for s in scores]
    if "model" in by:
        for other in ("extrapolation", "default_params"):
            if other in by:
                lines.append(f"margin vs {other}: {by[other].rmse_kmh - by['model'].rmse_kmh:+.3f} km/h rmse")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    for name in ("series.csv", "travel_time_hist.csv"):
        if (ev_dir / name).is_file():
            shutil.copyfile(ev_dir / name, out / name)
    print("\n".join(lines))


def cmd_config(cfg: Config, wd: Path, args) -> None:
    c = demo_config(cfg.seed) if args.demo else cfg
    if args.output:
        write_config(args.output, c)
    else:
        sys.stdout.write(json.dumps(c.to_json(), indent=2, sort_keys=True) + "\n")


STAGES = {
    "synth": (cmd_synth, "generate the synthetic city, run the oracle day and emit GPS"),
    "preprocess": (cmd_preprocess, "clean GPS records into rasterized routes"),
    "estimate": (cmd_estimate, "speed/occupancy snapshots and flux samples from routes"),
    "fit": (cmd_fit, "fit per-cell fundamental diagrams"),
    "calibrate": (cmd_calibrate, "tune free-flow speeds and capacities against history"),
    "forecast": (cmd_forecast, "rolling one-hour forecasts"),
    "evaluate": (cmd_evaluate, "score forecasts and travel times"),
    "report": (cmd_report, "summarize evaluation outputs"),
    "config": (cmd_config, "print or write the effective configuration"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taxigrid", description="Grid traffic simulation and speed forecasting.")
    p.add_argument("--version", action="version", version=f"taxigrid {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="JSON config file")
    common.add_argument("--workdir", "-w", default="run", help="artifact directory (default: run)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--workers", type=int, default=1, help="worker processes; never changes outputs")
    common.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in STAGES.items():
        sp = sub.add_parser(name, parents=[common], help=help_)
        if name == "preprocess":
            sp.add_argument("--input", help="GPS CSV (default: synth/gps.csv in the workdir)")
        if name == "config":
            sp.add_argument("--demo", action="store_true", help="the small demo scenario")
            sp.add_argument("--output", "-o", help="write to a file instead of stdout")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        if args.workers < 1:
            raise ConfigError("--workers", "must be at least 1")
    except ConfigError as exc:
        print(f"taxigrid: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"taxigrid: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    fn = STAGES[args.command][0]
    try:
        fn(cfg, Path(args.workdir), args)
    except MissingArtifact as exc:
        print(f"taxigrid: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DataError as exc:
        print(f"taxigrid: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
