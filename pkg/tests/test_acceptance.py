"""End-to-end acceptance checks; each prints one PASS/FAIL line with its measured margin and runtime."""

import time

import numpy as np
import pytest

from conftest import record_acceptance
from taxigrid.calibration import DayRunner, TuningConfig, calibrate
from taxigrid.estimation import averaged_state, instantaneous_state, snapshot_times
from taxigrid.evaluation import (central_segments, error_histogram, extrapolation_baseline, relative_errors,
                                 score_segments, segment_series, travel_time, write_histogram)
from taxigrid.fd import FdField, FdParams, eval_vn
from taxigrid.forecast import History, forecast_from_history, origins, rolling_evaluation
from taxigrid.grid import Projection
from taxigrid.ingest import IngestConfig, preprocess
from taxigrid.oracle import EmissionConfig, emit_gps, generate_city, run_oracle, sample_trips
from taxigrid.simulator import ChiProfile, SimConfig
from test_estimation import brute_averaged, brute_instant, random_scenario

H = 3600.0


def test_speed_law_anchors():
    t = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, monotone = 0.0, True
    for _ in range(1000):
        vs = rng.uniform(1.0, 30.0)
        nc = rng.uniform(0.1, 80.0)
        p = FdParams(Vf=vs + rng.uniform(0.5, 80.0), Vs=vs, Nc=nc, Nm=nc + rng.uniform(0.1, 200.0))
        worst = max(worst, abs(eval_vn(p, p.Nc) - p.Vf) / p.Vf, abs(eval_vn(p, p.Nm) - p.Vs) / p.Vs)
        grid = p.Nc + (p.Nm - p.Nc) * np.linspace(0, 1, 41)
        v = np.array([eval_vn(p, n) for n in grid])
        monotone &= bool(np.all(np.diff(v) < 0))
    dt = time.perf_counter() - t
    ok = worst <= 1e-9 and monotone and dt < 1.0
    record_acceptance(1, ok, f"max anchor rel err {worst:.2e}, strictly decreasing={monotone}, {dt:.2f}s")
    assert ok


def test_estimation_oracle_equivalence():
    # the runtime bound applies to the estimator; the brute-force oracle is timed separately
    rng = np.random.default_rng(77)
    mismatches, checks, spent = 0, 0, 0.0
    t_all = time.perf_counter()
    for _ in range(100):
        g, routes = random_scenario(rng)
        for tq in (0.0, 60.0 * int(rng.integers(1, 20)), float(rng.uniform(0, 1200))):
            t = time.perf_counter()
            got = instantaneous_state(routes, tq, g)
            spent += time.perf_counter() - t
            count, vsum = brute_instant(routes, tq, g)
            with np.errstate(invalid="ignore", divide="ignore"):
                want = np.where(count > 0, vsum / np.maximum(count, 1), np.nan)
            mismatches += not (np.array_equal(got.count, count) and np.array_equal(got.speed, want, equal_nan=True))
            checks += 1
        tn = 60.0 * int(rng.integers(0, 25))
        t = time.perf_counter()
        got = averaged_state(routes, tn, g)
        spent += time.perf_counter() - t
        V, N = brute_averaged(routes, tn, g)
        mismatches += not (np.array_equal(got.N, N) and np.array_equal(got.V, V))
        checks += 1
    total = time.perf_counter() - t_all
    ok = mismatches == 0 and spent < 5.0
    record_acceptance(2, ok, f"{checks - mismatches}/{checks} exact matches over 100 scenarios, estimator "
                             f"{spent:.2f}s (oracle included {total:.1f}s)")
    assert ok


def test_pipeline_round_trip():
    t = time.perf_counter()
    city = generate_city(0, 128, 128)
    run = run_oracle(city, 1, 6 * H, 9 * H)
    rs = run.routes.subset(np.arange(min(len(run.routes), 4000)))
    cfg = IngestConfig(city.grid, Projection())
    recs, _ = emit_gps(rs, city.grid, EmissionConfig(noise_m=0.0), seed=2)
    out, _ = preprocess(recs, cfg)
    want = sorted(tuple(map(tuple, r.cells.tolist())) for r in rs if r.n_steps > 0)
    got = sorted(tuple(map(tuple, np.asarray(r.cells).tolist())) for r in out)
    recovered = sum(1 for a, b in zip(want, got) if a == b) / len(want) if len(want) == len(got) else 0.0
    recs_c, truth = emit_gps(rs, city.grid, EmissionConfig(corruption=0.05), seed=3)
    _, stats = preprocess(recs_c, cfg)
    injected = float(np.mean(truth.kind > 0))
    drop = stats.dropped / stats.input
    dt = time.perf_counter() - t
    ok = recovered == 1.0 and len(recs_c) >= 100_000 and abs(drop - injected) <= 0.01 and dt < 30.0
    record_acceptance(3, ok, f"recovered {recovered:.1%} of {len(want)} routes; {len(recs_c)} records, "
                             f"injected {injected:.4f} dropped {drop:.4f}, {dt:.1f}s")
    assert ok


def test_fd_fit_recovery(oracle_day):
    t = time.perf_counter()
    city, fd, arch = oracle_day.city, oracle_day.fd, oracle_day.archive
    ck = city.corridor_keys()
    counts = arch.counts_per_key(city.grid.n_keys)
    per_cell = counts.reshape(-1, 4).sum(axis=1)[np.unique(ck // 4)]
    vf_t, vf_f = city.truth.Vf.reshape(-1)[ck], fd.Vf.reshape(-1)[ck]
    fitted = fd.fitted.reshape(-1)[ck]
    within = fitted & (np.abs(vf_f - vf_t) / vf_t <= 0.15)
    frac = float(within.mean())
    dt = oracle_day.build_s + time.perf_counter() - t
    ok = frac >= 0.8 and dt < 60.0
    record_acceptance(4, ok, f"{frac:.1%} of {len(ck)} corridor cell-directions within 15%; samples per corridor "
                             f"cell median {np.median(per_cell):.0f}, {np.mean(per_cell >= 200):.0%} with >= 200; "
                             f"city+day+fit {dt:.1f}s")
    assert ok


def test_conservation_and_determinism():
    t = time.perf_counter()
    city = generate_city(5)
    trips = sample_trips(city, 2)
    a = run_oracle(city, 2, trips=trips)
    b = run_oracle(city, 2, trips=trips)
    conserved = all(inj == act + arr for _, inj, act, arr in a.log)
    same = (a.log == b.log and np.array_equal(a.routes.entries, b.routes.entries)
            and a.routes.taxi_ids == b.routes.taxi_ids
            and all(np.array_equal(a.field_snapshots[k], b.field_snapshots[k]) for k in a.field_snapshots))
    dt = time.perf_counter() - t
    ok = conserved and same and a.injected >= 2000 and len(a.log) >= 1440 and dt < 60.0
    record_acceptance(5, ok, f"{a.injected} agents over {len(a.log)} steps, conserved={conserved}, "
                             f"bit-identical={same}, {dt:.1f}s")
    assert ok


def test_forecast_skill_ordering(oracle_day):
    t = time.perf_counter()
    grid, hist, fd = oracle_day.grid, oracle_day.history, oracle_day.fd
    real = hist.snapshots(snapshot_times(0, 15 * H))
    cal = calibrate(fd, real, DayRunner(grid, hist.routes, ChiProfile(), SimConfig(seed=7)),
                    TuningConfig(tol=0.2, min_occupancy=10))
    segs = central_segments(grid, 16, 47)
    t0s = origins(5 * H + 1200, 17 * H)
    truth = segment_series([hist.snapshot(T + H).V for T in t0s], segs, grid)
    now = segment_series([hist.snapshot(T).V for T in t0s], segs, grid)
    scores = {"extrapolation": score_segments(extrapolation_baseline(now), truth, "extrapolation")}
    for name, F in (("model", cal.fd), ("default_params", FdField.default(grid))):
        fcs = rolling_evaluation(hist, F, ChiProfile(), t0s, SimConfig(seed=5), keep_leads=[60])
        pred = segment_series([fc.estimated[fc.t0 + H] for fc in fcs], segs, grid)
        scores[name] = score_segments(pred, truth, name)
    dt = oracle_day.history_s + time.perf_counter() - t
    m, e, d = (scores[k].rmse_kmh for k in ("model", "extrapolation", "default_params"))
    ok = m < e and m < d and dt < 300.0
    record_acceptance(6, ok, f"rmse model {m:.2f} < extrapolation {e:.2f} (margin {e - m:.2f}) and < default "
                             f"{d:.2f} (margin {d - m:.2f}) km/h over {len(t0s)} origins, {dt:.0f}s")
    assert ok


def test_calibration_progress(oracle_day):
    t = time.perf_counter()
    city, fd = oracle_day.city, oracle_day.fd
    truth = fd.copy()
    truth.Vf = truth.Vf + 5.0
    trips = sample_trips(city, 1)
    played = run_oracle(city, 1, t_end=15 * H, trips=trips, fd=truth)
    hist = History(played.routes, city.grid, 0.0, 15 * H)
    real = hist.snapshots(snapshot_times(0, 15 * H))
    runner = DayRunner(city.grid, hist.routes, city.chi, SimConfig(seed=7))
    cal = calibrate(fd, real, runner, TuningConfig(tol=0.2, min_occupancy=10, rush_gate=1.0))
    g0, g1 = cal.gap0[cal.tuned], cal.gap_final[cal.tuned]
    both = np.isfinite(g0) & np.isfinite(g1)
    frac = float(np.mean(g1[both] < g0[both])) if both.any() else 0.0
    dt = time.perf_counter() - t
    ok = frac >= 0.9 and dt < 300.0
    record_acceptance(7, ok, f"{frac:.1%} of {both.sum()} tuned cells improved; mean gap "
                             f"{cal.report[0][1]:.2f} -> {cal.report[cal.best_iter][1]:.2f} km/h, {dt:.0f}s")
    assert ok


def test_travel_time_estimator(oracle_day, tmp_path):
    t = time.perf_counter()
    grid, hist, fd = oracle_day.grid, oracle_day.history, oracle_day.fd
    rs, dep = hist.routes, hist.depart
    dur = hist.arrive - dep
    rng = np.random.default_rng(0)
    pred, true = [], []
    for t0 in np.arange(1, 24) * H:
        cand = np.flatnonzero((dur >= 1200) & (dur <= 1800) & (dep >= t0) & (dep < t0 + 600))
        if len(cand) == 0:
            continue
        fc = forecast_from_history(hist, t0, fd, ChiProfile(), SimConfig(seed=3))
        times = sorted(fc.field)
        frames = [fc.field[T] for T in times]
        for i in rng.choice(cand, min(100, len(cand)), replace=False):
            pred.append(travel_time(rs[i].cells, dep[i], times, frames, grid)[0])
            true.append(dur[i])
    errs = relative_errors(pred, true)
    med = float(np.median(errs))
    write_histogram(tmp_path / "hist.csv", error_histogram(errs))
    lines = (tmp_path / "hist.csv").read_text().splitlines()
    fmt = lines[0] == "bin_lo,bin_hi,count" and len(lines) == 23
    dt = oracle_day.history_s + time.perf_counter() - t
    ok = abs(med) <= 0.10 and fmt and dt < 60.0
    record_acceptance(8, ok, f"median relative error {med:+.1%} over {len(errs)} trips, histogram ok={fmt}, "
                             f"{dt:.1f}s")
    assert ok


@pytest.mark.parametrize("chi", [ChiProfile(), ChiProfile(a_am=0.8, a_pm=0.3, sigma_am=45)])
def test_chi_profile(chi):
    at_peak = chi(chi.t_am) == 1.0 + chi.a_am
    far = [t for t in np.arange(0, 86400, 60.0)
           if abs(t - chi.t_am) >= 5 * chi.sigma_am * 60 and abs(t - chi.t_pm) >= 5 * chi.sigma_pm * 60]
    dev = max(abs(chi(t) - 1.0) for t in far)
    ok = at_peak and dev <= 1e-3 and chi.t_am == 7 * H
    record_acceptance(9, ok, f"chi(07:00) = 1 + a_am exactly: {at_peak}; max |chi-1| beyond 5 sigma {dev:.1e}")
    assert ok
