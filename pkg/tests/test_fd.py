import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from taxigrid.estimation import SampleArchive
from taxigrid.fd import (DEFAULT_NC, DEFAULT_NM, DEFAULT_VF, DEFAULT_VS, FdField, FdParams,
                         InsufficientData, eval_vn, fit_cell, fit_field, read_fd, select_pq, write_fd,
                         write_scatter)
from taxigrid.grid import flat_key


def triangular(N, vf, nc, nj):
    """Flux of a triangular diagram with apex (nc, nc*vf) and jam occupancy nj."""
    N = np.asarray(N, float)
    return np.where(N <= nc, vf * N, vf * nc * (nj - N) / (nj - nc))


class TestSelectPQ:
    def test_below_minimum(self):
        with pytest.raises(InsufficientData):
            select_pq(np.ones(49), np.ones(49))

    def test_single_point_cloud(self):
        with pytest.raises(InsufficientData):
            select_pq(np.full(80, 3.0), np.full(80, 40.0))

    def test_triangular_apex(self):
        # shallow congested leg, samples dense on [0, 3 Nc]
        vf, nc, nj = 30.0, 5.0, 30.0
        N = np.linspace(0.05, 3 * nc, 600)
        P, Q = select_pq(N, triangular(N, vf, nc, nj))
        assert abs(P[0] - nc) <= 0.1 * nc
        assert abs(P[1] - nc * vf) <= 0.1 * nc * vf
        assert Q[0] > P[0]

    def test_steep_leg_keeps_free_flow_slope(self):
        # the outlier cut removes the apex, so P slides down the free-flow line, but stays on it
        vf, nc, nj = 30.0, 5.0, 15.0
        N = np.linspace(0.05, nj - 0.05, 600)
        P, _ = select_pq(N, triangular(N, vf, nc, nj))
        assert P[0] < nc
        assert P[1] / P[0] == pytest.approx(vf, rel=1e-12)

    def test_hand_built_anchors(self):
        # 5 outliers are dropped; the rest splits cleanly into a free-flow and a congested clump
        N = np.array([4.0] * 60 + [10.0] * 40)
        flux = np.array([200.0] * 5 + [80.0] * 55 + [50.0] * 40)
        P, Q = select_pq(N, flux)
        assert P == (4.0, 80.0) and Q == (10.0, 50.0)

    def test_tie_break_is_deterministic(self):
        rng = np.random.default_rng(0)
        N = rng.integers(1, 10, 200).astype(float)
        flux = rng.integers(1, 5, 200).astype(float) * 10
        perm = rng.permutation(200)
        a = select_pq(N, flux, order_key=np.arange(200))
        b = select_pq(N[perm], flux[perm], order_key=np.arange(200)[perm])
        assert a == b


class TestFitCell:
    def test_slope_arithmetic(self):
        N = np.array([4.0] * 60 + [10.0] * 40)
        flux = np.array([200.0] * 5 + [80.0] * 55 + [50.0] * 40)
        p = fit_cell(N, flux)
        assert (p.Vf, p.Nc, p.Vs, p.Nm, p.fitted) == (20.0, 4.0, 5.0, 10.0, True)

    def test_defaults_on_insufficient(self):
        p = fit_cell(np.ones(10), np.ones(10))
        assert (p.Vf, p.Vs, p.Nc, p.Nm, p.fitted) == (20.0, 5.0, 1.0, 0.5, False)

    def test_default_constants(self):
        assert (DEFAULT_VF, DEFAULT_VS, DEFAULT_NC, DEFAULT_NM) == (20.0, 5.0, 1.0, 0.5)

    def test_noisy_oracle_recovery(self):
        rng = np.random.default_rng(7)
        truth = FdParams(40.0, 8.0, 6.0, 20.0)
        N = rng.uniform(0.2, 30.0, 500)
        flux = np.array([n * eval_vn(truth, n) for n in N]) * (1 + rng.normal(0, 0.05, 500))
        p = fit_cell(N, flux)
        assert p.fitted
        assert abs(p.Vf - 40.0) <= 0.15 * 40.0


class TestEvalVn:
    p = FdParams(30.0, 6.0, 4.0, 12.0)

    def test_breakpoint(self):
        assert eval_vn(self.p, 4.0) == 30.0

    def test_at_nm(self):
        assert eval_vn(self.p, 12.0) == pytest.approx(6.0, rel=1e-12)

    def test_default_degenerate(self):
        assert eval_vn(FdParams(), 3.0) == 5.0
        assert eval_vn(FdParams(), 0.5) == 20.0

    def test_floor(self):
        assert eval_vn(self.p, 1e6) == 1.0
        assert eval_vn(FdParams(20, 0.5, 1, 0.5), 2.0, v_min=2.0) == 2.0


valid_params = st.builds(
    lambda vf, vs_r, nc, nm_r: FdParams(vf, vf * vs_r, nc, nc * nm_r),
    st.floats(2.0, 120.0), st.floats(0.02, 0.95), st.floats(0.05, 50.0), st.floats(1.05, 20.0))


@given(valid_params)
def test_anchor_values(p):
    assert eval_vn(p, p.Nc, v_min=0.0) == p.Vf
    assert eval_vn(p, p.Nm, v_min=0.0) == pytest.approx(p.Vs, rel=1e-9)


@given(valid_params, st.floats(1e-9, 1e-6))
def test_continuity_at_nc(p, eps):
    # one-sided slope of the hyperbola at N_c bounds the jump
    slope = p.Vf * (p.Vf - p.Vs) / (p.Vs * (p.Nm - p.Nc))
    dn = p.Nc * eps
    assert abs(eval_vn(p, p.Nc + dn, v_min=0.0) - p.Vf) <= 1.01 * slope * dn + 1e-12 * p.Vf


@given(valid_params, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_strictly_decreasing_on_congested_branch(p, a, b):
    assume(a != b)
    n1 = p.Nc + (p.Nm - p.Nc) * max(min(a, b), 1e-6)
    n2 = p.Nc + (p.Nm - p.Nc) * max(a, b)
    assume(n2 > n1 * (1 + 1e-9))
    assert eval_vn(p, n2, v_min=0.0) < eval_vn(p, n1, v_min=0.0)


@given(valid_params, st.floats(0.0, 1e4), st.floats(0.1, 5.0))
def test_floor_holds(p, N, vmin):
    assert eval_vn(p, N, v_min=vmin) >= vmin


@given(st.floats(1e4, 1e7), st.floats(0.1, 1.0))
def test_degenerate_everywhere_piecewise(N, scale):
    p = FdParams(10.0, 20.0, 2.0, 1.0)
    assert eval_vn(p, N * scale) == 20.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.25, 0.5, 2.0, 8.0]))
def test_flux_scale_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(50, 300))
    N = rng.uniform(0, 20, n)
    flux = rng.uniform(0, 200, n)
    a = fit_cell(N, flux)
    b = fit_cell(N, flux * c)
    assert a.fitted == b.fitted
    if a.fitted:
        assert (b.Nc, b.Nm) == (a.Nc, a.Nm)
        assert b.Vf == pytest.approx(c * a.Vf, rel=1e-12)
        assert b.Vs == pytest.approx(c * a.Vs, rel=1e-12)


def test_vectorised_speed_matches_scalar(rng, grid8):
    fd = FdField.default(grid8)
    keys = rng.choice(grid8.n_keys, 40, replace=False)
    for k in keys:
        c, r, d = int(k) // 4 // grid8.ny, int(k) // 4 % grid8.ny, int(k) % 4
        vf = rng.uniform(5, 40)
        nc = rng.uniform(0.5, 8)
        fd.set(c, r, d, FdParams(vf, vf * rng.uniform(0.1, 0.9), nc, nc * rng.uniform(1.1, 5), True))
    N = rng.uniform(0, 40, grid8.n_keys)
    v = fd.speed(N)
    for k in range(grid8.n_keys):
        c, r, d = k // 4 // grid8.ny, k // 4 % grid8.ny, k % 4
        assert v[k] == pytest.approx(eval_vn(fd.params(c, r, d), N[k]), rel=1e-12)


class TestFitField:
    def test_empty_archive(self, grid8):
        fd, report = fit_field(SampleArchive(*(np.zeros(0, dtype=t) for t in (np.int64, float, float, float))), grid8)
        assert fd.n_fitted == 0 and report["default"] == grid8.n_keys
        assert np.all(fd.Vf == 20.0)

    def test_one_rich_cell(self, grid8):
        rng = np.random.default_rng(3)
        key = int(flat_key(2, 5, 1, grid8))
        truth = FdParams(25.0, 5.0, 3.0, 9.0)
        N = rng.uniform(0.1, 15, 300)
        flux = np.array([n * eval_vn(truth, n) for n in N])
        thin = int(flat_key(0, 0, 0, grid8))
        arch = SampleArchive(np.r_[np.full(300, key), np.full(20, thin)], np.r_[600.0 * np.arange(300),
                             600.0 * np.arange(20)], np.r_[N, np.ones(20)], np.r_[flux, np.ones(20)])
        fd, report = fit_field(arch, grid8)
        assert report["fitted"] == 1 and report["attempted"] == 1
        assert fd.fitted[2, 5, 1] and fd.fitted.sum() == 1


def test_fd_csv_roundtrip(tmp_path, grid8):
    fd = FdField.default(grid8)
    fd.set(1, 2, 3, FdParams(33.3, 4.4, 2.25, 7.5, True))
    p = tmp_path / "fd.csv"
    write_fd(p, fd)
    assert p.read_text().splitlines()[0] == "col,row,dir,Vf,Vs,Nc,Nm,fitted"
    back = read_fd(p, grid8)
    assert back.params(1, 2, 3) == fd.params(1, 2, 3)
    assert back.n_fitted == 1
    lines = p.read_text().splitlines()
    p.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ValueError, match="incomplete"):
        read_fd(p, grid8)


def test_scatter_dump(tmp_path, grid8):
    key = int(flat_key(1, 1, 0, grid8))
    arch = SampleArchive(np.full(5, key), 600.0 * np.arange(5), np.arange(1.0, 6.0), 10 * np.arange(1.0, 6.0))
    fd = FdField.default(grid8)
    p = tmp_path / "scatter.csv"
    write_scatter(p, arch, fd, [key])
    rows = p.read_text().splitlines()
    assert rows[0] == "col,row,dir,kind,N,flux"
    assert sum(r.endswith(",") is False and ",sample," in r for r in rows) == 5
    assert sum(",curve," in r for r in rows) == 100
