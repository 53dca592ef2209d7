"""Energy/dissipation functionals, balance residuals, decay fits, report I/O."""

import csv
import math

import numpy as np
import pytest

from surfwave.dynamics import FlowState, StateRates, evaluate_rhs
from surfwave.energetics import (
    TIMESERIES_COLUMNS,
    EnergeticsError,
    EnergyReport,
    attach_balance,
    balance_residuals,
    compute_report,
    fit_decay,
    full_functionals,
    geometric_functionals,
    horizontal_functionals,
    linear_functionals,
    write_timeseries,
)

from conftest import make_trig_state

TP = 2.0 * np.pi


def field_state(grid, eq, model, u=None, eta=None, c=None, b=None,
                beta=1.0, gamma=1.0):
    """FlowState carrying explicit fields (functional evaluation only)."""
    zb = np.zeros(grid.shape_bulk)
    zs = np.zeros(grid.shape_surface)
    return FlowState(
        grid, eq, model, beta, gamma, 0.0,
        np.zeros((3,) + grid.shape_bulk) if u is None else u,
        zb.copy(),
        zs.copy() if eta is None else eta,
        zs.copy() if c is None else c,
        zb.copy() if b is None else b,
    )


def zero_rates(grid):
    return StateRates(
        u_t=np.zeros((3,) + grid.shape_bulk),
        p=np.zeros(grid.shape_bulk),
        eta_t=np.zeros(grid.shape_surface),
        c_t=np.zeros(grid.shape_surface),
        b_t=np.zeros(grid.shape_bulk),
    )


def surf_coords(grid):
    s1 = grid.x1[:, None] * np.ones((1, grid.N2))
    s2 = grid.x2[None, :] * np.ones((grid.N1, 1))
    return s1, s2


class TestLinearFunctionals:
    def test_surfactant_terms_closed_form(self, grid8, box_eq, box_model):
        a, gc, gb = 0.3, 0.2, 0.4
        s1, s2 = surf_coords(grid8)
        zc = grid8.x3[None, None, :] * np.ones(grid8.shape_bulk)
        eta = a * np.sin(TP * s1)
        c = gc * np.cos(TP * s2)
        b = gb * np.cos(TP * s1)[:, :, None] * (zc + 1.0) ** 2
        st = field_state(grid8, box_eq, box_model, eta=eta, c=c, b=b)
        E, D = linear_functionals(st)

        sig0 = box_eq.sigma0
        sig0d = box_eq.sigma0_d1
        fp = box_eq.f_d1_b0
        c0 = box_eq.c0
        wc0 = box_eq.omega_c0
        # unit box: int eta^2 = a^2/2, int (z+1)^4 dz = 1/5, int (2(z+1))^2 = 4/3
        E_exp = (
            0.5 * a**2 / 2
            + 0.5 * sig0 * TP**2 * a**2 / 2
            + (-sig0d * fp / (2 * c0)) * gb**2 * 0.5 * (1 / 5)
            + (-sig0d / (2 * c0)) * gc**2 / 2
        )
        gradb = gb**2 * (TP**2 * 0.5 * (1 / 5) + 0.5 * (4 / 3))
        D_exp = (
            (-sig0d * fp / c0) * gradb
            + (-sig0d / c0) * TP**2 * gc**2 / 2
            + (-sig0d * wc0 / c0) * (gc**2 / 2 + fp**2 * gb**2 / 2)
        )
        assert E == pytest.approx(E_exp, rel=1e-13)
        assert D == pytest.approx(D_exp, rel=1e-13)

    def test_transport_weights_scale_dissipation(self, grid8, box_eq, box_model):
        # beta multiplies the bulk gradient term, gamma the surface gradient
        # term; the exchange square carries no weight in the linearized form.
        gc, gb = 0.2, 0.4
        s1, s2 = surf_coords(grid8)
        zc = grid8.x3[None, None, :] * np.ones(grid8.shape_bulk)
        c = gc * np.cos(TP * s2)
        b = gb * np.cos(TP * s1)[:, :, None] * (zc + 1.0) ** 2
        st = field_state(grid8, box_eq, box_model, c=c, b=b, beta=2.0, gamma=3.0)
        _, D = linear_functionals(st)

        sig0d = box_eq.sigma0_d1
        fp = box_eq.f_d1_b0
        c0 = box_eq.c0
        wc0 = box_eq.omega_c0
        gradb = gb**2 * (TP**2 * 0.5 * (1 / 5) + 0.5 * (4 / 3))
        D_exp = (
            2.0 * (-sig0d * fp / c0) * gradb
            + 3.0 * (-sig0d / c0) * TP**2 * gc**2 / 2
            + (-sig0d * wc0 / c0) * (gc**2 / 2 + fp**2 * gb**2 / 2)
        )
        assert D == pytest.approx(D_exp, rel=1e-13)

    def test_flow_terms_closed_form(self, grid8, box_eq, box_model):
        A = 0.7
        s1, _ = surf_coords(grid8)
        zc = grid8.x3[None, None, :] * np.ones(grid8.shape_bulk)
        u = np.zeros((3,) + grid8.shape_bulk)
        u[0] = A * np.sin(TP * s1)[:, :, None] * (zc + 1.0)
        st = field_state(grid8, box_eq, box_model, u=u)
        E, D = linear_functionals(st)
        # D11 = 2 d1u1, D13 = D31 = d3u1; both index orders are summed
        assert E == pytest.approx(A**2 / 12.0, rel=1e-13)
        D_exp = 0.5 * (4 * A**2 * TP**2 * 0.5 * (1 / 3) + 2 * A**2 * 0.5)
        assert D == pytest.approx(D_exp, rel=1e-13)


class TestGeometricFunctionals:
    def test_equilibrium_is_the_floor(self, grid8, box_eq, box_model, box_aux):
        st = field_state(grid8, box_eq, box_model)
        geo = geometric_functionals(st, box_aux)
        assert abs(geo["E_geo"]) < 1e-12
        assert abs(geo["D_geo"]) < 1e-14
        assert abs(geo["exchange_min"]) < 1e-15
        assert geo["mass_surface"] == pytest.approx(box_eq.c0, rel=1e-13)
        assert geo["mass_bulk"] == pytest.approx(box_eq.b0, rel=1e-13)
        assert geo["E_geo_floor"] > 0.0

    def test_agrees_with_linear_forms_to_first_order(self, grid8, box_eq,
                                                     box_model, box_aux):
        errs_e, errs_d = [], []
        for eps in (1e-2, 5e-3, 2.5e-3):
            st = make_trig_state(grid8, box_model, box_eq, eps)
            geo = geometric_functionals(st, box_aux)
            El, Dl = linear_functionals(st)
            assert geo["E_geo"] > 0.0 and geo["D_geo"] > 0.0
            assert geo["exchange_min"] >= -1e-15
            errs_e.append(abs(geo["E_geo"] / El - 1.0))
            errs_d.append(abs(geo["D_geo"] / Dl - 1.0))
        assert errs_e[0] < 5e-4 and errs_d[0] < 2e-3
        assert errs_e[0] > errs_e[1] > errs_e[2]
        assert errs_d[0] > errs_d[1] > errs_d[2]


class TestSobolevFunctionals:
    def test_single_surface_harmonic_closed_form(self, grid8, box_eq, box_model):
        gc = 0.2
        _, s2 = surf_coords(grid8)
        st = field_state(grid8, box_eq, box_model, c=gc * np.cos(TP * s2))
        E, D = full_functionals(st, zero_rates(grid8))
        base = gc**2 / 2
        assert E == pytest.approx((1 + TP**2) ** 2 * base, rel=1e-12)
        assert D == pytest.approx((1 + TP**2) ** 3 * base, rel=1e-12)

    def test_single_bulk_profile_closed_form(self, grid8, box_eq, box_model):
        gb = 0.4
        s1, _ = surf_coords(grid8)
        zc = grid8.x3[None, None, :] * np.ones(grid8.shape_bulk)
        b = gb * np.cos(TP * s1)[:, :, None] * (zc + 1.0) ** 2
        st = field_state(grid8, box_eq, box_model, b=b)
        E, _ = full_functionals(st, zero_rates(grid8))
        # H^2 with all mixed derivatives of cos(2 pi x1) (z+1)^2:
        # vertical profiles integrate to 1/5, 4/3, 4 at orders 0, 1, 2
        E_exp = (gb**2 / 2) * (
            (1 / 5) * (1 + TP**2 + TP**4) + (4 / 3) * (1 + TP**2) + 4.0
        )
        assert E == pytest.approx(E_exp, rel=1e-12)

    def test_horizontal_family_multiplier(self, grid8, box_eq, box_model):
        # one harmonic at |k| = 2 pi: the derivative family contributes
        # (1 + k^2 + k^4) times the single-mode linear forms
        A = 0.7
        s1, _ = surf_coords(grid8)
        zc = grid8.x3[None, None, :] * np.ones(grid8.shape_bulk)
        u = np.zeros((3,) + grid8.shape_bulk)
        u[0] = A * np.sin(TP * s1)[:, :, None] * (zc + 1.0)
        st = field_state(grid8, box_eq, box_model, u=u)
        E1, D1 = linear_functionals(st)
        Eb, Db = horizontal_functionals(st, zero_rates(grid8))
        mult = 1.0 + TP**2 + TP**4
        assert Eb == pytest.approx(mult * E1, rel=1e-12)
        assert Db == pytest.approx(mult * D1, rel=1e-12)

    def test_positive_and_quadratic_in_linear_mode(self, grid8, box_eq, box_model):
        vals = {}
        for eps in (1e-3, 5e-4):
            st = make_trig_state(grid8, box_model, box_eq, eps)
            rates = evaluate_rhs(st, linear=True)
            ef, df = full_functionals(st, rates)
            eb, db = horizontal_functionals(st, rates)
            for v in (ef, df, eb, db):
                assert v > 0.0
            vals[eps] = (ef, df, eb, db)
        for i in range(4):
            ratio = vals[1e-3][i] / vals[5e-4][i]
            assert 3.98 < ratio < 4.02


class TestBalanceResiduals:
    def test_synthetic_exponential(self):
        ts = np.linspace(0.0, 0.5, 51)
        E = np.exp(-3.0 * ts)
        D = 3.0 * np.exp(-3.0 * ts)
        res = balance_residuals(ts, E, D)
        assert res.shape == ts.shape
        assert np.all(res >= 0.0)
        assert np.max(res[2:-2]) < 1e-7
        assert np.max(res) < 1e-6  # one-sided edge stencils

    def test_requires_seven_reports(self):
        ts = np.linspace(0.0, 0.5, 6)
        with pytest.raises(EnergeticsError, match="seven"):
            balance_residuals(ts, np.exp(-ts), np.exp(-ts))

    def test_requires_uniform_spacing(self):
        ts = np.linspace(0.0, 0.5, 9)
        ts[4] += 1e-3
        with pytest.raises(EnergeticsError, match="uniform"):
            balance_residuals(ts, np.exp(-ts), np.exp(-ts))


def mk_row(t, E, D):
    return EnergyReport(
        t=t, E_geo=E, D_geo=D, E_full=2 * E, D_full=2 * D, E_bar=E, D_bar=D,
        mass_surface=0.4, mass_bulk=0.6, mass_total=1.0, exchange_min=0.0,
        balance_residual=float("nan"), ratio_E=2.0, ratio_D=2.0,
    )


class TestAttachBalance:
    def test_short_series_filled_with_nan(self):
        rows = [mk_row(0.01 * k, 1.0, 3.0) for k in range(5)]
        attach_balance(rows)
        assert all(math.isnan(r.balance_residual) for r in rows)

    def test_matches_direct_computation(self):
        ts = np.linspace(0.0, 0.08, 9)
        rows = [mk_row(t, math.exp(-3 * t), 3 * math.exp(-3 * t)) for t in ts]
        attach_balance(rows)
        ref = balance_residuals(
            ts,
            np.array([r.E_geo for r in rows]),
            np.array([r.D_geo for r in rows]),
        )
        got = np.array([r.balance_residual for r in rows])
        assert np.allclose(got, ref, rtol=0.0, atol=0.0)


class TestFitDecay:
    def test_exact_exponential(self):
        ts = np.linspace(0.0, 2.0, 101)
        lam, r2 = fit_decay(ts, 2.5 * np.exp(-1.7 * ts))
        assert lam == pytest.approx(1.7, abs=1e-12)
        assert r2 > 1.0 - 1e-12

    def test_window_excludes_transient(self):
        ts = np.linspace(0.0, 2.0, 101)
        E = 2.5 * np.exp(-1.7 * ts)
        E[ts < 0.5] *= 7.0  # contaminated early samples
        lam, r2 = fit_decay(ts, E, t_min=0.5)
        assert lam == pytest.approx(1.7, abs=1e-12)
        assert r2 > 1.0 - 1e-12

    def test_rejects_nonpositive_series(self):
        ts = np.linspace(0.0, 1.0, 20)
        with pytest.raises(EnergeticsError, match="positive"):
            fit_decay(ts, -np.ones_like(ts))


class TestReportIO:
    def test_timeseries_roundtrip(self, tmp_path):
        rows = [
            EnergyReport(
                t=0.001 * k,
                E_geo=1.0 / (k + 1), D_geo=2.0 / (k + 1),
                E_full=3.0 + k, D_full=4.0 + k,
                E_bar=5.0 + k, D_bar=6.0 + k,
                mass_surface=0.4 - 1e-5 * k, mass_bulk=0.6 + 1e-5 * k,
                mass_total=1.0, exchange_min=1e-8 * k,
                balance_residual=1e-6 * (k + 1),
                ratio_E=1.5, ratio_D=2.5,
            )
            for k in range(3)
        ]
        path = tmp_path / "timeseries.csv"
        write_timeseries(path, rows)
        with open(path, newline="", encoding="ascii") as fh:
            rdr = csv.reader(fh)
            header = next(rdr)
            data = [[float(v) for v in line] for line in rdr]
        assert header == list(TIMESERIES_COLUMNS)
        for row, rec in zip(data, rows):
            assert tuple(row) == rec.row()

    def test_compute_report_modes(self, grid8, box_eq, box_model, box_aux):
        st = make_trig_state(grid8, box_model, box_eq, 1e-3)
        rates = evaluate_rhs(st)
        rep = compute_report(st, rates, box_aux)
        for name in TIMESERIES_COLUMNS:
            if name == "balance_residual":
                assert math.isnan(getattr(rep, name))
            else:
                assert math.isfinite(getattr(rep, name))
        assert rep.mass_total == rep.mass_surface + rep.mass_bulk
        assert rep.ratio_E == pytest.approx(rep.E_full / rep.E_bar, rel=1e-15)
        geo = geometric_functionals(st, box_aux)
        assert rep.E_geo == pytest.approx(geo["E_geo"], rel=1e-13)

        rep_lin = compute_report(st, evaluate_rhs(st, linear=True), box_aux,
                                 mode="linear")
        El, Dl = linear_functionals(st)
        assert rep_lin.E_geo == pytest.approx(El, rel=1e-13)
        assert rep_lin.D_geo == pytest.approx(Dl, rel=1e-13)
