"""Perturbation dynamics: forcings, rate solves, stepping, and checkpoints."""

import numpy as np
import pytest

from surfwave.analysis import slowest_eigenvector
from surfwave.discretization import Grid
from surfwave.dynamics import (
    DynamicsError,
    FlowState,
    GuardError,
    SchemeConfig,
    Stepper,
    assemble_F,
    assemble_G,
    evaluate_rhs,
    project_initial_data,
    read_checkpoint,
    run,
    step,
    surfactant_mass,
    write_checkpoint,
)
from surfwave.geometry import build_geometry, build_geometry_rates

from conftest import embed_mode_zero, make_trig_state, trig_shapes


def zero_state(grid, eq, model, beta=1.0, gamma=1.0):
    zb, zs = grid.shape_bulk, grid.shape_surface
    return FlowState(
        grid, eq, model, beta, gamma, 0.0,
        np.zeros((3,) + zb), np.zeros(zb), np.zeros(zs), np.zeros(zs), np.zeros(zb),
    )


def bundle_norms(grid, bundle):
    out = {}
    for name in ("G1", "G2", "G3", "G4", "G5", "G6", "G7"):
        arr = np.asarray(getattr(bundle, name))
        comps = arr if arr.ndim > arr.ndim - 1 and arr.shape[0] == 3 and name in ("G1", "G3") else [arr]
        for i, comp in enumerate(comps):
            if comp.ndim == 3:
                val = np.sqrt(grid.int_bulk(comp**2))
            else:
                val = np.sqrt(grid.int_surface(comp**2))
            out[f"{name}_{i}" if len(comps) > 1 else name] = val
    return out


class TestEquilibriumState:
    def test_forcings_vanish(self, grid8, box_eq, box_model):
        state = zero_state(grid8, box_eq, box_model)
        G = assemble_G(state)
        for name in ("G1", "G2", "G3", "G4", "G5", "G6", "G7"):
            assert np.max(np.abs(getattr(G, name))) < 1e-13
        rates = evaluate_rhs(state)
        F = assemble_F(state, rates)
        for name in ("G1", "G2", "G3", "G4", "G5", "G6", "G7"):
            assert np.max(np.abs(getattr(F, name))) < 1e-12

    def test_rates_vanish(self, grid8, box_eq, box_model):
        state = zero_state(grid8, box_eq, box_model)
        rates = evaluate_rhs(state)
        assert np.max(np.abs(rates.u_t)) < 1e-12
        assert np.max(np.abs(rates.eta_t)) < 1e-13
        assert np.max(np.abs(rates.c_t)) < 1e-12
        assert np.max(np.abs(rates.b_t)) < 1e-12

    def test_equilibrium_is_fixed_point(self, grid8, box_eq, box_model):
        state = zero_state(grid8, box_eq, box_model)
        cfg = SchemeConfig(dt=1e-3, t_end=0.0)
        out = step(state, cfg)
        assert np.max(np.abs(out.c)) < 1e-13
        assert np.max(np.abs(out.u)) < 1e-13


class TestQuadraticScaling:
    def test_forcing_bundles_scale(self, grid8, box_eq, box_model):
        eps = 1e-2
        norms = []
        for e in (eps, eps / 2):
            state = make_trig_state(grid8, box_model, box_eq, e)
            norms.append(bundle_norms(grid8, assemble_G(state)))
        for key, hi in norms[0].items():
            lo = norms[1][key]
            if hi < 1e-13:
                continue
            assert 3.0 < hi / lo < 5.5, f"{key}: {hi / lo}"


class TestMassConservation:
    def test_semi_discrete_rate_vanishes(self, grid8, box_eq, box_model):
        state = make_trig_state(grid8, box_model, box_eq, 1e-3)
        cache = state.geometry
        rates = evaluate_rhs(state)
        grates = build_geometry_rates(grid8, cache, rates.eta_t)
        ms_rate = grid8.int_surface(
            rates.c_t * cache.sqrt_metric + state.c_tilde * grates.s_t
        )
        mb_rate = grid8.int_bulk(grates.J_t * state.b_tilde + cache.J * rates.b_t)
        assert abs(ms_rate + mb_rate) < 1e-14

    def test_surfactant_mass_matches_integrals(self, grid8, box_eq, box_model):
        state = make_trig_state(grid8, box_model, box_eq, 1e-3)
        ms, mb = surfactant_mass(state)
        cache = state.geometry
        assert ms == pytest.approx(grid8.int_surface(state.c_tilde * cache.sqrt_metric))
        assert mb == pytest.approx(grid8.int_bulk(cache.J * state.b_tilde))
        assert ms + mb == pytest.approx(box_eq.M, rel=1e-12)

    def test_thousand_steps_drift(self, grid8, box_eq, box_model):
        state = make_trig_state(grid8, box_model, box_eq, 1e-3)
        cfg = SchemeConfig(dt=1e-3, t_end=0.05)
        stp = Stepper(grid8, box_eq, box_model, 1.0, 1.0, cfg)
        for _ in range(50):
            state = stp.advance(state)
        ms, mb = surfactant_mass(state)
        assert abs(ms + mb - box_eq.M) / box_eq.M < 1e-12


@pytest.fixture(scope="module")
def eigenpair(box_eq, box_model):
    grid = Grid(1.0, 1.0, 1.0, 4, 4, 16)
    mode, mu, vec = slowest_eigenvector(box_eq, grid)
    state = embed_mode_zero(grid, box_eq, box_model, vec, 1e-4)
    return grid, float(mu.real), state


class TestLinearConsistency:

    def test_rates_match_eigenvalue(self, eigenpair):
        grid, mu, state = eigenpair
        rates = evaluate_rhs(state, linear=True)
        scale = np.max(np.abs(state.c))
        assert np.max(np.abs(rates.c_t - mu * state.c)) < 1e-9 * scale
        assert np.max(np.abs(rates.b_t - mu * state.b)) < 1e-6 * scale
        assert np.max(np.abs(rates.eta_t)) < 1e-10 * scale
        assert np.max(np.abs(rates.u_t)) < 1e-7 * scale

    def test_stepper_tracks_exponential(self, eigenpair):
        grid, mu, state = eigenpair
        dt, nsteps = 1e-3, 200
        cfg = SchemeConfig(dt=dt, t_end=nsteps * dt, mode="linear")
        stp = Stepper(grid, state.eq, state.model, 1.0, 1.0, cfg)
        out = state
        for _ in range(nsteps):
            out = stp.advance(out)
        t = nsteps * dt
        ratio = np.max(np.abs(out.c)) / np.max(np.abs(state.c))
        # trapezoidal phase error: log-slope off by ~ (mu dt)^2 / 12
        assert np.log(ratio) == pytest.approx(mu * t, rel=1e-5)

    def test_linear_nonlinear_agree_near_equilibrium(self, grid8, box_eq, box_model):
        init = make_trig_state(grid8, box_model, box_eq, 1e-6)
        outs = {}
        for mode in ("linear", "nonlinear"):
            cfg = SchemeConfig(dt=1e-3, t_end=5e-3, mode=mode)
            stp = Stepper(grid8, box_eq, box_model, 1.0, 1.0, cfg)
            state = init
            for _ in range(5):
                state = stp.advance(state)
            outs[mode] = state
        diff = np.max(np.abs(outs["linear"].c - outs["nonlinear"].c))
        assert diff < 1e-10


class TestGuards:
    def test_advective_dt_guard(self, grid8, box_eq, box_model):
        state = zero_state(grid8, box_eq, box_model)
        fast = state.with_fields(u=0.5 * np.ones((3,) + grid8.shape_bulk))
        cfg = SchemeConfig(dt=1e-2, t_end=1e-2)
        stp = Stepper(grid8, box_eq, box_model, 1.0, 1.0, cfg)
        with pytest.raises(GuardError, match="stability"):
            stp.advance(fast)

    def test_mass_drift_guard(self, grid8, box_eq, box_model):
        state = zero_state(grid8, box_eq, box_model)
        off = state.with_fields(c=state.c + 0.1)
        cfg = SchemeConfig(dt=1e-3, t_end=1e-3)
        stp = Stepper(grid8, box_eq, box_model, 1.0, 1.0, cfg)
        with pytest.raises(GuardError, match="mass"):
            stp.advance(off)

    def test_run_reports_guard_abort(self, grid8, box_eq, box_model):
        state = zero_state(grid8, box_eq, box_model)
        fast = state.with_fields(u=0.5 * np.ones((3,) + grid8.shape_bulk))
        summary = run(fast, SchemeConfig(dt=1e-2, t_end=0.1))
        assert summary.termination == "guard_abort"
        assert summary.steps == 0
        assert len(summary.guard_log) == 1


class TestProjection:
    def test_rejects_mass_mismatch(self, grid8, box_eq, box_model):
        u, eta, c, b = trig_shapes(grid8)
        with pytest.raises(DynamicsError, match="mass"):
            project_initial_data(
                grid8, box_eq, box_model, 1.0, 1.0,
                1e-3 * u, 1e-3 * eta, box_eq.c0 + 1e-3 * c + 0.05, box_eq.b0 + 1e-3 * b,
            )

    def test_constraints_hold(self, grid8, box_eq, box_model):
        state = make_trig_state(grid8, box_model, box_eq, 1e-2)
        # transformed divergence vanishes row by row in the per-mode sense:
        # flat divergence equals the dealiased geometric remainder in every
        # collocation row except the redundant bottom row of the mean mode,
        # which the KKT system drops and which absorbs the compatibility slack.
        cache = state.geometry
        from surfwave.geometry import div_A

        div_hat = grid8.to_hat(grid8.dealias(div_A(grid8, cache, state.u)))
        slack = abs(div_hat[0, 0, -1])
        div_hat[0, 0, -1] = 0.0
        assert np.max(np.abs(div_hat)) < 1e-10
        assert slack < 1e-2  # O(eps^2) compatibility defect, not enforced
        assert np.max(np.abs(state.u[:, :, :, -1])) < 1e-12  # bottom no-slip
        assert abs(np.mean(state.eta)) < 1e-15
        ms, mb = surfactant_mass(state)
        assert abs(ms + mb - box_eq.M) < 1e-10


class TestRunLoop:
    def test_report_and_checkpoint_cadence(self, grid8, box_eq, box_model):
        state = make_trig_state(grid8, box_model, box_eq, 1e-4)

        class Recorder:
            def __init__(self):
                self.report_times = []
                self.checkpoint_times = []

            def report(self, st, rates):
                self.report_times.append(st.t)

            def checkpoint(self, st):
                self.checkpoint_times.append(st.t)

        rec = Recorder()
        cfg = SchemeConfig(dt=1e-3, t_end=0.01, output_interval=2e-3,
                           checkpoint_interval=5e-3)
        summary = run(state, cfg, rec)
        assert summary.termination == "completed"
        assert summary.steps == 10
        assert rec.report_times == pytest.approx([0.0, 2e-3, 4e-3, 6e-3, 8e-3, 1e-2])
        assert rec.checkpoint_times == pytest.approx([5e-3, 1e-2])
        assert summary.reports_emitted == 6
        assert summary.checkpoints_emitted == 2

    def test_fractional_step_count_rejected(self, grid8, box_eq, box_model):
        state = zero_state(grid8, box_eq, box_model)
        with pytest.raises(DynamicsError, match="integer"):
            run(state, SchemeConfig(dt=1e-3, t_end=0.0105))


class TestCheckpoints:
    def test_roundtrip_bit_identical(self, grid8, box_eq, box_model, tmp_path):
        state = make_trig_state(grid8, box_model, box_eq, 1e-3).with_fields(t=0.375)
        path = tmp_path / "chk.dat"
        write_checkpoint(path, state)
        back = read_checkpoint(path, grid8, box_eq, box_model, 1.0, 1.0)
        assert back.t == state.t
        for name in ("u", "p", "eta", "c", "b"):
            assert np.array_equal(getattr(back, name), getattr(state, name))

    def test_bad_magic_rejected(self, grid8, box_eq, box_model, tmp_path):
        path = tmp_path / "junk.dat"
        path.write_bytes(b"NOPE!" + bytes(64))
        with pytest.raises(DynamicsError, match="magic"):
            read_checkpoint(path, grid8, box_eq, box_model, 1.0, 1.0)

    def test_grid_mismatch_rejected(self, grid8, grid16, box_eq, box_model, tmp_path):
        state = make_trig_state(grid8, box_model, box_eq, 1e-3)
        path = tmp_path / "chk.dat"
        write_checkpoint(path, state)
        with pytest.raises(DynamicsError, match="grid"):
            read_checkpoint(path, grid16, box_eq, box_model, 1.0, 1.0)
