import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moldflux.errors import InvalidArgument, SingularMatrix, SolverFailure
from moldflux.fvm import PhysicalParams, TimeGrid, solve_direct
from moldflux.mesh import Geometry, build_structured_mesh
from moldflux.offline import build_offline
from moldflux.online import (ALPHA_GAP, TSVD, IllConditionedWarning, InverseConfig, MeasurementSeries,
                             NormalEquations, reconstruct_inner, reconstruct_temperature, run_sequential_inversion,
                             solve_ic_problem, solve_weights_constant, solve_weights_linear)
from moldflux.rbf import CONSTANT, LINEAR, RbfBasis, SensorArray, WeightsTimeline, flux_function, uniform_sensor_grid


@pytest.fixture(scope="module")
def setup():
    g = Geometry()
    mesh = build_structured_mesh(g, 10, 3, 6)
    sensors = uniform_sensor_grid(g, 3, 2, 0.02)
    basis = RbfBasis.from_sensors(sensors, mesh, 3.0)
    tg = TimeGrid(t_f=4.0, dt=0.25, f_samp=1.0)
    params = PhysicalParams()
    off = build_offline(mesh, params, tg, basis, sensors, store_inner=True)
    return mesh, sensors, basis, tg, params, off


def _truth_timeline(tg, P, time_basis, seed=3):
    rng = np.random.default_rng(seed)
    tl = WeightsTimeline(tg.measurement_times, P, time_basis, w0=np.zeros(P))
    for k in range(1, tg.n_meas + 1):
        tl.set(k, -1e6 * (1.0 + rng.random(P)))
    return tl


def _data(setup, tl):
    mesh, sensors, basis, tg, params, _ = setup
    res = solve_direct(mesh, params, tg, flux_function(basis, tl), probes=sensors.points)
    return MeasurementSeries(sensors, tg.measurement_times[1:], res.probes)


@pytest.mark.parametrize("time_basis", [CONSTANT, LINEAR])
def test_in_span_flux_recovered(setup, time_basis):
    mesh, sensors, basis, tg, params, off = setup
    tl = _truth_timeline(tg, basis.P, time_basis)
    sol = run_sequential_inversion(mesh, params, tg, basis, InverseConfig(time_basis=time_basis),
                                   _data(setup, tl), offline=off)
    assert sol.ok and sol.completed == 4
    W_true = np.array([tl.w(k) for k in range(1, 5)])
    W = np.array([sol.timeline.w(k) for k in range(1, 5)])
    assert np.max(np.abs(W - W_true)) <= 1e-6 * np.max(np.abs(W_true))
    assert np.all(sol.S1 <= 1e-12)


def test_lu_and_tsvd_full_rank_agree(setup, rng):
    off = setup[5]
    cfg_lu = InverseConfig(time_basis=LINEAR)
    cfg_ts = InverseConfig(time_basis=LINEAR, regularizer=TSVD, alpha=6)
    T_hat, T_ic, w_prev = 350 + rng.random(6), np.full(6, 350.0), rng.normal(size=6)
    a = solve_weights_linear(off, cfg_lu, T_hat, T_ic, w_prev)
    b = solve_weights_linear(off, cfg_ts, T_hat, T_ic, w_prev)
    assert np.allclose(a, b, rtol=1e-8)


def test_tsvd_gap_alpha_is_recorded(setup):
    ne = NormalEquations(setup[5], InverseConfig(regularizer=TSVD, alpha=ALPHA_GAP))
    assert 1 <= ne.alpha <= 6
    assert ne.condition == pytest.approx(ne._svd.sigma[0] / ne._svd.sigma[ne.alpha - 1])


def test_regularization_shrinks_weights(setup, rng):
    off = setup[5]
    T_hat, T_ic = 350 - rng.random(6), np.full(6, 350.0)
    norms = [np.linalg.norm(solve_weights_constant(off, InverseConfig(time_basis=CONSTANT, p_g=p), T_hat, T_ic))
             for p in (0.0, 1e-9, 1e-7, 1e-5)]
    assert all(b < a for a, b in zip(norms, norms[1:]))


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_weights_linear_in_data(setup, a, b):
    off = setup[5]
    cfg = InverseConfig(time_basis=CONSTANT)
    y1, y2 = np.linspace(-1, 1, 6), np.cos(np.arange(6.0))
    zero = np.zeros(6)
    w1 = solve_weights_constant(off, cfg, y1, zero)
    w2 = solve_weights_constant(off, cfg, y2, zero)
    w = solve_weights_constant(off, cfg, a * y1 + b * y2, zero)
    assert np.allclose(w, a * w1 + b * w2, rtol=1e-8, atol=1e-8 * (np.abs(w1).max() + np.abs(w2).max()))


def test_basis_mismatch_rejected(setup):
    off = setup[5]
    with pytest.raises(InvalidArgument):
        solve_weights_constant(off, InverseConfig(time_basis=LINEAR), np.zeros(6), np.zeros(6))
    with pytest.raises(InvalidArgument):
        solve_weights_linear(off, InverseConfig(time_basis=CONSTANT), np.zeros(6), np.zeros(6), np.zeros(6))


@pytest.mark.parametrize("kw", [dict(time_basis="quadratic"), dict(p_g=-1.0), dict(p_g=np.nan),
                                dict(regularizer="QR"), dict(regularizer=TSVD), dict(regularizer=TSVD, alpha=0),
                                dict(regularizer=TSVD, alpha=1.5), dict(on_ill_conditioned="shout")])
def test_config_validation(kw):
    with pytest.raises(InvalidArgument):
        InverseConfig(**kw)


def test_alpha_above_rank(setup):
    with pytest.raises(InvalidArgument):
        NormalEquations(setup[5], InverseConfig(regularizer=TSVD, alpha=7))


def test_ill_conditioned_policy():
    g = Geometry()
    mesh = build_structured_mesh(g, 10, 3, 6)
    # two sensors 1 nm apart give a nearly rank-deficient normal matrix
    sensors = SensorArray(np.array([[0.5, 0.02, 0.5], [0.5 + 1e-9, 0.02, 0.5], [1.5, 0.02, 0.7]]))
    basis = RbfBasis.from_sensors(sensors, mesh, 3.0)
    off = build_offline(mesh, PhysicalParams(), TimeGrid(t_f=1.0, dt=0.5), basis, sensors)
    with pytest.warns(IllConditionedWarning):
        NormalEquations(off, InverseConfig())
    with pytest.raises(SingularMatrix):
        NormalEquations(off, InverseConfig(on_ill_conditioned="raise"))


def test_ic_problem_equilibrium(setup):
    mesh, sensors, basis, tg, params, off = setup
    ic = solve_ic_problem(mesh, params, tg, np.full(mesh.n_cells, params.T_f), off.probe, store_inner=True)
    assert np.allclose(ic.final, params.T_f, rtol=1e-13)
    assert ic.inner.shape == (4, mesh.n_cells)
    with pytest.raises(InvalidArgument):
        solve_ic_problem(mesh, params, tg, np.zeros(3), off.probe)


def test_reconstruct_inner_ends_at_final(setup, rng):
    mesh, sensors, basis, tg, params, off = setup
    T0 = 350 + rng.random(mesh.n_cells)
    ic = solve_ic_problem(mesh, params, tg, T0, off.probe, store_inner=True)
    w, wp = rng.normal(size=6) * 1e5, rng.normal(size=6) * 1e5
    for tb in (CONSTANT, LINEAR):
        inner = reconstruct_inner(off, tb, w, wp, ic.inner)
        assert np.allclose(inner[-1], reconstruct_temperature(off, tb, w, wp, ic.final), rtol=1e-13)


def test_reconstruct_inner_matches_direct(setup, rng):
    mesh, sensors, basis, tg, params, off = setup
    tl = _truth_timeline(tg, 6, LINEAR)
    full = solve_direct(mesh, params, TimeGrid(t_f=2.0, dt=tg.dt), flux_function(basis, tl), store="all")
    T1 = full.trajectory.at(1.0)
    ic = solve_ic_problem(mesh, params, tg, T1, off.probe, store_inner=True)
    inner = reconstruct_inner(off, LINEAR, tl.w(2), tl.w(1), ic.inner)
    for n, s in enumerate(off.inner_times):
        ref = full.trajectory.at(1.0 + s)
        assert np.max(np.abs(inner[n] - ref)) <= 1e-9 * np.max(np.abs(ref - 350))


def test_failure_mid_run_keeps_prefix(setup, monkeypatch):
    mesh, sensors, basis, tg, params, off = setup
    data = _data(setup, _truth_timeline(tg, 6, LINEAR))
    orig = NormalEquations.solve
    calls = {"n": 0}

    def flaky(self, c):
        calls["n"] += 1
        if calls["n"] == 3:
            raise SolverFailure("injected")
        return orig(self, c)

    monkeypatch.setattr(NormalEquations, "solve", flaky)
    sol = run_sequential_inversion(mesh, params, tg, basis, InverseConfig(), data, offline=off)
    assert not sol.ok and sol.completed == 2 and "interval 3" in sol.error
    assert len(sol.fields) == 2 and np.isnan(sol.S1[2])
    assert sol.timeline.n_filled == 2


def test_diagnostics_consistent(setup, tmp_path):
    mesh, sensors, basis, tg, params, off = setup
    data = _data(setup, _truth_timeline(tg, 6, LINEAR))
    noisy = data.with_values(data.values + 0.01 * np.sin(np.arange(24.0)).reshape(4, 6))
    cfg = InverseConfig(p_g=1e-9)
    sol = run_sequential_inversion(mesh, params, tg, basis, cfg, noisy, offline=off)
    assert np.allclose(sol.S1, 0.5 * sol.residual_norm ** 2, rtol=1e-12)
    assert np.all(sol.S2 >= sol.S1)
    sol.write_diagnostics_csv(tmp_path / "d.csv")
    assert len((tmp_path / "d.csv").read_text().splitlines()) == 5


def test_grid_mismatch(setup):
    mesh, sensors, basis, tg, params, off = setup
    series = MeasurementSeries(sensors, np.arange(1.0, 4.0), np.zeros((3, 6)))
    with pytest.raises(InvalidArgument):
        run_sequential_inversion(mesh, params, tg, basis, InverseConfig(), series, offline=off)


def test_measurement_csv_round_trip(setup, tmp_path):
    sensors = setup[1]
    s = MeasurementSeries(sensors, [1.0, 2.0], np.arange(12.0).reshape(2, 6) + 0.1)
    s.to_csv(tmp_path / "m.csv", header="run test")
    r = MeasurementSeries.from_csv(tmp_path / "m.csv")
    assert np.array_equal(r.values, s.values) and np.array_equal(r.times, s.times)
    assert np.array_equal(r.sensors.points, sensors.points)
    assert r.restrict([2.0]).values.tolist() == [s.values[1].tolist()]
    with pytest.raises(InvalidArgument):
        r.restrict([1.5])


@pytest.mark.parametrize("body", [
    "k,t,sensor,T\n1,1.0,1,350\n",
    "k,tau_s,sensor_id,temperature_K\n1,1.0,1,350\n3,3.0,1,350\n",
    "k,tau_s,sensor_id,temperature_K\n1,1.0,1,350\n",
    "k,tau_s,sensor_id,temperature_K\n1,1.0,9,350\n",
    "k,tau_s,sensor_id,temperature_K\n",
])
def test_measurement_csv_rejects(tmp_path, body):
    sensors = SensorArray(np.array([[0.5, 0.02, 0.5], [1.0, 0.02, 0.5]]))
    (tmp_path / "m.csv").write_text(body)
    with pytest.raises(InvalidArgument):
        MeasurementSeries.from_csv(tmp_path / "m.csv", sensors)


def test_series_validation(setup):
    sensors = setup[1]
    with pytest.raises(InvalidArgument):
        MeasurementSeries(sensors, [1.0], np.zeros((1, 5)))
    with pytest.raises(InvalidArgument):
        MeasurementSeries(sensors, [2.0, 1.0], np.zeros((2, 6)))
    with pytest.raises(InvalidArgument):
        MeasurementSeries(sensors, [1.0], np.full((1, 6), np.inf))
