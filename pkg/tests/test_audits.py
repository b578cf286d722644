import math

import numpy as np
import pytest

from conftest import shear_trajectory, single_element_trajectory
from oracles import uniform_entropy_slacks
from thermoplast import audits
from thermoplast.constitutive import MaterialModel
from thermoplast.errors import ThermoplastError
from thermoplast.mesh_fem import FieldLayout, rectangle_mesh
from thermoplast.stepper import Loads, SolverOptions, initial_state, run


def _run(loads, th0=1.0, n=3, T=0.2, tau=0.02, mat=None, dirichlet="all", **opts):
    lay = FieldLayout(rectangle_mesh(n, n, dirichlet=dirichlet))
    st = initial_state(lay, loads, th0, tau)
    return run(lay, mat or MaterialModel(), st, loads, T, tau, SolverOptions(**opts))


@pytest.fixture(scope="module")
def quiescent():
    return _run(Loads())


@pytest.fixture(scope="module")
def heated():
    return _run(Loads(heat_source=lambda t, x: np.full(len(x), 0.7)), th0=1.2, clamp_mechanics=True)


def test_positivity_bound_examples():
    assert audits.positivity_bound(MaterialModel(coupling=np.zeros(3)), 1.0, 0.8) == 0.8
    assert audits.positivity_bound(MaterialModel(), 1.0, 1.0) == pytest.approx(1 / 1.01, rel=1e-14)
    Ts, ths = np.linspace(0.1, 5, 12), np.linspace(0.1, 3, 12)
    mat = MaterialModel(coupling=np.array([0.3, 0.1, 0.2]))
    vals = np.array([[audits.positivity_bound(mat, T, th) for th in ths] for T in Ts])
    assert np.all(np.diff(vals, axis=0) < 0) and np.all(np.diff(vals, axis=1) > 0)
    with pytest.raises(ValueError):
        audits.positivity_bound(mat, 1.0, 0.0)
    broken = MaterialModel()
    broken.mu_v = np.asarray(0.0)
    with pytest.raises(ThermoplastError):
        audits.positivity_bound(broken, 1.0, 1.0)


def test_quiescent_balances_vanish(quiescent):
    t = audits.energy_terms(quiescent)
    assert abs(audits.check_mechanical_balance(quiescent, terms=t)) <= 1e-12
    assert abs(audits.check_total_balance(quiescent, terms=t)) <= 1e-12
    rep = audits.check_entropy_inequality(quiescent, 1.0)
    assert np.all(rep.step_slack >= 0.0) and rep.worst_pair >= 0.0


def test_quiescent_apriori_rates_vanish(quiescent):
    mon = audits.apriori_monitors(quiescent)
    for k in ("u_rate_L2H1", "e_rate_L2L2", "p_rate_L2L2"):
        assert mon[k] == 0.0
    lay = quiescent.layout
    expected = max(sum(float(m) * float(th) for m, th in zip(lay.mass_lumped, row)) for row in quiescent.theta)
    assert mon["theta_LinfL1"] == pytest.approx(expected, rel=1e-14)


def test_insulated_heated_run(heated):
    t = audits.energy_terms(heated)
    mech = audits.mechanical_step_residuals(t)
    assert np.max(np.abs(mech)) == 0.0
    slack = audits.check_total_balance(heated, terms=t)
    assert abs(slack) <= 1e-10
    heat = heated.theta @ heated.layout.mass_lumped
    np.testing.assert_allclose(heat - heat[0], 0.7 * heated.t, atol=1e-10)
    assert np.all(np.diff(t["thermal"]) >= 0)


def test_uniform_entropy_against_scalar_recursion(heated):
    th = heated.theta.mean(axis=1)
    assert np.ptp(heated.theta, axis=1).max() < 1e-13
    oracle = uniform_entropy_slacks(th, heated.tau, 0.7, heated.layout.volume)
    rep = audits.check_entropy_inequality(heated, 1.0)
    np.testing.assert_allclose(rep.step_slack, oracle, atol=1e-9)
    assert np.all(oracle >= 0.0) and rep.worst_pair >= 0.0


def test_elastic_run_balance():
    lay_loads = Loads(dirichlet=lambda t, x: np.stack([0.3 * t * x[:, 1], 0.1 * t * t * x[:, 0]], 1),
                      dirichlet_rate=lambda t, x: np.stack([0.3 * x[:, 1], 0.2 * t * x[:, 0]], 1),
                      traction=lambda t, x: np.tile([0.05 * t, 0.0], (len(x), 1)))
    mat = MaterialModel(coupling=np.zeros(3), radius=1e6)
    traj = _run(lay_loads, n=4, T=0.5, tau=0.01, mat=mat, dirichlet=("left", "bottom"))
    t = audits.energy_terms(traj)
    assert np.max(np.abs(t["plastic"])) == 0.0
    exact = np.cumsum(audits.mechanical_step_residuals(t, exact=True))
    plain = np.cumsum(audits.mechanical_step_residuals(t))
    assert np.max(np.abs(exact)) <= 1e-8
    assert np.max(plain) <= 1e-8
    total_exact = np.cumsum(audits.total_step_slacks(t, exact=True))
    assert np.max(np.abs(total_exact)) <= 1e-8


def test_single_element_relative_residual():
    traj = single_element_trajectory(1e-3, tol_outer=1e-10)
    t = audits.energy_terms(traj)
    res = np.cumsum(audits.mechanical_step_residuals(t, exact=True))
    scale = max(np.max(np.abs(np.cumsum(t[k]))) for k in ("viscous", "plastic", "dirichlet_work"))
    assert np.max(np.abs(res)) / scale <= 1e-6
    gate = audits.balance_gate(traj)
    assert np.max(np.abs(np.cumsum(audits.mechanical_step_residuals(t)))) <= gate


def test_ledger_additivity(small_shear_run):
    traj = small_shear_run
    t = audits.energy_terms(traj)
    K = traj.n_steps
    for s, m, u in ((0, 10, K), (3, 17, 40), (5, 5, 30)):
        for fn in (audits.check_mechanical_balance, audits.check_total_balance):
            whole = fn(traj, s, u, terms=t)
            parts = fn(traj, s, m, terms=t) + fn(traj, m, u, terms=t)
            assert whole == pytest.approx(parts, rel=1e-12, abs=1e-15)
    with pytest.raises(ValueError):
        audits.check_mechanical_balance(traj, 5, 2, terms=t)


def test_small_shear_gates(small_shear_run):
    traj = small_shear_run
    t = audits.energy_terms(traj)
    gate = audits.balance_gate(traj)
    assert np.max(np.abs(np.cumsum(audits.mechanical_step_residuals(t)))) <= gate
    assert np.max(np.abs(np.cumsum(audits.total_step_slacks(t)))) <= gate
    flow = audits.check_flow_rule(traj, every=5)
    assert flow["competitor_slack"] >= -1e-10 and flow["self_slack"] >= -1e-10
    assert traj.theta.min() >= traj.theta_bar - 1e-9


def test_entropy_rejects_nonpositive_phi(small_shear_run):
    with pytest.raises(ValueError):
        audits.check_entropy_inequality(small_shear_run, 0.0)


def test_entropy_hat_and_modulated(small_shear_run):
    traj = small_shear_run

    def hat(t, x):
        return 0.1 + np.maximum(0.0, 1.0 - 2.0 * np.max(np.abs(x - 0.5), axis=1))

    def modulated(t, x):
        return (1.0 + 0.5 * math.sin(2 * math.pi * t)) * (1.0 + 0.5 * x[:, 0])

    for phi in (hat, modulated):
        rep = audits.check_entropy_inequality(traj, phi)
        assert rep.worst_pair >= -1e-7 * rep.scale


def test_apriori_norms_stable_under_refinement():
    a = audits.apriori_monitors(shear_trajectory(n=4, tau=1e-2, T=0.5))
    b = audits.apriori_monitors(shear_trajectory(n=4, tau=5e-3, T=0.5))
    for k in a:
        if a[k] > 0:
            assert 0.5 <= b[k] / a[k] <= 2.0, k


def test_ledger_layout(small_shear_run):
    led = audits.build_ledger(small_shear_run, {"hat": lambda t, x: 1.0 + x[:, 0]})
    names = led.names()
    assert tuple(names[: len(audits.LEDGER_COLUMNS)]) == audits.LEDGER_COLUMNS
    assert names[-1] == "entropy_slack_hat"
    assert led.n_rows == small_shear_run.n_steps + 1
    assert all(np.isfinite(led.row(k)).all() for k in range(led.n_rows))
    for col in ("kinetic", "elastic", "thermal"):
        assert np.all(led.columns[col] >= 0)


def test_power_law_mode_inequality_direction():
    traj = single_element_trajectory(0.01, T=0.5, gamma=4.5)
    t = audits.energy_terms(traj)
    res = np.cumsum(audits.mechanical_step_residuals(t))
    assert np.max(res) <= audits.balance_gate(traj)
