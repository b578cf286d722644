import math

import numpy as np
import pytest

from oracles import pp_shear_brute_force, pp_shear_closed_form
from thermoplast import tensor_core as tc
from thermoplast.constitutive import MaterialModel
from thermoplast.mesh_fem import FieldLayout, rectangle_mesh
from thermoplast.perfect_plasticity import (PerfectPlasticity, QuasistaticState, energy_balance_history,
                                            check_energy_balance_E, var_R)
from thermoplast.scenarios import shear_loads
from thermoplast.stepper import Loads

SQ2 = math.sqrt(2.0)


def solver(n=1, dirichlet="all", rate=0.8, loads=None, mat=None):
    lay = FieldLayout(rectangle_mesh(n, n, dirichlet=dirichlet))
    return PerfectPlasticity(lay, mat or MaterialModel(), loads or shear_loads(rate))


@pytest.fixture(scope="module")
def element_run():
    sol = solver()
    return sol.run(np.linspace(0.0, 1.0, 41))


@pytest.fixture(scope="module")
def block_run():
    return solver(4, ("bottom", "top")).run(np.linspace(0.0, 1.0, 21))


def test_sub_yield_is_elastic():
    sol = solver(3, ("bottom", "top"), rate=0.1)
    traj = sol.run(np.linspace(0.0, 1.0, 5))
    assert np.all(traj.field("p") == 0.0)
    for st in traj.states:
        rep = sol.stability_check(st, st.t)
        assert rep["passed"] and rep["margin_K"] < 0


def test_closed_form_matches_brute_force():
    p_prev = 0.0
    for t in (0.1, 0.3, 0.5, 0.9):
        e_cf, p_cf = pp_shear_closed_form(t)
        e_bf, p_bf, h = pp_shear_brute_force(t, p_prev)
        assert abs(e_cf - e_bf) <= h and abs(p_cf - p_bf) <= h
        p_prev = p_cf


def test_single_element_closed_form(element_run):
    for st in element_run.states:
        e_xy, p_xy = pp_shear_closed_form(st.t)
        np.testing.assert_allclose(st.e, np.broadcast_to([0, 0, SQ2 * e_xy], st.e.shape), atol=1e-10)
        np.testing.assert_allclose(st.p, np.broadcast_to([0, 0, SQ2 * p_xy], st.p.shape), atol=1e-10)


def test_single_element_energy_bookkeeping(element_run):
    # left rule: residual = sum Q(de) + sum (R(dp) - sigma_prev : dp), from the closed form
    mu, r = 1.0, 0.3
    acc, expected = 0.0, [0.0]
    prev = pp_shear_closed_form(0.0)
    for t in element_run.t[1:]:
        cur = pp_shear_closed_form(t)
        de, dp = cur[0] - prev[0], cur[1] - prev[1]
        q_de = 2 * mu * de ** 2                        # Q of a pure shear increment, unit area
        diss = r * SQ2 * abs(dp) - 2 * mu * prev[0] * 2 * dp
        acc += q_de + diss
        expected.append(acc)
        prev = cur
    hist = energy_balance_history(element_run, "left")
    np.testing.assert_allclose(hist, expected, atol=1e-8)
    assert hist[-1] > 0


def test_two_initializations_agree(block_run, rng):
    sol = block_run.solver
    prev = block_run.states[10]
    a = sol.incremental_solve(prev, 0.6)
    guess = prev.u + 0.05 * rng.standard_normal(prev.u.shape)
    b = sol.incremental_solve(prev, 0.6, u_init=guess)
    assert np.max(np.abs(a.u - b.u)) <= 1e-9
    assert np.max(np.abs(a.p - b.p)) <= 1e-9


def test_inflated_state_fails_admissibility(element_run):
    sol = element_run.solver
    st = element_run.states[-1]
    rep = sol.stability_check(st, st.t)
    assert rep["passed"]
    delta = 0.05
    sd = tc.dev(sol.mat.elastic(st.e))
    bad = QuasistaticState(st.t, st.u, st.e + delta / 2.0 * sd / tc.norm(sd)[:, None], st.p)
    rep = sol.stability_check(bad, st.t)
    assert not rep["passed"]
    assert rep["margin_K"] == pytest.approx(delta, abs=1e-9)


def test_equilibrated_safe_load_state_passes():
    rho = lambda t, x: np.tile([0.05, -0.05, 0.02], (len(x), 1))
    sol = solver(3, ("left",), loads=Loads(safe_load=rho))
    st = sol.initial_state()
    rep = sol.stability_check(st, 0.0)
    assert rep["passed"] and rep["margin_K"] < 0
    assert rep["equilibrium"] <= 1e-10


def test_var_R_examples():
    lay = FieldLayout(rectangle_mesh(2, 2, dirichlet="all"))
    p0 = np.zeros((lay.n_cells, 3))
    dp = np.tile([0.1, -0.1, 0.3], (lay.n_cells, 1))
    assert var_R(lay, 0.3, [p0, p0, p0]) == 0.0
    assert var_R(lay, 0.3, [p0, dp]) == pytest.approx(0.3 * float(tc.norm(dp[0])) * lay.volume)
    ramp = lambda n: [s * dp for s in np.linspace(0, 1, n)]
    assert var_R(lay, 0.3, ramp(7)) == pytest.approx(var_R(lay, 0.3, ramp(13)), rel=1e-14)
    with pytest.raises(ValueError):
        var_R(lay, 0.3, [p0])


def test_elastic_energy_balance_trapezoid():
    loads = Loads(dirichlet=lambda t, x: np.stack([0.1 * t * x[:, 1], 0.0 * x[:, 0]], 1),
                  traction=lambda t, x: np.tile([0.02 * t, -0.01 * t], (len(x), 1)))
    sol = solver(4, ("bottom",), loads=loads)
    traj = sol.run(np.linspace(0.0, 1.0, 11))
    assert np.all(traj.field("p") == 0.0)
    assert abs(check_energy_balance_E(traj, rule="trapezoid")) <= 1e-9
    assert np.max(np.abs(energy_balance_history(traj, "trapezoid"))) <= 1e-9


def test_minimality_against_competitors(block_run, rng):
    assert_minimal(block_run, 12, rng, 100)


def assert_minimal(traj, k, rng, n_comp, tol=1e-9):
    sol = traj.solver
    lay, mat = sol.lay, sol.mat
    prev, st = traj.states[k - 1], traj.states[k]
    L = sol.load_at(st.t)
    w = sol.loads.dirichlet_field(lay, st.t)
    f = lay.free_dofs
    V = tc.dev_basis()

    def energy(u, p):
        e = lay.sym_grad(u) - p
        q = 0.5 * np.dot(lay.areas, tc.inner(mat.elastic(e), e))
        return q + np.dot(lay.areas, mat.radius * tc.norm(p - prev.p)) - np.dot(L[f], (u - w)[f])

    base = energy(st.u, st.p)
    worst = np.inf
    for i in range(n_comp):
        scale = 10.0 ** rng.uniform(-6, -1)
        du = np.zeros(lay.ndof)
        du[f] = scale * rng.standard_normal(len(f))
        dp = scale * rng.standard_normal((lay.n_cells, 2)) @ V.T
        worst = min(worst, energy(st.u + du, st.p + dp) - base)
    assert worst >= -tol
    return worst


def test_rate_independence(rng):
    base = shear_loads(0.8)
    sol_a = solver(3, ("bottom", "top"), loads=base)
    ta = sol_a.run(np.linspace(0.0, 1.0, 11))
    warped = Loads(dirichlet=lambda s, x: base.dirichlet(s * s, x))
    sol_b = solver(3, ("bottom", "top"), loads=warped)
    tb = sol_b.run(np.sqrt(ta.t))
    for a, b in zip(ta.states, tb.states):
        assert np.max(np.abs(a.u - b.u)) <= 1e-12
        assert np.max(np.abs(a.p - b.p)) <= 1e-12


def test_increment_size_shrinks_linearly():
    sol = solver(3, ("bottom", "top"))
    jumps = []
    for n in (10, 20, 40):
        e = sol.run(np.linspace(0.0, 1.0, n + 1)).field("e")
        jumps.append(np.max(np.abs(np.diff(e, axis=0))))
    r1, r2 = jumps[1] / jumps[0], jumps[2] / jumps[1]
    assert 0.35 <= r1 <= 0.65 and 0.35 <= r2 <= 0.65
