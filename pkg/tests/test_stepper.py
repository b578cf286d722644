import math

import numpy as np
import pytest

from conftest import relative_errors, single_element_trajectory
from thermoplast import scenarios, tensor_core as tc
from thermoplast.constitutive import MaterialModel
from thermoplast.errors import NonConvergenceError
from thermoplast.mesh_fem import FieldLayout, rectangle_mesh
from thermoplast.stepper import (Loads, SolverOptions, initial_state, run, sample_local_means, simpson_mean,
                                 solve_step, step_loads)


def test_local_means_examples():
    np.testing.assert_allclose(sample_local_means(lambda t: 2.5, 0.1, 4), 2.5)
    lin = sample_local_means(lambda t: t, 0.1, 5)
    np.testing.assert_allclose(lin, 0.1 * (np.arange(5) + 0.5), rtol=1e-14)
    assert simpson_mean(math.sin, 0.0, 0.1) == pytest.approx((math.cos(0) - math.cos(0.1)) / 0.1, abs=1e-9)
    with pytest.raises(ValueError):
        simpson_mean(math.sin, 0.0, 0.1, n_sub=3)


def _box(n=3, dirichlet=("left",)):
    return FieldLayout(rectangle_mesh(n, n, dirichlet=dirichlet))


@pytest.mark.parametrize("dirichlet, coupling", [("all", None), (("left",), np.zeros(3))])
def test_zero_load_fixed_point(dirichlet, coupling):
    # the thermal prestress -theta B is only in equilibrium when it cannot deform the body
    lay = _box(dirichlet=dirichlet)
    loads = Loads()
    st = initial_state(lay, loads, 1.3, 0.1)
    mat = MaterialModel(coupling=coupling).on_cells(lay.n_cells)
    new, rep = solve_step(lay, mat, st, step_loads(lay, loads, 0.0, 0.1), 0.1)
    np.testing.assert_array_equal(new.u, st.u)
    np.testing.assert_array_equal(new.theta, st.theta)
    np.testing.assert_array_equal(new.p, st.p)
    assert rep.outer_iterations == 1


@pytest.mark.parametrize("h", [0.0, 0.3])
def test_pure_conduction_conserves_heat(h):
    lay = _box(4)
    loads = Loads(boundary_heat=(lambda t, x: np.full(len(x), h)) if h else None)
    x = lay.mesh.nodes
    th0 = 1.0 + 0.5 * np.cos(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])
    tau = 0.01
    st = initial_state(lay, loads, th0, tau)
    traj = run(lay, MaterialModel(), st, loads, 0.2, tau, SolverOptions(clamp_mechanics=True))
    heat = traj.theta @ lay.mass_lumped
    np.testing.assert_allclose(heat - heat[0], 4.0 * h * traj.t, atol=1e-10)
    assert np.ptp(traj.theta[-1]) < np.ptp(th0)


def test_admissibility_and_trace_free(small_shear_run):
    traj = small_shear_run
    lay = traj.layout
    for k in range(len(traj.t)):
        E = lay.sym_grad(traj.u[k])
        tol = 1e-10 * (1 + tc.norm(traj.e[k]) + tc.norm(traj.p[k]))
        assert np.all(np.max(np.abs(E - traj.e[k] - traj.p[k]), axis=1) <= tol)
        assert np.all(np.abs(tc.trace(traj.p[k])) <= 1e-12 * (1 + tc.norm(traj.p[k])))
        np.testing.assert_array_equal(traj.u[k][lay.dirichlet_dofs], traj.w[k][lay.dirichlet_dofs])
    assert all(max(r.mech_residual, r.heat_residual) <= traj.opts.tol_outer for r in traj.reports)
    assert np.count_nonzero(traj.p[-1]) > 0


def test_single_step_run_equals_solve_step():
    sc = scenarios.single_element(tau=0.01, T=0.01)
    traj = run(sc.layout, sc.material, sc.initial, sc.loads, 0.01, 0.01)
    mat = sc.material.on_cells(sc.layout.n_cells)
    new, _ = solve_step(sc.layout, mat, sc.initial, step_loads(sc.layout, sc.loads, 0.0, 0.01), 0.01,
                        traj.opts)
    assert traj.n_steps == 1
    np.testing.assert_array_equal(traj.u[1], new.u)
    np.testing.assert_array_equal(traj.theta[1], new.theta)


def test_step_must_divide_final_time():
    sc = scenarios.single_element(tau=0.3)
    with pytest.raises(ValueError):
        run(sc.layout, sc.material, sc.initial, sc.loads, 1.0, 0.3)


def test_nonconvergence_reports_step_and_residuals():
    sc = scenarios.shear2d(n=4, tau=0.05, T=0.5)
    with pytest.raises(NonConvergenceError) as info:
        run(sc.layout, sc.material, sc.initial, sc.loads, sc.T, sc.tau, SolverOptions(max_outer=1))
    assert info.value.step is not None and info.value.step >= 1
    assert set(info.value.residuals) == {"mech_residual", "heat_residual"}
    assert f"step {info.value.step}" in str(info.value)


def test_frozen_loads_reach_steady_state():
    lay = _box(4, dirichlet=("bottom",))
    w = lambda t, x: np.stack([0.1 * x[:, 1], 0.05 * x[:, 0] * x[:, 1]], 1)
    loads = Loads(dirichlet=w, traction=lambda t, x: np.tile([0.02, 0.0], (len(x), 1)))
    x = lay.mesh.nodes
    th0 = 1.0 + 0.3 * np.cos(np.pi * x[:, 0])
    tau = 0.05
    st = initial_state(lay, loads, th0, tau, v0=np.zeros(lay.ndof))
    traj = run(lay, MaterialModel(), st, loads, 20.0, tau)
    incr = np.array([max(np.max(np.abs(traj.u[k] - traj.u[k - 1])), np.max(np.abs(traj.theta[k] - traj.theta[k - 1])))
                     for k in range(1, traj.n_steps + 1)])
    # lightly damped elastic modes beat, so compare maxima over windows of two time units
    chunks = incr.reshape(-1, 40).max(axis=1)
    assert np.all(chunks[1:] <= chunks[:-1])
    slope = np.polyfit(np.arange(len(chunks)), np.log(chunks), 1)[0]
    assert slope < -0.5
    assert chunks[-1] < 1e-3 * chunks[0]


def test_single_element_is_homogeneous():
    traj = single_element_trajectory(0.01, T=0.5)
    spread = np.ptp(traj.e[-1], axis=0).max() + np.ptp(traj.theta[-1])
    assert spread < 1e-12


def test_single_element_self_refinement(ode_reference):
    errs = {tau: relative_errors(single_element_trajectory(tau), ode_reference) for tau in (4e-3, 2e-3, 1e-3)}
    for i in range(3):
        s1 = math.log2(errs[4e-3][i] / errs[2e-3][i])
        s2 = math.log2(errs[2e-3][i] / errs[1e-3][i])
        assert 0.8 <= s1 <= 1.2 and 0.8 <= s2 <= 1.2, (i, s1, s2)


def test_power_law_mode_runs_and_stays_admissible():
    traj = single_element_trajectory(0.01, T=0.5, gamma=4.5)
    lay = traj.layout
    E = lay.sym_grad(traj.u[-1])
    np.testing.assert_allclose(E, traj.e[-1] + traj.p[-1], atol=1e-10)
    plain = single_element_trajectory(0.01, T=0.5)
    assert np.max(np.abs(traj.p[-1] - plain.p[-1])) < 1e-3
