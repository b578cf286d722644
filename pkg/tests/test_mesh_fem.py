import numpy as np
import pytest
import scipy.sparse.linalg as spla
from hypothesis import given, settings, strategies as st

from oracles import edge_traction_oracle
from thermoplast import tensor_core as tc
from thermoplast.constitutive import MaterialModel
from thermoplast.errors import DegenerateMeshError, KornViolationError, PositivityError
from thermoplast.mesh_fem import DIRICHLET, NEUMANN, FieldLayout, Mesh, rectangle_mesh


@pytest.fixture(scope="module")
def lay4():
    return FieldLayout(rectangle_mesh(4, 4, dirichlet=("left",)))


def field(lay, f):
    return lay.node_field(lambda t, x: f(x), 0.0)


@pytest.mark.parametrize("f, expected", [
    (lambda x: np.stack([x[:, 0], 0 * x[:, 0]], 1), [1.0, 0.0, 0.0]),
    (lambda x: np.stack([x[:, 1], x[:, 0]], 1), [0.0, 0.0, np.sqrt(2.0)]),
    (lambda x: np.stack([-x[:, 1], x[:, 0]], 1), [0.0, 0.0, 0.0]),
])
def test_sym_grad_affine(lay4, f, expected):
    eps = lay4.sym_grad(field(lay4, f))
    np.testing.assert_allclose(eps, np.broadcast_to(expected, eps.shape), atol=1e-13)


def test_mesh_invariants(lay4):
    m = lay4.mesh
    assert np.all(m.signed_areas() > 0)
    assert lay4.volume == pytest.approx(1.0)
    assert set(m.edge_labels) == {DIRICHLET, NEUMANN}
    assert lay4.ndof == 2 * m.n_nodes
    assert m.n_cells == 4 * 16
    # outward normals point away from the center
    mid = m.nodes[m.boundary_edges].mean(axis=1)
    assert np.all(np.sum(m.edge_normals() * (mid - 0.5), axis=1) > 0)


def test_degenerate_cell_is_rejected():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(DegenerateMeshError, match="cell 0"):
        Mesh(nodes, np.array([[0, 2, 1]]), np.array([[0, 1], [1, 2], [2, 0]]), [DIRICHLET] * 3)
    with pytest.raises(ValueError, match="Dirichlet"):
        Mesh(nodes, np.array([[0, 1, 2]]), np.array([[0, 1], [1, 2], [2, 0]]), [NEUMANN] * 3)


def test_div_sigma_zero_and_constant_full_dirichlet():
    lay = FieldLayout(rectangle_mesh(3, 3, dirichlet="all"))
    assert np.all(lay.assemble_div_sigma(np.zeros((lay.n_cells, 3))) == 0)
    sig = np.broadcast_to([0.3, -1.2, 0.8], (lay.n_cells, 3))
    np.testing.assert_allclose(lay.assemble_div_sigma(sig), 0.0, atol=1e-13)


def test_div_sigma_matches_edge_quadrature(lay4):
    sig = np.broadcast_to([1.0, 1.0, 0.0], (lay4.n_cells, 3))
    m = lay4.mesh
    neu = m.edge_labels == NEUMANN
    oracle = edge_traction_oracle(m.nodes, m.boundary_edges[neu], m.edge_normals()[neu], [1.0, 1.0, 0.0])
    np.testing.assert_allclose(lay4.assemble_div_sigma(sig), oracle[lay4.free_dofs], atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2 ** 31))
def test_div_sigma_linear(a, b, seed):
    lay = FieldLayout(rectangle_mesh(3, 2, dirichlet=("bottom",)))
    rng = np.random.default_rng(seed)
    s1, s2 = rng.standard_normal((2, lay.n_cells, 3))
    lhs = lay.assemble_div_sigma(a * s1 + b * s2)
    rhs = a * lay.assemble_div_sigma(s1) + b * lay.assemble_div_sigma(s2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-13 * max(1.0, np.max(np.abs(lhs)))


def test_mass_stiffness_spsd_and_kernel(lay4):
    for M in (lay4.mass, lay4.stiffness_unit):
        A = M.toarray()
        np.testing.assert_allclose(A, A.T, atol=1e-15)
        assert np.min(np.linalg.eigvalsh(A)) > -1e-12
    K = lay4.stiffness_unit.toarray()
    np.testing.assert_allclose(K @ np.ones(lay4.n_nodes), 0.0, atol=1e-13)
    w = np.linalg.eigvalsh(K)
    assert np.sum(w < 1e-10) == 1
    assert lay4.mass.sum() == pytest.approx(1.0)
    assert lay4.mass_lumped.sum() == pytest.approx(1.0)


def test_square_cells_give_nonpositive_offdiagonals(lay4):
    K = lay4.stiffness_unit.toarray()
    off = K - np.diag(np.diag(K))
    assert off.max() <= 1e-14


def test_patch_test_affine_elasticity():
    lay = FieldLayout(rectangle_mesh(5, 4, lx=1.5, dirichlet="all"))
    exact = field(lay, lambda x: np.stack([0.1 + 0.3 * x[:, 0] - 0.2 * x[:, 1], -0.4 * x[:, 0] + 0.5 * x[:, 1]], 1))
    mat = MaterialModel().on_cells(lay.n_cells)
    K = lay.assemble_tangent(mat.elastic_matrix())
    f, d = lay.free_dofs, lay.dirichlet_dofs
    Kff = K[f][:, f].tocsc()
    rhs = -K[f][:, d] @ exact[d]
    u = exact.copy()
    u[f] = spla.spsolve(Kff, rhs)
    assert np.max(np.abs(u - exact)) < 1e-10
    res = lay.assemble_div_sigma(mat.elastic(lay.sym_grad(u)))
    assert np.max(np.abs(res)) < 1e-10


def test_tangent_free_block_matches_full(lay4):
    mat = MaterialModel().on_cells(lay4.n_cells)
    full = lay4.assemble_tangent(mat.elastic_matrix()).toarray()
    ff = lay4.assemble_tangent(mat.elastic_matrix(), free_only=True).toarray()
    f = lay4.free_dofs
    np.testing.assert_allclose(ff, full[np.ix_(f, f)], atol=1e-14)


def test_nonlinear_heat_constant_and_linear(lay4):
    val, _ = lay4.assemble_nonlinear_heat(np.full(lay4.n_nodes, 2.0), lambda t: 1 + t ** 1.5)
    np.testing.assert_allclose(val, 0.0, atol=1e-13)
    th = 1.0 + lay4.mesh.nodes[:, 0]
    val, _ = lay4.assemble_nonlinear_heat(th, lambda t: np.ones_like(t))
    np.testing.assert_allclose(val, lay4.stiffness_unit @ th, atol=1e-13)


def test_nonlinear_heat_jacobian_finite_differences(lay4):
    rng = np.random.default_rng(3)
    mat = MaterialModel()
    th = rng.uniform(0.5, 2.0, lay4.n_nodes)
    _, J = lay4.assemble_nonlinear_heat(th, mat.kappa, mat.dkappa)
    h = 1e-6
    Jfd = np.zeros((lay4.n_nodes, lay4.n_nodes))
    for j in range(lay4.n_nodes):
        dp, dm = th.copy(), th.copy()
        dp[j] += h
        dm[j] -= h
        Jfd[:, j] = (lay4.assemble_nonlinear_heat(dp, mat.kappa, jacobian=False)[0]
                     - lay4.assemble_nonlinear_heat(dm, mat.kappa, jacobian=False)[0]) / (2 * h)
    err = np.linalg.norm(J.toarray() - Jfd) / np.linalg.norm(Jfd)
    assert err < 1e-6


def test_nonlinear_heat_rejects_nonpositive(lay4):
    th = np.ones(lay4.n_nodes)
    th[5] = 0.0
    with pytest.raises(PositivityError, match="node 5"):
        lay4.assemble_nonlinear_heat(th, lambda t: 1 + t)


def test_korn_examples(lay4):
    assert lay4.korn_check(np.zeros(lay4.ndof)) == 0.0
    u = field(lay4, lambda x: np.stack([x[:, 0] * x[:, 0], 0 * x[:, 0]], 1))
    assert lay4.korn_check(u) >= 1.0
    with pytest.raises(ValueError):
        lay4.korn_check(np.ones(lay4.ndof))


def test_korn_detects_rigid_motion_with_broken_boundary():
    # with the Dirichlet dofs dropped a translation has zero strain
    bad = FieldLayout(rectangle_mesh(2, 2, dirichlet=("left",)))
    bad.dirichlet_dofs = np.array([], dtype=int)
    with pytest.raises(KornViolationError):
        bad.korn_check(np.ones(bad.ndof))


def test_korn_ratio_stable_under_refinement():
    def ratio(n):
        lay = FieldLayout(rectangle_mesh(n, n, dirichlet=("left",)))
        u = lay.node_field(lambda t, p: np.stack([np.sin(np.pi * p[:, 0] / 2) * np.cos(p[:, 1]),
                                                  p[:, 0] * p[:, 1]], 1), 0.0)
        return lay.korn_check(u)

    r8, r16 = ratio(8), ratio(16)
    assert np.isfinite(r8) and 0.5 <= r16 / r8 <= 2.0


def test_traction_and_body_loads_integrate_constants(lay4):
    ones = np.tile([1.0, 0.0], lay4.n_nodes)
    fb = lay4.body_load(ones)
    assert fb[0::2].sum() == pytest.approx(1.0)
    ft = lay4.traction_load(ones)
    assert ft[0::2].sum() == pytest.approx(3.0)  # right, bottom, top sides are Neumann


def test_norm_helpers(lay4):
    q = np.broadcast_to([1.0, 0.0, 0.0], (lay4.n_cells, 3))
    assert lay4.l2_cells(q) == pytest.approx(1.0)
    assert lay4.h1_scalar(np.ones(lay4.n_nodes)) == pytest.approx(1.0)
    x = lay4.mesh.nodes[:, 0]
    assert lay4.h1_scalar(x) == pytest.approx(np.sqrt(1 / 3 + 1), rel=1e-2)
    assert tc.nsym(2) == lay4.ns
