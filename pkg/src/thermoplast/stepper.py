"""Fully implicit time stepping for the coupled thermo-viscoplastic system.

Unknowns at each time node: displacement u (P1), elastic and plastic strain
e, p (P0), the yield-stress selection zeta (P0) and temperature theta (P1).
One step solves, with rates x' = (x_new - x_old)/tau,

  heat:      c (th - th_old)/tau + A(th) = H + w [R(th_old, p') + nu|p'|^2 + D e':e' - th B:e']
  momentum:  rho D2 u + int sigma : eps(v) = <L, v>,  sigma = D e' + C e + tau g(e) - th B
  flow rule: zeta + nu p' + tau g(p) = dev sigma,  zeta in dR(th_old, p')
  split:     eps(u) = e + p,  u = w on the Dirichlet boundary

The heat equation uses a lumped P1 mass and nodal sources; the coupling
term B:e' is weighted by cell area / 3 per vertex so that the heat equation
tested with 1 reproduces the thermal power seen by the mechanics exactly.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import tensor_core as tc
from .constitutive import MaterialModel, viscoplastic_update
from .errors import NonConvergenceError, PositivityError
from .mesh_fem import FieldLayout


@dataclass
class State:
    """Discrete unknowns at one time node.

    ``u_prev`` is the displacement at the previous node; the inertia stencil of
    the next step needs only (u, u_prev).  At t=0 it holds u0 - tau*v0.
    """

    t: float
    u: np.ndarray
    u_prev: np.ndarray
    e: np.ndarray
    p: np.ndarray
    zeta: np.ndarray
    theta: np.ndarray

    def velocity(self, tau: float) -> np.ndarray:
        return (self.u - self.u_prev) / tau

    def copy(self) -> "State":
        return State(self.t, self.u.copy(), self.u_prev.copy(), self.e.copy(), self.p.copy(),
                     self.zeta.copy(), self.theta.copy())


@dataclass
class Loads:
    """Time-dependent data as callables of (t, points).

    body_force, traction, dirichlet, dirichlet_rate -> (n, 2) at nodes;
    heat_source, boundary_heat -> (n,) at nodes;
    safe_load -> (n_cells, ns) at barycenters.  If no body force/traction is
    given, the mechanical load is the divergence form of safe_load.
    """

    body_force: Callable | None = None
    traction: Callable | None = None
    dirichlet: Callable | None = None
    dirichlet_rate: Callable | None = None
    heat_source: Callable | None = None
    boundary_heat: Callable | None = None
    safe_load: Callable | None = None

    def mech_load(self, layout: FieldLayout, t: float) -> np.ndarray:
        out = np.zeros(layout.ndof)
        if self.body_force is not None:
            out += layout.body_load(layout.node_field(self.body_force, t))
        if self.traction is not None:
            out += layout.traction_load(layout.node_field(self.traction, t))
        if self.safe_load is not None and self.body_force is None and self.traction is None:
            rho = np.asarray(self.safe_load(t, layout.mesh.barycenters()), dtype=float)
            out += layout.assemble_div_sigma(rho, restrict=False)
        return out

    def dirichlet_field(self, layout: FieldLayout, t: float) -> np.ndarray:
        if self.dirichlet is None:
            return np.zeros(layout.ndof)
        return layout.node_field(self.dirichlet, t)

    def dirichlet_velocity(self, layout: FieldLayout, t: float) -> np.ndarray:
        if self.dirichlet_rate is not None:
            return layout.node_field(self.dirichlet_rate, t)
        return np.zeros(layout.ndof)

    def heat_load(self, layout: FieldLayout, t: float) -> np.ndarray:
        """Lumped nodal heat input: volume source plus boundary flux."""
        out = np.zeros(layout.n_nodes)
        x = layout.mesh.nodes
        if self.heat_source is not None:
            hv = np.broadcast_to(np.asarray(self.heat_source(t, x), dtype=float), (layout.n_nodes,))
            if np.any(hv < 0):
                raise ValueError("heat source must be nonnegative")
            out += layout.mass_lumped * hv
        if self.boundary_heat is not None:
            hb = np.broadcast_to(np.asarray(self.boundary_heat(t, x), dtype=float), (layout.n_nodes,))
            if np.any(hb < 0):
                raise ValueError("boundary heat flux must be nonnegative")
            out += layout.boundary_lumped * hb
        return out

    def check_safe_load(self, layout: FieldLayout, t: float = 0.0, tol: float = 1e-8) -> float:
        """Equilibrium defect of safe_load against the body force/traction data."""
        if self.safe_load is None or (self.body_force is None and self.traction is None):
            return 0.0
        rho = np.asarray(self.safe_load(t, layout.mesh.barycenters()), dtype=float)
        defect = layout.assemble_div_sigma(rho) - self.mech_load(layout, t)[layout.free_dofs]
        res = float(np.max(np.abs(defect))) if defect.size else 0.0
        if res > tol:
            raise ValueError(f"safe load is not equilibrated with the applied loads (residual {res:.3e})")
        return res


def simpson_mean(curve: Callable[[float], np.ndarray], t0: float, t1: float, n_sub: int = 8):
    """(1/(t1-t0)) int_{t0}^{t1} curve dt by composite Simpson on n_sub intervals."""
    if n_sub % 2:
        raise ValueError("Simpson rule needs an even number of subintervals")
    ts = np.linspace(t0, t1, n_sub + 1)
    w = np.ones(n_sub + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    acc = None
    for wi, ti in zip(w, ts):
        v = wi * np.asarray(curve(ti), dtype=float)
        acc = v if acc is None else acc + v
    return acc / (3.0 * n_sub)


def sample_local_means(curve: Callable[[float], np.ndarray], tau: float, n_steps: int, t0: float = 0.0):
    """Step values (1/tau) int over [t_{k-1}, t_k] for k = 1..n_steps."""
    return np.array([simpson_mean(curve, t0 + (k - 1) * tau, t0 + k * tau) for k in range(1, n_steps + 1)])


@dataclass
class StepLoads:
    load: np.ndarray
    w: np.ndarray
    heat: np.ndarray


def step_loads(layout: FieldLayout, loads: Loads, t_old: float, tau: float) -> StepLoads:
    t_new = t_old + tau
    if loads.body_force is None and loads.traction is None and loads.safe_load is None:
        L = np.zeros(layout.ndof)
    else:
        L = simpson_mean(lambda s: loads.mech_load(layout, s), t_old, t_new)
    if loads.heat_source is None and loads.boundary_heat is None:
        q = np.zeros(layout.n_nodes)
    else:
        q = simpson_mean(lambda s: loads.heat_load(layout, s), t_old, t_new)
    return StepLoads(L, loads.dirichlet_field(layout, t_new), q)


@dataclass
class SolverOptions:
    tol_outer: float = 1e-9
    max_outer: int = 50
    gamma: float | None = None
    max_newton: int = 50
    min_damping: float = 2.0 ** -30
    positivity_floor: float | None = None
    clamp_mechanics: bool = False

    def __post_init__(self):
        if self.gamma is not None and self.gamma <= 4:
            raise ValueError("power-law regularization exponent must exceed 4")
        if self.tol_outer <= 0 or self.max_outer < 1 or self.max_newton < 1:
            raise ValueError("solver tolerances and iteration limits must be positive")


@dataclass
class StepReport:
    outer_iterations: int
    mech_residual: float
    heat_residual: float
    newton_mech: int
    newton_heat: int
    damping_min: float
    plastic_cells: int


class _StepSolver:
    """Holds per-step constants for the alternating mechanics/heat solve."""

    def __init__(self, layout: FieldLayout, mat: MaterialModel, state: State, sl: StepLoads, tau: float,
                 opts: SolverOptions):
        self.lay = layout
        self.mat = mat
        self.st = state
        self.sl = sl
        self.tau = tau
        self.opts = opts
        self.radius = mat.radius_at(layout.cell_mean(state.theta))
        self.inert = mat.rho / tau ** 2
        self.me = mat.viscous_matrix() / tau + mat.elastic_matrix()
        self.inert_rhs = self.inert * (layout.mass_vec @ (-2.0 * state.u + state.u_prev))
        self.floor = 0.0 if opts.positivity_floor is None else 0.1 * opts.positivity_floor
        self.newton_mech = 0
        self.newton_heat = 0
        self.damping_min = 1.0

    def frozen(self, th_c):
        """Cell data with the mechanics held at the previous state."""
        cu = self.cells(self.st.u, th_c, tangent=False)
        cu.p_rate = np.zeros_like(cu.p_rate)
        cu.p, cu.e, cu.zeta = self.st.p.copy(), self.st.e.copy(), self.st.zeta.copy()
        cu.plastic = np.zeros_like(cu.plastic)
        return cu

    def cells(self, u, th_c, tangent=True):
        E = self.lay.sym_grad(u)
        return viscoplastic_update(self.mat, E, self.st.e, self.st.p, th_c, self.radius, self.tau,
                                   self.opts.gamma, tangent=tangent, me=self.me)

    def mech_residual(self, u, cu):
        r = self.inert * (self.lay.mass_vec @ u) + self.inert_rhs + self.lay.BtA @ cu.sigma.ravel() - self.sl.load
        return r[self.lay.free_dofs]

    def solve_mech(self, u, th_c, tol):
        lay = self.lay
        free = lay.free_dofs
        cu = self.cells(u, th_c)
        r = self.mech_residual(u, cu)
        for _ in range(self.opts.max_newton):
            rn = np.max(np.abs(r)) if r.size else 0.0
            if rn <= tol:
                return u, cu, rn
            self.newton_mech += 1
            Kff = (self.inert * lay.mass_vec_ff + lay.assemble_tangent(cu.tangent, free_only=True)).tocsc()
            du = spla.splu(Kff, permc_spec="MMD_AT_PLUS_A").solve(-r)
            alpha = 1.0
            merit = np.dot(r, r)
            while True:
                trial = u.copy()
                trial[free] += alpha * du
                ct = self.cells(trial, th_c)
                rt = self.mech_residual(trial, ct)
                if np.dot(rt, rt) < merit or alpha <= self.opts.min_damping:
                    break
                alpha *= 0.5
            self.damping_min = min(self.damping_min, alpha)
            u, cu, r = trial, ct, rt
        rn = np.max(np.abs(r)) if r.size else 0.0
        if rn <= tol:
            return u, cu, rn
        raise NonConvergenceError("mechanics Newton did not converge", {"mech_residual": rn})

    def heat_terms(self, cu):
        """Lumped nodal coupling coefficient and dissipative heat sources."""
        lay, mat, tau = self.lay, self.mat, self.tau
        e_rate = (cu.e - self.st.e) / tau
        couple = lay.cell_to_node_lumped(tc.inner(mat.coupling, e_rate))
        diss = (self.radius * tc.norm(cu.p_rate) + mat.flow_viscosity * tc.inner(cu.p_rate, cu.p_rate)
                + tc.inner(mat.viscous(e_rate), e_rate))
        q = self.sl.heat + mat.dissipation_weight * lay.cell_to_node_lumped(diss)
        return mat.dissipation_weight * couple, q

    def heat_residual(self, th, couple, q, jacobian=False):
        lay, mat = self.lay, self.mat
        cm = mat.heat_capacity * lay.mass_lumped / self.tau
        val, J = lay.assemble_nonlinear_heat(th, mat.kappa, mat.dkappa, jacobian=jacobian)
        r = cm * (th - self.st.theta) + val + couple * th - q
        if jacobian:
            J = J + sp.diags(cm + couple)
        return r, J

    def solve_heat(self, th, cu, tol):
        couple, q = self.heat_terms(cu)
        for _ in range(self.opts.max_newton):
            r, J = self.heat_residual(th, couple, q, jacobian=True)
            rn = np.max(np.abs(r))
            if rn <= tol:
                return th
            self.newton_heat += 1
            dth = spla.splu(J.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(-r)
            alpha = 1.0
            while np.any(th + alpha * dth <= self.floor):
                alpha *= 0.5
                if alpha < self.opts.min_damping:
                    raise PositivityError("temperature update cannot keep positivity")
            self.damping_min = min(self.damping_min, alpha)
            th = th + alpha * dth
        r, _ = self.heat_residual(th, couple, q)
        rn = np.max(np.abs(r))
        if rn <= tol:
            return th
        raise NonConvergenceError("heat Newton did not converge", {"heat_residual": rn})


def solve_step(layout: FieldLayout, mat: MaterialModel, state: State, sl: StepLoads, tau: float,
               opts: SolverOptions | None = None) -> tuple[State, StepReport]:
    """Advance one time step; returns the new state and a convergence report."""
    opts = opts or SolverOptions()
    if tau <= 0:
        raise ValueError("time step must be positive")
    S = _StepSolver(layout, mat, state, sl, tau, opts)
    tol = opts.tol_outer
    inner_tol = 0.1 * tol

    th = state.theta.copy()
    if opts.clamp_mechanics:
        u = state.u.copy()
    else:
        u = state.u + (state.u - state.u_prev)
        u[layout.dirichlet_dofs] = sl.w[layout.dirichlet_dofs]
    rm = rh = np.inf
    for outer in range(1, opts.max_outer + 1):
        th_c = layout.cell_mean(th)
        if opts.clamp_mechanics:
            cu = S.frozen(th_c)
        else:
            u, cu, _ = S.solve_mech(u, th_c, inner_tol)
        th = S.solve_heat(th, cu, inner_tol)
        if np.any(th <= 0):
            raise PositivityError(f"nonpositive temperature {th.min():.3e}")
        th_c = layout.cell_mean(th)
        if opts.clamp_mechanics:
            rm = 0.0
            cu = S.frozen(th_c)
        else:
            cu = S.cells(u, th_c, tangent=False)
            r = S.mech_residual(u, cu)
            rm = float(np.max(np.abs(r))) if r.size else 0.0
        couple, q = S.heat_terms(cu)
        rh = float(np.max(np.abs(S.heat_residual(th, couple, q)[0])))
        if max(rm, rh) <= tol:
            new = State(state.t + tau, u, state.u.copy(), cu.e, cu.p, cu.zeta, th)
            rep = StepReport(outer, rm, rh, S.newton_mech, S.newton_heat, S.damping_min,
                             int(np.count_nonzero(cu.plastic)))
            return new, rep
    raise NonConvergenceError("coupled fixed point did not converge",
                              {"mech_residual": rm, "heat_residual": rh})


@dataclass
class Trajectory:
    """Node values of a run plus the sampled data needed by the audits."""

    layout: FieldLayout
    material: MaterialModel
    tau: float
    t: np.ndarray
    u: np.ndarray
    u_init_prev: np.ndarray
    e: np.ndarray
    p: np.ndarray
    zeta: np.ndarray
    theta: np.ndarray
    w: np.ndarray
    load: np.ndarray
    heat: np.ndarray
    radius: np.ndarray
    opts: SolverOptions
    reports: list = field(default_factory=list)
    theta_bar: float = 0.0
    wall_time: float = 0.0

    @property
    def n_steps(self) -> int:
        return len(self.t) - 1

    def velocities(self) -> np.ndarray:
        """Backward-difference velocities at every node, v^0 from the seed."""
        prev = np.vstack([self.u_init_prev[None], self.u[:-1]])
        return (self.u - prev) / self.tau

    def state(self, k: int) -> State:
        prev = self.u_init_prev if k == 0 else self.u[k - 1]
        return State(float(self.t[k]), self.u[k].copy(), prev.copy(), self.e[k].copy(), self.p[k].copy(),
                     self.zeta[k].copy(), self.theta[k].copy())


def initial_state(layout: FieldLayout, loads: Loads, theta0, tau: float, u0=None, v0=None, e0=None,
                  p0=None) -> State:
    """Admissible initial data; default u0 = w(0), v0 = w'(0), p0 = 0."""
    w0 = loads.dirichlet_field(layout, 0.0)
    u = w0.copy() if u0 is None else np.asarray(u0, dtype=float).copy()
    if np.any(np.abs(u[layout.dirichlet_dofs] - w0[layout.dirichlet_dofs]) > 1e-12):
        raise ValueError("initial displacement violates the Dirichlet condition")
    v = loads.dirichlet_velocity(layout, 0.0) if v0 is None else np.asarray(v0, dtype=float)
    E = layout.sym_grad(u)
    p = np.zeros_like(E) if p0 is None else np.asarray(p0, dtype=float).copy()
    if np.any(np.abs(tc.trace(p)) > 1e-12 * (1 + tc.norm(p))):
        raise ValueError("initial plastic strain must be trace-free")
    e = E - p if e0 is None else np.asarray(e0, dtype=float).copy()
    if np.any(np.abs(E - e - p) > 1e-10 * (1 + tc.norm(e) + tc.norm(p))[:, None]):
        raise ValueError("initial strains are not kinematically admissible")
    th = np.broadcast_to(np.asarray(theta0, dtype=float), (layout.n_nodes,)).copy()
    if np.any(th <= 0):
        raise ValueError("initial temperature must be positive")
    return State(0.0, u, u - tau * v, e, p, np.zeros_like(E), th)


def run(layout: FieldLayout, mat: MaterialModel, initial: State, loads: Loads, T: float, tau: float,
        opts: SolverOptions | None = None, progress: Callable | None = None) -> Trajectory:
    """Time loop over k = 1..K with K tau = T."""
    from .audits import positivity_bound

    opts = opts or SolverOptions()
    n = int(round(T / tau))
    if n < 1 or abs(n * tau - T) > 1e-9 * max(T, 1.0):
        raise ValueError("time step must divide the final time")
    mat = mat.on_cells(layout.n_cells)
    loads.check_safe_load(layout)
    theta_bar = positivity_bound(mat, T, float(np.min(initial.theta)))
    if opts.positivity_floor is None:
        opts = replace(opts, positivity_floor=theta_bar)

    m, ns = layout.n_cells, layout.ns
    U = np.empty((n + 1, layout.ndof))
    Eh = np.empty((n + 1, m, ns))
    P = np.empty((n + 1, m, ns))
    Z = np.empty((n + 1, m, ns))
    TH = np.empty((n + 1, layout.n_nodes))
    W = np.empty((n + 1, layout.ndof))
    Lk = np.zeros((n, layout.ndof))
    Qk = np.zeros((n, layout.n_nodes))
    Rk = np.zeros((n, m))
    ts = np.arange(n + 1) * tau
    st = initial.copy()
    U[0], Eh[0], P[0], Z[0], TH[0] = st.u, st.e, st.p, st.zeta, st.theta
    W[0] = loads.dirichlet_field(layout, 0.0)
    reports = []
    t0 = _time.perf_counter()
    for k in range(1, n + 1):
        sl = step_loads(layout, loads, ts[k - 1], tau)
        Rk[k - 1] = mat.radius_at(layout.cell_mean(st.theta))
        try:
            st, rep = solve_step(layout, mat, st, sl, tau, opts)
        except NonConvergenceError as exc:
            exc.step = k
            raise
        except PositivityError as exc:
            raise PositivityError(f"step {k}: {exc}") from exc
        st.t = ts[k]
        U[k], Eh[k], P[k], Z[k], TH[k] = st.u, st.e, st.p, st.zeta, st.theta
        W[k], Lk[k - 1], Qk[k - 1] = sl.w, sl.load, sl.heat
        reports.append(rep)
        if progress is not None:
            progress(k, n, rep)
    traj = Trajectory(layout, mat, tau, ts, U, initial.u_prev.copy(), Eh, P, Z, TH, W, Lk, Qk, Rk, opts,
                      reports, theta_bar, _time.perf_counter() - t0)
    return traj
