"""Quasistatic Prandtl-Reuss perfect plasticity by incremental minimization.

Each increment minimizes, over displacements u with u = w(t) on the Dirichlet
boundary,

    J(u) = sum_cells A [ Q(eps(u) - p) + r |p - p_prev| ] - <L(t), u - w(t)>

where p is eliminated cell-wise by the closed-form rate-independent return
map.  The reduced functional is convex and C^1 with gradient
B^T(A sigma) - L, so Newton with a line search on J finds the global minimum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import tensor_core as tc
from .constitutive import MaterialModel
from .errors import NonConvergenceError, StabilityViolationError
from .mesh_fem import FieldLayout
from .stepper import Loads


@dataclass
class QuasistaticState:
    t: float
    u: np.ndarray
    e: np.ndarray
    p: np.ndarray


@dataclass
class PPOptions:
    tol: float = 1e-13
    tol_K: float = 1e-9
    max_newton: int = 200
    regularization: float = 1e-12


def rate_independent_return(mat: MaterialModel, E, p_prev, tangent: bool = True):
    """Closed-form return map p = p_prev + (1 - r/|s_D|)_+ s_D / (2 mu), s = C(E - p_prev)."""
    s = mat.elastic(E - p_prev)
    sd = tc.dev(s)
    n = tc.norm(sd)
    r = np.broadcast_to(mat.radius, n.shape)
    mu = np.broadcast_to(mat.mu, n.shape)
    plastic = n > r
    safe = np.where(plastic, n, 1.0)
    shat = sd / safe[:, None]
    dp = np.where(plastic, (n - r) / (2.0 * mu), 0.0)[:, None] * shat
    p = p_prev + dp
    sigma = s - 2.0 * mu[:, None] * dp
    tan = None
    if tangent:
        tan = np.array(np.broadcast_to(mat.elastic_matrix(), (len(n), mat.ns, mat.ns)), dtype=float)
        idx = np.flatnonzero(plastic)
        if idx.size:
            rho = r[idx] / n[idx]
            P = tc.dev_projector(mat.d)
            sh = shat[idx]
            N = (1.0 - rho)[:, None, None] * P + rho[:, None, None] * sh[:, :, None] * sh[:, None, :]
            tan[idx] -= 2.0 * mu[idx][:, None, None] * N
    return p, sigma, tan, plastic


class PerfectPlasticity:
    """Incremental solver sharing mesh, material and load conventions with the stepper."""

    def __init__(self, layout: FieldLayout, mat: MaterialModel, loads: Loads, opts: PPOptions | None = None):
        self.lay = layout
        self.mat = mat.on_cells(layout.n_cells)
        self.loads = loads
        self.opts = opts or PPOptions()

    def load_at(self, t: float) -> np.ndarray:
        return self.loads.mech_load(self.lay, t)

    def objective(self, u, p_prev, L, w) -> float:
        lay, mat = self.lay, self.mat
        p, sigma, _, _ = rate_independent_return(mat, lay.sym_grad(u), p_prev, tangent=False)
        e = lay.sym_grad(u) - p
        q = 0.5 * np.dot(lay.areas, tc.inner(mat.elastic(e), e))
        diss = np.dot(lay.areas, mat.radius * tc.norm(p - p_prev))
        f = lay.free_dofs
        return float(q + diss - np.dot(L[f], (u - w)[f]))

    def incremental_solve(self, prev: QuasistaticState, t: float, u_init: np.ndarray | None = None
                          ) -> QuasistaticState:
        lay, mat, o = self.lay, self.mat, self.opts
        f = lay.free_dofs
        L = self.load_at(t)
        w = self.loads.dirichlet_field(lay, t)
        u = (prev.u if u_init is None else u_init).copy()
        u[lay.dirichlet_dofs] = w[lay.dirichlet_dofs]
        J = self.objective(u, prev.p, L, w)
        for it in range(o.max_newton + 1):
            p, sigma, tan, _ = rate_independent_return(mat, lay.sym_grad(u), prev.p)
            g = lay.assemble_div_sigma(sigma) - L[f]
            gn = float(np.max(np.abs(g))) if g.size else 0.0
            if gn <= o.tol:
                break
            if it == o.max_newton:
                raise NonConvergenceError("incremental minimization did not converge", {"gradient": gn})
            H = lay.assemble_tangent(tan, free_only=True)
            shift = o.regularization * float(np.max(H.diagonal()))
            H = (H + shift * sp.identity(H.shape[0], format="csr")).tocsc()
            d = spla.splu(H, permc_spec="MMD_AT_PLUS_A").solve(-g)
            slope = float(np.dot(g, d))
            alpha = 1.0
            while True:
                trial = u.copy()
                trial[f] += alpha * d
                Jt = self.objective(trial, prev.p, L, w)
                if Jt <= J + 1e-4 * alpha * slope or alpha < 1e-12:
                    break
                if Jt <= J + 1e-13 * max(1.0, abs(J)):
                    # objective flat to round-off: fall back on the gradient norm
                    _, st, _, _ = rate_independent_return(mat, lay.sym_grad(trial), prev.p, tangent=False)
                    if np.max(np.abs(lay.assemble_div_sigma(st) - L[f])) < gn:
                        break
                alpha *= 0.5
            u, J = trial, Jt
        E = lay.sym_grad(u)
        state = QuasistaticState(t, u, E - p, p)
        rep = self.stability_check(state, t)
        if not rep["passed"]:
            raise StabilityViolationError(f"post-check failed: {rep}")
        return state

    def stability_check(self, state: QuasistaticState, t: float) -> dict:
        """Stress admissibility margin and equilibrium residual of a state."""
        lay, mat = self.lay, self.mat
        sigma = mat.elastic(state.e)
        margin = float(np.max(tc.norm(tc.dev(sigma)) - mat.radius))
        res = lay.assemble_div_sigma(sigma) - self.load_at(t)[lay.free_dofs]
        eq = float(np.max(np.abs(res))) if res.size else 0.0
        tol_eq = max(10.0 * self.opts.tol, 1e-10)
        return {"margin_K": margin, "equilibrium": eq,
                "passed": margin <= self.opts.tol_K and eq <= tol_eq}

    def initial_state(self, u0=None, p0=None) -> QuasistaticState:
        lay = self.lay
        p = np.zeros((lay.n_cells, lay.ns)) if p0 is None else np.asarray(p0, dtype=float)
        prev = QuasistaticState(0.0, self.loads.dirichlet_field(lay, 0.0) if u0 is None else u0, p.copy(), p)
        return self.incremental_solve(prev, 0.0)

    def run(self, times, initial: QuasistaticState | None = None) -> "PPTrajectory":
        times = np.asarray(times, dtype=float)
        st = self.initial_state() if initial is None else initial
        if abs(st.t - times[0]) > 1e-14:
            st = QuasistaticState(float(times[0]), st.u, st.e, st.p)
        states = [st]
        for t in times[1:]:
            st = self.incremental_solve(st, float(t))
            states.append(st)
        return PPTrajectory(self, times, states)


@dataclass
class PPTrajectory:
    solver: PerfectPlasticity
    t: np.ndarray
    states: list = field(default_factory=list)

    def field(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.states])


def var_R(layout: FieldLayout, radius, p_path) -> float:
    """Sum over consecutive snapshots of the cell-integrated dissipation r |dp|."""
    p_path = np.asarray(p_path, dtype=float)
    if len(p_path) < 2:
        raise ValueError("need at least two snapshots")
    dp = np.diff(p_path, axis=0)
    return float(np.sum(np.asarray(radius) * tc.norm(dp) * layout.areas))


def energy_balance_history(traj: PPTrajectory, rule: str = "left") -> np.ndarray:
    """Residual of the energy balance over [0, t_k] for every k (entry 0 is 0).

    Residual = Q(e(t)) + Var_R(p; [0, t]) - Q(e(0)) - int_0^t sigma : eps(w')
    - int_0^t <L, (u - w)'>, the last term being the integrated-by-parts form
    of the load work.  The time integrals use the left-endpoint rule
    (matching the step sums of the viscoplastic audits), the right-endpoint
    rule or the trapezoid rule, which is exact on elastic paths.  With the
    left rule the residual equals sum Q(de) + sum (R(dp) - sigma_prev : dp) >= 0.
    """
    if rule not in ("left", "trapezoid", "right"):
        raise ValueError("rule must be 'left', 'trapezoid' or 'right'")
    wl, wr = {"left": (1.0, 0.0), "trapezoid": (0.5, 0.5), "right": (0.0, 1.0)}[rule]
    sol = traj.solver
    lay, mat = sol.lay, sol.mat
    f = lay.free_dofs
    A = lay.areas

    def Q(e):
        return 0.5 * float(np.dot(A, tc.inner(mat.elastic(e), e)))

    Ls = [sol.load_at(float(t)) for t in traj.t]
    ws = [sol.loads.dirichlet_field(lay, float(t)) for t in traj.t]
    out = np.zeros(len(traj.states))
    acc = 0.0
    q0 = Q(traj.states[0].e)
    for k in range(1, len(traj.states)):
        s0, s1 = traj.states[k - 1], traj.states[k]
        sig = wl * mat.elastic(s0.e) + wr * mat.elastic(s1.e)
        work = float(np.dot(A, tc.inner(sig, lay.sym_grad(ws[k] - ws[k - 1]))))
        d = (s1.u - ws[k]) - (s0.u - ws[k - 1])
        work += float(np.dot((wl * Ls[k - 1] + wr * Ls[k])[f], d[f]))
        diss = float(np.sum(mat.radius * tc.norm(s1.p - s0.p) * A))
        acc += diss - work
        out[k] = Q(s1.e) - q0 + acc
    return out


def check_energy_balance_E(traj: PPTrajectory, t_index: int | None = None, rule: str = "left") -> float:
    """Energy-balance residual over [0, t_k]; see ``energy_balance_history``."""
    hist = energy_balance_history(traj, rule)
    return float(hist[-1 if t_index is None else int(t_index)])
