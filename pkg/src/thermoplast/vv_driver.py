"""Vanishing viscosity and inertia sweep.

For each eps the thermo-viscoplastic stepper runs the eps-system

  eps th' + A(th)  = eps H + eps [R(p') + eps|p'|^2 + eps D e':e' - th B_eps:e']
  rho eps^2 u'' - div(eps D e' + C e - th B_eps) = F
  zeta + eps p' = dev(sigma),   B_eps = eps^beta B

which is the base model with heat capacity, dissipation weight and flow
viscosity all equal to eps.  Results are compared with the rate-independent
solution of the same mechanical data.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor_core as tc
from .constitutive import MaterialModel
from .errors import ConfigError, ThermoplastError
from .mesh_fem import FieldLayout, rectangle_mesh
from .perfect_plasticity import PerfectPlasticity
from .scenarios import shear_loads
from .stepper import Loads, SolverOptions, initial_state, run, simpson_mean

METRICS = (
    "eps", "tau", "n_steps", "theta_std_max", "theta_std_T", "grad_theta_L2Q", "dist_K_L2", "dist_K_scaled",
    "e_err_max", "e_err_T", "balance_residual", "e_LinfL2", "p_rate_L1L2", "eps_u_rate_LinfL2",
    "min_theta",
)


@dataclass
class VVConfig:
    """Sweep definition: base shear scenario data and the eps ladder.

    ``heat_source`` and ``boundary_heat`` are the eps-independent densities
    (the eps-system receives eps times them).  The initial temperature is
    theta0 + theta0_amplitude cos(pi x / lx) cos(pi y / ly).
    """

    eps_list: tuple = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)
    beta: float = 0.75
    tau0: float = 0.1
    T: float = 1.0
    nx: int = 8
    ny: int = 8
    lx: float = 1.0
    ly: float = 1.0
    rate: float = 0.8
    heat_source: float = 0.5
    boundary_heat: float = 0.0
    theta0: float = 1.0
    theta0_amplitude: float = 0.5
    material: MaterialModel = field(default_factory=MaterialModel)
    pp_increments: int = 200
    sample_times: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    tol_outer: float = 1e-9

    def __post_init__(self):
        issues = []
        eps = np.asarray(self.eps_list, dtype=float)
        if eps.size == 0 or np.any(eps <= 0):
            issues.append(("eps_list", "all eps must be positive"))
        elif np.any(np.diff(eps) >= 0):
            issues.append(("eps_list", "eps values must be strictly decreasing"))
        if not self.beta > 0.5:
            issues.append(("beta", "scaling exponent beta must exceed 1/2"))
        if self.tau0 <= 0 or self.T <= 0:
            issues.append(("tau0", "tau0 and T must be positive"))
        if self.heat_source < 0 or self.boundary_heat < 0:
            issues.append(("heat_source", "heat sources must be nonnegative"))
        if self.theta0 - abs(self.theta0_amplitude) <= 0:
            issues.append(("theta0", "initial temperature must be positive"))
        if any(not 0 < s <= self.T for s in self.sample_times):
            issues.append(("sample_times", "sample times must lie in (0, T]"))
        if issues:
            raise ConfigError(issues)

    def tau_for(self, eps: float) -> float:
        """tau = T / ceil(T / (tau0 eps)), the largest step <= tau0 eps dividing T."""
        n = math.ceil(self.T / (self.tau0 * eps) - 1e-9)
        return self.T / n

    def layout(self) -> FieldLayout:
        return FieldLayout(rectangle_mesh(self.nx, self.ny, self.lx, self.ly, dirichlet=("bottom", "top")))

    def base_loads(self) -> Loads:
        loads = shear_loads(self.rate)
        H, h = self.heat_source, self.boundary_heat
        if H > 0:
            loads.heat_source = lambda t, x: np.full(len(x), H)
        if h > 0:
            loads.boundary_heat = lambda t, x: np.full(len(x), h)
        return loads

    def theta_initial(self, layout: FieldLayout) -> np.ndarray:
        x = layout.mesh.nodes
        return self.theta0 + self.theta0_amplitude * np.cos(np.pi * x[:, 0] / self.lx) * np.cos(np.pi * x[:, 1] / self.ly)


def _scaled(f, s):
    if f is None:
        return None
    return lambda t, x: s * np.asarray(f(t, x), dtype=float)


def rescale(mat: MaterialModel, loads: Loads, eps: float, beta: float) -> tuple[Loads, MaterialModel]:
    """Inputs of the eps-system built from the base material and data."""
    if eps <= 0:
        raise ConfigError([("eps", "eps must be positive")])
    if not beta > 0.5:
        raise ConfigError([("beta", "scaling exponent beta must exceed 1/2")])
    new_mat = replace(mat, lam_v=eps * np.asarray(mat.lam_v), mu_v=eps * np.asarray(mat.mu_v),
                      coupling=eps ** beta * np.asarray(mat.coupling), rho=mat.rho * eps ** 2,
                      heat_capacity=eps * mat.heat_capacity, dissipation_weight=eps * mat.dissipation_weight,
                      flow_viscosity=eps * mat.flow_viscosity)
    new_loads = replace(loads, heat_source=_scaled(loads.heat_source, eps),
                        boundary_heat=_scaled(loads.boundary_heat, eps))
    return new_loads, new_mat


def _interp(t: np.ndarray, values: np.ndarray, s: float) -> np.ndarray:
    k = int(np.clip(np.searchsorted(t, s) - 1, 0, len(t) - 2))
    a = (s - t[k]) / (t[k + 1] - t[k])
    return (1.0 - a) * values[k] + a * values[k + 1]


def _spatial_std(layout: FieldLayout, theta: np.ndarray) -> np.ndarray:
    m = layout.mass_lumped / layout.volume
    mean = theta @ m
    return np.sqrt(np.maximum(((theta - mean[:, None]) ** 2) @ m, 0.0))


@dataclass
class PPReference:
    t: np.ndarray
    e: np.ndarray
    p: np.ndarray
    var_R: np.ndarray  # cumulative Var_R(p; [0, t_k])


def pp_reference(cfg: VVConfig, layout: FieldLayout | None = None) -> PPReference:
    lay = layout or cfg.layout()
    solver = PerfectPlasticity(lay, cfg.material, cfg.base_loads())
    traj = solver.run(np.linspace(0.0, cfg.T, cfg.pp_increments + 1))
    p = traj.field("p")
    r = solver.mat.radius
    inc = np.concatenate([[0.0], np.cumsum(np.sum(r * tc.norm(np.diff(p, axis=0)) * lay.areas, axis=1))])
    return PPReference(traj.t, traj.field("e"), p, inc)


def source_work(cfg: VVConfig, layout: FieldLayout, s: float, t: float) -> float:
    """int_s^t (int H dx + int h dS) dr for the eps-independent densities."""
    loads = cfg.base_loads()
    if t <= s or (loads.heat_source is None and loads.boundary_heat is None):
        return 0.0
    return float((t - s) * np.sum(simpson_mean(lambda r: loads.heat_load(layout, r), s, t)))


def check_dissipation_thermal_balance(volume: float, theta_s: float, theta_t: float, var_r: float,
                                      sources: float) -> float:
    """|Omega| (Theta(t) - Theta(s)) - Var_R(p; [s, t]) - source work."""
    return volume * (theta_t - theta_s) - var_r - sources


def run_eps(cfg: VVConfig, eps: float, ref: PPReference | None = None) -> dict:
    """One eps-run and its metrics (a row of the sweep table)."""
    lay = cfg.layout()
    loads, mat = rescale(cfg.material, cfg.base_loads(), eps, cfg.beta)
    tau = cfg.tau_for(eps)
    init = initial_state(lay, loads, cfg.theta_initial(lay), tau)
    traj = run(lay, mat, init, loads, cfg.T, tau, SolverOptions(tol_outer=cfg.tol_outer))
    m = traj.material
    th = traj.theta
    A = lay.areas
    std = _spatial_std(lay, th)
    g = np.array([np.sum(A * np.sum(lay.grad_scalar(x) ** 2, axis=1)) for x in th[1:]])
    er = (traj.e[1:] - traj.e[:-1]) / tau
    pr = (traj.p[1:] - traj.p[:-1]) / tau
    thc = th[1:][:, lay.mesh.cells].mean(axis=2)
    sig = m.viscous(er) + m.elastic(traj.e[1:]) - thc[..., None] * m.coupling
    sd = tc.dev(sig)
    dist = np.maximum(tc.norm(sd) - traj.radius, 0.0)
    dist_t = np.sqrt(np.sum(A * dist ** 2, axis=1))
    v = traj.velocities()
    u_l2 = np.sqrt(np.einsum("ki,ki->k", v, (lay.mass_vec @ v.T).T))
    row = {
        "eps": eps, "tau": tau, "n_steps": traj.n_steps,
        "theta_std_max": float(std.max()), "theta_std_T": float(std[-1]),
        "grad_theta_L2Q": float(np.sqrt(tau * g.sum())),
        "dist_K_L2": float(np.sqrt(tau * np.sum(dist_t ** 2))),
        "e_LinfL2": float(np.max(np.sqrt(np.sum(A * tc.inner(traj.e, traj.e), axis=1)))),
        "p_rate_L1L2": float(tau * np.sum(np.sqrt(np.sum(A * tc.inner(pr, pr), axis=1)))),
        "eps_u_rate_LinfL2": float(eps * u_l2.max()),
        "min_theta": float(th.min()), "wall_time": traj.wall_time,
    }
    row["dist_K_scaled"] = row["dist_K_L2"] / math.sqrt(eps)
    Theta = th @ lay.mass_lumped / lay.volume
    row["Theta"] = [float(_interp(traj.t, Theta, s)) for s in cfg.sample_times]
    row["Theta0"] = float(Theta[0])
    if ref is not None:
        errs = []
        for s in cfg.sample_times:
            de = _interp(traj.t, traj.e, s) - _interp(ref.t, ref.e, s)
            errs.append(float(np.sqrt(np.sum(A * tc.inner(de, de)))))
        row["e_err"] = errs
        row["e_err_max"] = max(errs)
        row["e_err_T"] = float(np.sqrt(np.sum(A * tc.inner(traj.e[-1] - ref.e[-1], traj.e[-1] - ref.e[-1]))))
        res = []
        for s, Th in zip(cfg.sample_times, row["Theta"]):
            vr = float(np.interp(s, ref.t, ref.var_R))
            res.append(check_dissipation_thermal_balance(lay.volume, row["Theta0"], Th, vr,
                                                         source_work(cfg, lay, 0.0, s)))
        row["balance"] = res
        row["balance_residual"] = float(np.max(np.abs(res)))
    return row


def loglog_slope(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def trend_gate(eps, residuals, factor: float = 3.0) -> float:
    """factor x the value at the smallest eps predicted by a log-log fit over the other eps."""
    eps, res = np.asarray(eps, dtype=float), np.asarray(residuals, dtype=float)
    if len(eps) < 3:
        return float("nan")
    k, c = np.polyfit(np.log(eps[:-1]), np.log(np.maximum(res[:-1], 1e-300)), 1)
    return float(factor * np.exp(c + k * np.log(eps[-1])))


@dataclass
class VVSweepResult:
    config: VVConfig
    rows: list
    reference: PPReference | None = None
    failure: tuple | None = None

    @property
    def eps(self) -> np.ndarray:
        return np.array([r["eps"] for r in self.rows])

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def slopes(self) -> dict:
        e = self.eps
        return {name: loglog_slope(e, self.column(name))
                for name in ("grad_theta_L2Q", "dist_K_L2", "theta_std_T", "e_err_T", "balance_residual")
                if self.rows and name in self.rows[0]}

    def summary(self) -> dict:
        out = {"eps": self.eps.tolist(), "beta": self.config.beta, "tau0": self.config.tau0,
               "slopes": self.slopes(), "complete": self.failure is None,
               "failure": None if self.failure is None else {"eps": self.failure[0], "error": self.failure[1]}}
        if len(self.rows) >= 3 and "balance_residual" in self.rows[0]:
            out["balance_gate"] = trend_gate(self.eps, self.column("balance_residual"))
        return out


def _worker(args):
    cfg, eps, ref = args
    try:
        return run_eps(cfg, eps, ref), None
    except ThermoplastError as exc:
        return None, f"{type(exc).__name__}: {exc}"


def run_sweep(cfg: VVConfig, workers: int | None = 1, progress=None) -> VVSweepResult:
    """Run every eps; a failing run stops the sweep, keeping the finished rows.

    ``workers`` > 1 runs eps values in a process pool; rows are always ordered
    as in ``eps_list``.  ``workers=None`` uses one process per CPU.
    """
    ref = pp_reference(cfg)
    jobs = [(cfg, float(e), ref) for e in cfg.eps_list]
    n = (os.cpu_count() or 1) if workers is None else max(1, int(workers))
    if n > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(n, len(jobs))) as ex:
            results = list(ex.map(_worker, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_worker(job))
            if results[-1][1] is not None:
                break
    rows = []
    failure = None
    for job, (row, err) in zip(jobs, results):
        if err is not None:
            failure = (job[1], err)
            break
        rows.append(row)
        if progress is not None:
            progress(row)
    return VVSweepResult(cfg, rows, ref, failure)


def sweep_gates(result: VVSweepResult, factor: float = 2.0) -> dict:
    """Trend checks of a complete sweep: name -> (value, passed).

    ``factor`` bounds the eps^-1/2 normalized distance to K relative to its
    value at the largest eps.
    """
    if len(result.rows) < 3:
        return {"complete": (len(result.rows), False)}
    eps = result.eps
    g = result.column("grad_theta_L2Q")
    dk = result.column("dist_K_L2")
    dks = result.column("dist_K_scaled")
    std = result.column("theta_std_T")
    ee = result.column("e_err_T")
    br = result.column("balance_residual")
    slope = loglog_slope(eps, g)
    gate = trend_gate(eps, br)
    ratio = float(dks.max() / dks[0]) if dks[0] > 0 else (0.0 if dks.max() == 0 else float("inf"))
    return {
        "grad_theta_slope": (slope, 0.4 <= slope <= 0.7),
        "dist_K_nonincreasing": (float(np.max(np.diff(dk))), bool(np.all(np.diff(dk) <= 1e-12 * dk[:-1]))),
        "dist_K_scaled_bounded": (ratio, bool(dks.max() <= factor * dks[0])),
        "theta_std_T_nonincreasing": (float(np.max(std[1:] / std[:-1])), bool(np.all(std[1:] <= 1.1 * std[:-1]))),
        "e_err_T_decreasing": (float(np.max(ee[1:] / ee[:-1])), bool(np.all(np.diff(ee) < 0))),
        "balance_below_trend_gate": (float(br[-1] / gate), bool(br[-1] <= gate)),
        "complete": (len(result.rows), result.failure is None),
    }


def config_dict(cfg: VVConfig) -> dict:
    d = asdict(cfg)
    d.pop("material")
    return d
