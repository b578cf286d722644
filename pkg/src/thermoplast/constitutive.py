"""Material laws, the von Mises yield ball and the viscoplastic return map.

Every function is vectorized over cells: tensors are Mandel arrays of shape
``(..., ns)`` and scalar material data broadcast against the leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .errors import NonConvergenceError

MAX_LOCAL_ITER = 100


@dataclass
class MaterialModel:
    """Isotropic Kelvin-Voigt thermo-viscoplastic material.

    Scalars may be floats or per-cell arrays.  ``coupling`` is the thermal
    stress tensor (the product of the elasticity tensor and the thermal
    expansion tensor) in Mandel form, shape (ns,) or (n_cells, ns).

    ``heat_capacity``, ``dissipation_weight`` and ``flow_viscosity`` generalize
    the heat equation to ``c th' + div(..) = H + w (R + nu|p'|^2 + D e':e' - th B:e')``
    with flow rule ``zeta + nu p' = sigma_D``; all equal 1 for the base model.
    """

    lam: np.ndarray | float = 1.0
    mu: np.ndarray | float = 1.0
    lam_v: np.ndarray | float = 0.0
    mu_v: np.ndarray | float = 0.5
    coupling: np.ndarray | None = None
    c0: float = 1.0
    c1: float | None = None
    mu_exp: float = 1.5
    radius: np.ndarray | float = 0.3
    psi: Callable | None = None
    psi_bounds: tuple[float, float] = (1.0, 1.0)
    rho: float = 1.0
    heat_capacity: float = 1.0
    dissipation_weight: float = 1.0
    flow_viscosity: float = 1.0
    d: int = 2

    def __post_init__(self):
        if self.coupling is None:
            self.coupling = 0.1 * tc.identity(self.d)
        self.coupling = np.asarray(self.coupling, dtype=float)
        if self.c1 is None:
            self.c1 = self.c0
        for name in ("lam", "mu", "lam_v", "mu_v", "radius"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        problems = []
        if np.any(self.mu <= 0):
            problems.append("shear modulus mu must be positive")
        if np.any(self.mu_v <= 0):
            problems.append("viscous shear modulus mu_v must be positive")
        if np.any(2 * self.mu + self.d * self.lam <= 0):
            problems.append("elasticity tensor must be positive definite (2 mu + d lam > 0)")
        if np.any(2 * self.mu_v + self.d * self.lam_v <= 0):
            problems.append("viscosity tensor must be positive definite (2 mu_v + d lam_v > 0)")
        if self.c0 <= 0 or self.c1 < self.c0:
            problems.append("conductivity constants need 0 < c0 <= c1")
        if self.mu_exp <= 1:
            problems.append("conductivity exponent must exceed 1")
        if np.any(self.radius <= 0):
            problems.append("yield radius must be positive")
        if self.rho <= 0:
            problems.append("mass density must be positive")
        if min(self.heat_capacity, self.dissipation_weight, self.flow_viscosity) <= 0:
            problems.append("heat capacity, dissipation weight and flow viscosity must be positive")
        if problems:
            raise ValueError("; ".join(problems))

    # ----- derived constants -----
    @property
    def ns(self) -> int:
        return tc.nsym(self.d)

    def c1_elastic(self) -> float:
        """Smallest eigenvalue of the elasticity tensor over cells."""
        return float(np.min(np.minimum(2 * self.mu, 2 * self.mu + self.d * self.lam)))

    def c1_viscous(self) -> float:
        return float(np.min(np.minimum(2 * self.mu_v, 2 * self.mu_v + self.d * self.lam_v)))

    def coupling_sup(self) -> float:
        return float(np.max(tc.norm(self.coupling)))

    def expansion(self) -> np.ndarray:
        """Thermal expansion tensor E with coupling = C E."""
        mu = np.asarray(self.mu)[..., None]
        lam = np.asarray(self.lam)
        out = self.coupling / (2.0 * mu)
        shift = lam * tc.trace(self.coupling) / (2.0 * self.mu * (2.0 * self.mu + self.d * lam))
        out[..., : self.d] -= np.asarray(shift)[..., None]
        return out

    def on_cells(self, n_cells: int) -> "MaterialModel":
        """Copy with all per-cell data broadcast to arrays of length n_cells."""
        kw = {}
        for name in ("lam", "mu", "lam_v", "mu_v", "radius"):
            kw[name] = np.broadcast_to(getattr(self, name), (n_cells,)).copy()
        kw["coupling"] = np.broadcast_to(self.coupling, (n_cells, self.ns)).copy()
        return replace(self, **kw)

    # ----- laws -----
    def elastic(self, e):
        return tc.apply_isotropic(self.mu, self.lam, e)

    def viscous(self, e_rate):
        return tc.apply_isotropic(self.mu_v, self.lam_v, e_rate)

    def stress(self, e, e_rate, theta):
        """sigma = D e' + C e - theta B."""
        theta = np.asarray(theta, dtype=float)
        return self.viscous(e_rate) + self.elastic(e) - theta[..., None] * self.coupling

    def elastic_matrix(self):
        return tc.isotropic_matrix(self.mu, self.lam, self.d)

    def viscous_matrix(self):
        return tc.isotropic_matrix(self.mu_v, self.lam_v, self.d)

    def kappa(self, theta):
        theta = np.asarray(theta, dtype=float)
        if np.any(theta <= 0):
            raise ValueError("conductivity law evaluated at nonpositive temperature")
        return self.c0 * (1.0 + theta ** self.mu_exp)

    def dkappa(self, theta):
        theta = np.asarray(theta, dtype=float)
        return self.c0 * self.mu_exp * theta ** (self.mu_exp - 1.0)

    def radius_at(self, theta):
        """Yield radius r(x) psi(theta) at cell temperatures theta."""
        theta = np.asarray(theta, dtype=float)
        if self.psi is None:
            return np.broadcast_to(self.radius, theta.shape).astype(float)
        lo, hi = self.psi_bounds
        return self.radius * np.clip(self.psi(theta), lo, hi)


def kappa_eval(theta, c0: float = 1.0, mu_exp: float = 1.5):
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0):
        raise ValueError("conductivity law evaluated at nonpositive temperature")
    return c0 * (1.0 + theta ** mu_exp)


def _check_trace_free(s: np.ndarray) -> None:
    gap = np.abs(tc.trace(s))
    if np.any(gap > 1e-12 * np.maximum(tc.norm(s), 1e-300) + 1e-300):
        raise ValueError("deviatoric input expected (nonzero trace)")


def project_K(sigma_dev, radius):
    """Radial projection onto the ball of trace-free tensors of given radius."""
    s = np.asarray(sigma_dev, dtype=float)
    _check_trace_free(s)
    n = tc.norm(s)
    r = np.asarray(radius, dtype=float)
    scale = np.where(n > r, r / np.where(n > 0, n, 1.0), 1.0)
    return s * scale[..., None]


def dissipation_R(p_rate, radius):
    """Support function of the yield ball: r |p'|."""
    return np.asarray(radius, dtype=float) * tc.norm(p_rate)


def _gpow(x, gamma):
    """g(x) = |x|^(gamma-2) x and its Mandel Jacobian."""
    n = tc.norm(x)
    w = n ** (gamma - 2.0)
    g = w[..., None] * x
    ns = x.shape[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        xh = np.where(n[..., None] > 0, x / np.where(n > 0, n, 1.0)[..., None], 0.0)
    jac = w[..., None, None] * (np.eye(ns) + (gamma - 2.0) * xh[..., :, None] * xh[..., None, :])
    return g, jac


def _flow_newton(s_lin, a, r, nu, tau, p, e0, gamma):
    """Solve 0 in r d|q| + nu q + tau g(p + tau q) - dev[s_lin - a q + tau g(e0 - tau q)].

    ``a`` is the deviatoric stiffness tau * dev(D/tau + C) of the coupled cell
    problem (zero for the stand-alone return map); e0 is None when the stress
    carries no power-law term.  Returns q, zeta, the Newton matrix and the
    power-law Jacobian at the new elastic strain (for tangents).
    """
    d = tc.dim_of(s_lin.shape[-1])
    V = tc.dev_basis(d)
    k = s_lin.shape[0]
    m = V.shape[1]
    use_g = gamma is not None
    zs = s_lin @ V
    if use_g:
        zs = zs - tau * (_gpow(p, gamma)[0] @ V)
        if e0 is not None:
            zs = zs + tau * (_gpow(e0, gamma)[0] @ V)
    ztest = np.linalg.norm(zs, axis=1)
    plastic = ztest > r
    z = np.where(plastic[:, None], ((ztest - r) / (nu + a) / np.where(ztest > 0, ztest, 1.0))[:, None] * zs, 0.0)

    def residual(zz, idx):
        q = zz @ V.T
        nz = np.linalg.norm(zz, axis=1)
        F = r[idx, None] * zz / nz[:, None] + (nu + a[idx])[:, None] * zz - (s_lin[idx] @ V)
        if use_g:
            F = F + tau * (_gpow(p[idx] + tau * q, gamma)[0] @ V)
            if e0 is not None:
                F = F - tau * (_gpow(e0[idx] - tau * q, gamma)[0] @ V)
        return F

    def matrix(zz, idx):
        q = zz @ V.T
        nz = np.linalg.norm(zz, axis=1)
        zh = zz / nz[:, None]
        J = (r[idx] / nz)[:, None, None] * (np.eye(m) - zh[:, :, None] * zh[:, None, :])
        J = J + (nu + a[idx])[:, None, None] * np.eye(m)
        if use_g:
            J = J + tau ** 2 * np.einsum("ia,kij,jb->kab", V, _gpow(p[idx] + tau * q, gamma)[1], V)
            if e0 is not None:
                J = J + tau ** 2 * np.einsum("ia,kij,jb->kab", V, _gpow(e0[idx] - tau * q, gamma)[1], V)
        return J

    idx = np.flatnonzero(plastic)
    scale = 1.0 + ztest[idx]
    iters = 0
    if idx.size and use_g:
        zp = z[idx]
        F = residual(zp, idx)
        fn = np.linalg.norm(F, axis=1)
        while True:
            active = fn > 1e-13 * scale
            if not np.any(active):
                break
            if iters >= MAX_LOCAL_ITER:
                raise NonConvergenceError("local flow-rule solve did not converge",
                                          {"local_residual": float(fn.max())})
            iters += 1
            ia = np.flatnonzero(active)
            J = matrix(zp[ia], idx[ia])
            dz = -np.linalg.solve(J, F[ia][:, :, None])[:, :, 0]
            alpha = np.ones(len(ia))
            for _ in range(40):
                trial = zp[ia] + alpha[:, None] * dz
                ok_dir = np.linalg.norm(trial, axis=1) > 0
                Ft = residual(np.where(ok_dir[:, None], trial, zp[ia]), idx[ia])
                ft = np.linalg.norm(Ft, axis=1)
                good = ok_dir & (ft <= (1 - 1e-4 * alpha) * fn[ia])
                if np.all(good):
                    break
                alpha = np.where(good, alpha, 0.5 * alpha)
            trial = zp[ia] + alpha[:, None] * dz
            zp[ia] = trial
            F[ia] = residual(trial, idx[ia])
            fn[ia] = np.linalg.norm(F[ia], axis=1)
        z[idx] = zp

    q = z @ V.T
    zeta = np.empty_like(s_lin)
    nzq = np.linalg.norm(z, axis=1)
    if idx.size:
        zeta[idx] = (r[idx] / nzq[idx])[:, None] * q[idx]
    el = ~plastic
    zeta[el] = zs[el] @ V.T
    J = np.zeros((k, m, m))
    if idx.size:
        J[idx] = matrix(z[idx], idx)
    gje = None
    if use_g and e0 is not None:
        gje = _gpow(e0 - tau * q, gamma)[1]
    return q, zeta, plastic, J, gje, iters


def return_map(sigma_dev, tau: float, radius, p_prev=None, gamma: float | None = None,
               viscosity: float = 1.0):
    """Solve zeta + nu p' + tau g(p_prev + tau p') = sigma_D with zeta in dR(p').

    Without the power-law regularization (gamma None) this is the closed form
    p' = (sigma_D - P_K(sigma_D)) / nu, zeta = P_K(sigma_D).
    Returns (p_rate, zeta) with the shape of sigma_dev.
    """
    s = np.asarray(sigma_dev, dtype=float)
    _check_trace_free(s)
    single = s.ndim == 1
    s2 = np.atleast_2d(s)
    k = s2.shape[0]
    r = np.broadcast_to(np.asarray(radius, dtype=float), (k,)).astype(float)
    p = np.zeros_like(s2) if p_prev is None else np.atleast_2d(np.asarray(p_prev, dtype=float))
    p = np.broadcast_to(p, s2.shape)
    q, zeta, *_ = _flow_newton(s2, np.zeros(k), r, float(viscosity), float(tau), p, None, gamma)
    if single:
        return q[0], zeta[0]
    return q, zeta


@dataclass
class CellUpdate:
    """Result of the cell-local elimination of the flow rule."""

    p_rate: np.ndarray
    p: np.ndarray
    e: np.ndarray
    zeta: np.ndarray
    sigma: np.ndarray
    tangent: np.ndarray
    plastic: np.ndarray
    iterations: int = 0
    extras: dict = field(default_factory=dict)


def viscoplastic_update(mat: MaterialModel, E, e_old, p_old, theta_c, radius, tau: float,
                        gamma: float | None = None, tangent: bool = True, closed_form: bool = True,
                        me: np.ndarray | None = None) -> CellUpdate:
    """Given the new total strain E, solve the cell flow rule and return stress and tangent.

    Unknown q = p' rate.  With e_new = E - p_old - tau q the stress is
    sigma = D (e_new - e_old)/tau + C e_new [+ tau g(e_new)] - theta B and the
    flow rule reads zeta + nu q + tau g(p_old + tau q) = dev sigma.
    Without regularization the radial closed form is used unless
    ``closed_form`` is False (then the general Newton path runs, for testing).
    ``me`` optionally supplies the cached Mandel matrices of D/tau + C.
    """
    nu = mat.flow_viscosity
    n = E.shape[0]
    e0 = E - p_old
    th = np.asarray(theta_c, dtype=float)[:, None]
    s_full = mat.viscous(e0 - e_old) / tau + mat.elastic(e0) - th * mat.coupling
    s_lin = tc.dev(s_full)
    a = np.broadcast_to(2.0 * mat.mu_v + 2.0 * mat.mu * tau, (n,)).astype(float)
    r = np.broadcast_to(np.asarray(radius, dtype=float), (n,)).astype(float)
    if me is None and tangent:
        me = mat.viscous_matrix() / tau + mat.elastic_matrix()
    if gamma is None and closed_form:
        ns_ = tc.norm(s_lin)
        plastic = ns_ > r
        safe = np.where(plastic, ns_, 1.0)
        shat = s_lin / safe[:, None]
        lam = np.where(plastic, (ns_ - r) / (nu + a), 0.0)
        q = lam[:, None] * shat
        zeta = np.where(plastic[:, None], r[:, None] * shat, s_lin)
        sigma = s_full - a[:, None] * q
        tan = None
        if tangent:
            tan = np.array(np.broadcast_to(me, (n,) + me.shape[-2:]), dtype=float)
            idx = np.flatnonzero(plastic)
            if idx.size:
                c1 = a[idx] ** 2 / (tau * (nu + a[idx]))
                rho = r[idx] / ns_[idx]
                P = tc.dev_projector(mat.d)
                sh = shat[idx]
                N = (1.0 - rho)[:, None, None] * P + rho[:, None, None] * sh[:, :, None] * sh[:, None, :]
                tan[idx] -= c1[:, None, None] * N
        return CellUpdate(q, p_old + tau * q, e0 - tau * q, zeta, sigma, tan, plastic, 0)

    q, zeta, plastic, J, gje, iters = _flow_newton(s_lin, a, r, nu, tau, p_old,
                                                   e0 if gamma is not None else None, gamma)
    p_new = p_old + tau * q
    e_new = e0 - tau * q
    sigma = mat.viscous(e_new - e_old) / tau + mat.elastic(e_new) - th * mat.coupling
    if gamma is not None:
        sigma = sigma + tau * _gpow(e_new, gamma)[0]
    tan = None
    if tangent:
        Me = np.broadcast_to(me, (n,) + me.shape[-2:])
        if gje is not None:
            Me = Me + tau * gje
        tan = np.array(Me, dtype=float)
        idx = np.flatnonzero(plastic)
        if idx.size:
            V = tc.dev_basis(mat.d)
            rhs = np.einsum("ia,kij->kaj", V, Me[idx])
            dz = np.linalg.solve(J[idx], rhs)
            dq = np.einsum("ia,kaj->kij", V, dz)
            tan[idx] = Me[idx] - tau * np.einsum("kij,kjl->kil", Me[idx], dq)
            tan[idx] = 0.5 * (tan[idx] + np.swapaxes(tan[idx], 1, 2))
    return CellUpdate(q, p_new, e_new, zeta, sigma, tan, plastic, iters)
