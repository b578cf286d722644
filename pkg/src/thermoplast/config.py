"""Run configuration: TOML schema, validation, presets and builders.

The file is TOML.  Every section is optional once a ``preset`` is named;
unknown keys are errors.  All problems found in a file are reported
together, each with its dotted key path.
"""

from __future__ import annotations

from typing import Literal, Optional, Union

import numpy as np
import tomli
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import tensor_core as tc
from .audits import GATE_C_RES
from .constitutive import MaterialModel
from .errors import ConfigError
from .mesh_fem import FieldLayout, rectangle_mesh
from .stepper import Loads, SolverOptions, initial_state

Table = list[tuple[float, float]]
SIDES = {"left", "right", "bottom", "top", "all"}


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_default=True)


class MeshCfg(_Block):
    nx: int = Field(gt=0)
    ny: int = Field(gt=0)
    lx: float = Field(1.0, gt=0)
    ly: float = Field(1.0, gt=0)
    dirichlet: Union[str, list[str]] = ["bottom", "top"]

    @field_validator("dirichlet")
    @classmethod
    def _sides(cls, v):
        sides = [v] if isinstance(v, str) else list(v)
        bad = [s for s in sides if s not in SIDES]
        if bad or not sides:
            raise ValueError(f"Dirichlet sides must be a nonempty subset of {sorted(SIDES)}, got {bad or sides}")
        return v


class MaterialCfg(_Block):
    lam: float = 1.0
    mu: float = Field(1.0, gt=0)
    lam_v: float = 0.0
    mu_v: float = Field(0.5, gt=0)
    coupling: Union[float, list[float]] = 0.1
    c0: float = Field(1.0, gt=0)
    c1: Optional[float] = None
    mu_exp: float = Field(1.5, gt=1)
    radius: float = Field(0.3, gt=0)
    psi_table: Optional[Table] = None
    rho: float = Field(1.0, gt=0)
    cell_table: Optional[str] = None


class LoadsCfg(_Block):
    dirichlet: Literal["shear", "none"] = "shear"
    shear_rate: float = 0.8
    amplitude: Union[Literal["ramp"], Table] = "ramp"
    body_force: tuple[float, float] = (0.0, 0.0)
    traction: tuple[float, float] = (0.0, 0.0)
    force_curve: Union[Literal["constant"], Table] = "constant"
    heat_source: Union[float, Table] = 0.0
    boundary_heat: Union[float, Table] = 0.0


class InitialCfg(_Block):
    theta0: float = Field(1.0, gt=0)
    theta_amplitude: float = 0.0
    theta_star: Optional[float] = None


class TimeCfg(_Block):
    T: float = Field(1.0, gt=0)
    tau: float = Field(1e-3, gt=0)


class SolverCfg(_Block):
    tol_outer: float = Field(1e-9, gt=0)
    max_outer: int = Field(50, ge=1)
    gamma: Optional[float] = Field(None, gt=4)
    max_newton: int = Field(50, ge=1)
    min_damping: float = Field(2.0 ** -30, gt=0, le=1)
    clamp_mechanics: bool = False


class PPCfg(_Block):
    increments: int = Field(100, ge=1)
    tol: float = Field(1e-13, gt=0)
    tol_K: float = Field(1e-9, gt=0)
    regularization: float = Field(1e-12, ge=0)


class SweepCfg(_Block):
    eps_list: list[float] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3]
    beta: float = Field(0.75, gt=0.5)
    tau0: float = Field(0.1, gt=0)
    nx: int = Field(8, gt=0)
    ny: int = Field(8, gt=0)
    heat_source: float = Field(0.5, ge=0)
    boundary_heat: float = Field(0.0, ge=0)
    theta0_amplitude: float = 0.5
    pp_increments: int = Field(200, ge=1)
    sample_times: Optional[list[float]] = None  # default: T/5, 2T/5, ..., T
    workers: Optional[int] = Field(None, ge=1)


class AuditCfg(_Block):
    c_res: float = Field(GATE_C_RES, gt=0)
    entropy_grid: int = Field(101, ge=2)
    entropy_tol: float = Field(1e-7, ge=0)
    flow_every: int = Field(10, ge=1)
    flow_competitors: int = Field(50, ge=1)
    flow_tol: float = Field(1e-10, ge=0)
    seed: int = 0
    alpha: float = Field(0.5, ge=0, lt=1)


class OutputCfg(_Block):
    snapshot_times: list[float] = []
    ledger: bool = True


class RunConfig(_Block):
    mode: Literal["viscoplastic", "perfect_plasticity", "vv_sweep"] = "viscoplastic"
    preset: Optional[Literal["shear2d", "single_element"]] = None
    mesh: MeshCfg
    material: MaterialCfg = MaterialCfg()
    loads: LoadsCfg = LoadsCfg()
    initial: InitialCfg = InitialCfg()
    time: TimeCfg = TimeCfg()
    solver: SolverCfg = SolverCfg()
    pp: PPCfg = PPCfg()
    sweep: SweepCfg = SweepCfg()
    audit: AuditCfg = AuditCfg()
    output: OutputCfg = OutputCfg()


PRESETS = {
    "shear2d": {"mesh": {"nx": 16, "ny": 16, "dirichlet": ["bottom", "top"]}},
    "single_element": {"mesh": {"nx": 1, "ny": 1, "dirichlet": "all"}},
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


_MESSAGES = {"extra_forbidden": "unknown key", "missing": "missing required key"}


def _semantic_issues(cfg: RunConfig) -> list:
    issues = []
    T = cfg.time.T

    def table(path, tab, nonneg=False):
        if isinstance(tab, (str, float, int)) or tab is None:
            if nonneg and isinstance(tab, (float, int)) and tab < 0:
                issues.append((path, "must be nonnegative"))
            return
        ts = [r[0] for r in tab]
        if len(tab) < 2:
            issues.append((path, "a curve table needs at least two rows"))
            return
        if any(b <= a for a, b in zip(ts, ts[1:])):
            issues.append((path, "curve times must be strictly increasing"))
        if ts[0] > 0 or ts[-1] < T:
            issues.append((path, f"curve must cover [0, T] = [0, {T}], got [{ts[0]}, {ts[-1]}]"))
        if nonneg and any(r[1] < 0 for r in tab):
            issues.append((path, "curve values must be nonnegative"))

    table("loads.amplitude", cfg.loads.amplitude)
    table("loads.force_curve", cfg.loads.force_curve)
    table("loads.heat_source", cfg.loads.heat_source, nonneg=True)
    table("loads.boundary_heat", cfg.loads.boundary_heat, nonneg=True)
    if cfg.material.psi_table is not None:
        tab = cfg.material.psi_table
        if len(tab) < 2 or any(b[0] <= a[0] for a, b in zip(tab, tab[1:])):
            issues.append(("material.psi_table", "needs >= 2 rows with increasing temperatures"))
        if any(r[1] <= 0 for r in tab):
            issues.append(("material.psi_table", "yield multiplier must be positive"))
    n = round(T / cfg.time.tau)
    if n < 1 or abs(n * cfg.time.tau - T) > 1e-9 * max(T, 1.0):
        issues.append(("time.tau", f"time step {cfg.time.tau} must divide T = {T}"))
    th_min = cfg.initial.theta0 - abs(cfg.initial.theta_amplitude)
    if th_min <= 0:
        issues.append(("initial.theta_amplitude", "initial temperature must stay positive"))
    ts = cfg.initial.theta_star
    if ts is not None:
        if ts <= 0:
            issues.append(("initial.theta_star",
                           "theta_star must be > 0: initial temperature needs a positive lower bound"))
        elif ts > th_min + 1e-14:
            issues.append(("initial.theta_star", "initial temperature must satisfy theta0 >= theta_star"))
    if cfg.material.c1 is not None and cfg.material.c1 < cfg.material.c0:
        issues.append(("material.c1", "conductivity constants need c0 <= c1"))
    if 2 * cfg.material.mu + 2 * cfg.material.lam <= 0:
        issues.append(("material.lam", "elasticity tensor must be positive definite (2 mu + d lam > 0)"))
    if 2 * cfg.material.mu_v + 2 * cfg.material.lam_v <= 0:
        issues.append(("material.lam_v", "viscosity tensor must be positive definite (2 mu_v + d lam_v > 0)"))
    if isinstance(cfg.material.coupling, list) and len(cfg.material.coupling) != 3:
        issues.append(("material.coupling", "tensor form needs 3 Mandel entries [xx, yy, sqrt2 xy]"))
    eps = cfg.sweep.eps_list
    if not eps or any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        issues.append(("sweep.eps_list", "eps values must be positive and strictly decreasing"))
    if any(not 0 < s <= T for s in cfg.sweep.sample_times or ()):
        issues.append(("sweep.sample_times", "sample times must lie in (0, T]"))
    if cfg.sweep.theta0_amplitude >= cfg.initial.theta0:
        issues.append(("sweep.theta0_amplitude", "initial temperature must stay positive"))
    if any(not 0 <= s <= T for s in cfg.output.snapshot_times):
        issues.append(("output.snapshot_times", "snapshot times must lie in [0, T]"))
    return issues


def parse_config(text: str) -> RunConfig:
    """Validated RunConfig from TOML text; raises ConfigError listing every problem."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError([(f"line {line}" if line else "<text>", f"parse error: {exc}")]) from exc
    preset = raw.get("preset")
    if isinstance(preset, str) and preset in PRESETS:
        raw = _merge(PRESETS[preset], raw)
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        issues = []
        for err in exc.errors():
            path = ".".join(str(p) for p in err["loc"])
            msg = _MESSAGES.get(err["type"], err["msg"])
            issues.append((path, msg))
        raise ConfigError(issues) from None
    issues = _semantic_issues(cfg)
    if issues:
        raise ConfigError(issues)
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode("utf-8")
    except OSError as exc:
        raise ConfigError([(str(path), f"cannot read configuration: {exc.strerror}")]) from exc
    return parse_config(text)


# ----- reference configuration -----

def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot encode {v!r}")


def dump_toml(data: dict) -> str:
    lines = []
    for k, v in data.items():
        if not isinstance(v, dict) and v is not None:
            lines.append(f"{k} = {_toml_value(v)}")
    for k, v in data.items():
        if isinstance(v, dict):
            lines.append("")
            lines.append(f"[{k}]")
            for kk, vv in v.items():
                if vv is None:
                    lines.append(f"# {kk} = (unset)")
                else:
                    lines.append(f"{kk} = {_toml_value(vv)}")
    return "\n".join(lines) + "\n"


def reference_config(preset: str = "shear2d") -> str:
    """TOML text listing every key with its default value."""
    cfg = parse_config(f'preset = "{preset}"\n')
    return dump_toml(cfg.model_dump(mode="json"))


# ----- builders -----

def _curve(spec, default=None):
    """(value(t), rate(t)) of a constant, a ramp or a piecewise-linear table."""
    if spec == "ramp":
        return (lambda t: t), (lambda t: 1.0)
    if spec == "constant":
        return (lambda t: 1.0), (lambda t: 0.0)
    if isinstance(spec, (int, float)):
        c = float(spec)
        return (lambda t: c), (lambda t: 0.0)
    tab = np.asarray(spec, dtype=float)
    ts, vs = tab[:, 0], tab[:, 1]
    slopes = np.diff(vs) / np.diff(ts)

    def rate(t):
        k = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(slopes) - 1))
        return float(slopes[k])

    return (lambda t: float(np.interp(t, ts, vs))), rate


def _psi(table):
    tab = np.asarray(table, dtype=float)
    return lambda th: np.interp(th, tab[:, 0], tab[:, 1])


def load_cell_table(path, n_cells: int) -> dict:
    """Per-cell material columns from a whitespace table with a header line."""
    try:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            data = np.loadtxt(fh, ndmin=2)
    except OSError as exc:
        raise ConfigError([("material.cell_table", f"{path}: {exc.strerror}")]) from exc
    header = [h for h in header if h != "#"]
    allowed = {"lam", "mu", "lam_v", "mu_v", "radius"}
    issues = [("material.cell_table", f"unknown column {h!r}") for h in header if h not in allowed | {"cell"}]
    if data.shape != (n_cells, len(header)):
        issues.append(("material.cell_table", f"expected {n_cells} rows of {len(header)} values, got {data.shape}"))
    if issues:
        raise ConfigError(issues)
    cols = {h: data[:, i] for i, h in enumerate(header)}
    if "cell" in cols:
        order = np.argsort(cols.pop("cell"))
        cols = {k: v[order] for k, v in cols.items()}
    return cols


def build_material(cfg: RunConfig, n_cells: int | None = None) -> MaterialModel:
    m = cfg.material
    coupling = (m.coupling * tc.identity(2) if isinstance(m.coupling, (int, float))
                else np.asarray(m.coupling, dtype=float))
    kw = dict(lam=m.lam, mu=m.mu, lam_v=m.lam_v, mu_v=m.mu_v, coupling=coupling, c0=m.c0, c1=m.c1,
              mu_exp=m.mu_exp, radius=m.radius, rho=m.rho)
    if m.psi_table is not None:
        vals = [r[1] for r in m.psi_table]
        kw.update(psi=_psi(m.psi_table), psi_bounds=(min(vals), max(vals)))
    if m.cell_table is not None:
        if n_cells is None:
            raise ConfigError([("material.cell_table", "per-cell data need the mesh")])
        kw.update(load_cell_table(m.cell_table, n_cells))
    try:
        return MaterialModel(**kw)
    except ValueError as exc:
        raise ConfigError([("material", str(exc))]) from exc


def build_layout(cfg: RunConfig) -> FieldLayout:
    g = cfg.mesh
    sides = g.dirichlet if isinstance(g.dirichlet, str) else tuple(g.dirichlet)
    if sides == "all" or (not isinstance(sides, str) and "all" in sides):
        sides = "all"
    return FieldLayout(rectangle_mesh(g.nx, g.ny, g.lx, g.ly, dirichlet=sides))


def build_loads(cfg: RunConfig) -> Loads:
    ld = cfg.loads
    loads = Loads()
    if ld.dirichlet == "shear":
        amp, damp = _curve(ld.amplitude)
        rate = ld.shear_rate
        loads.dirichlet = lambda t, x: np.stack([rate * amp(t) * x[:, 1], np.zeros(len(x))], axis=1)
        loads.dirichlet_rate = lambda t, x: np.stack([rate * damp(t) * x[:, 1], np.zeros(len(x))], axis=1)
    fc, _ = _curve(ld.force_curve)
    if any(ld.body_force):
        f = np.asarray(ld.body_force, dtype=float)
        loads.body_force = lambda t, x: np.broadcast_to(fc(t) * f, (len(x), 2)).copy()
    if any(ld.traction):
        g = np.asarray(ld.traction, dtype=float)
        loads.traction = lambda t, x: np.broadcast_to(fc(t) * g, (len(x), 2)).copy()
    for name in ("heat_source", "boundary_heat"):
        spec = getattr(ld, name)
        if isinstance(spec, (int, float)) and spec == 0:
            continue
        val, _ = _curve(spec)
        setattr(loads, name, (lambda v: lambda t, x: np.full(len(x), v(t)))(val))
    return loads


def build_theta0(cfg: RunConfig, layout: FieldLayout) -> np.ndarray:
    x = layout.mesh.nodes
    amp = cfg.initial.theta_amplitude
    return cfg.initial.theta0 + amp * np.cos(np.pi * x[:, 0] / cfg.mesh.lx) * np.cos(np.pi * x[:, 1] / cfg.mesh.ly)


def build_solver_options(cfg: RunConfig, theta_bar: float | None = None) -> SolverOptions:
    s = cfg.solver
    return SolverOptions(tol_outer=s.tol_outer, max_outer=s.max_outer, gamma=s.gamma, max_newton=s.max_newton,
                         min_damping=s.min_damping, positivity_floor=theta_bar,
                         clamp_mechanics=s.clamp_mechanics)


def build_run(cfg: RunConfig):
    """(layout, material, loads, initial state) of a viscoplastic run."""
    lay = build_layout(cfg)
    mat = build_material(cfg, lay.n_cells)
    loads = build_loads(cfg)
    init = initial_state(lay, loads, build_theta0(cfg, lay), cfg.time.tau)
    return lay, mat, loads, init


def theta_star(cfg: RunConfig, initial_theta: np.ndarray) -> float:
    return float(np.min(initial_theta)) if cfg.initial.theta_star is None else cfg.initial.theta_star


def build_vv(cfg: RunConfig):
    from .vv_driver import VVConfig

    s = cfg.sweep
    if cfg.loads.dirichlet != "shear" or cfg.loads.amplitude != "ramp":
        raise ConfigError([("loads", "the sweep uses the shear ramp; other load curves are not supported")])
    return VVConfig(eps_list=tuple(s.eps_list), beta=s.beta, tau0=s.tau0, T=cfg.time.T, nx=s.nx, ny=s.ny,
                    lx=cfg.mesh.lx, ly=cfg.mesh.ly, rate=cfg.loads.shear_rate, heat_source=s.heat_source,
                    boundary_heat=s.boundary_heat, theta0=cfg.initial.theta0,
                    theta0_amplitude=s.theta0_amplitude, material=build_material(cfg),
                    pp_increments=s.pp_increments, sample_times=tuple(s.sample_times or [k * cfg.time.T / 5 for k in range(1, 6)]),
                    tol_outer=cfg.solver.tol_outer)


def pp_steps(cfg: RunConfig) -> np.ndarray:
    return np.linspace(0.0, cfg.time.T, cfg.pp.increments + 1)


def n_steps(cfg: RunConfig) -> int:
    return int(round(cfg.time.T / cfg.time.tau))


__all__ = ["RunConfig", "parse_config", "load_config", "reference_config", "build_run", "build_vv",
           "build_material", "build_layout", "build_loads", "build_solver_options", "load_cell_table",
           "PRESETS"]
