"""Command line entry point.

  thermoplast run     --config run.toml --out out/    viscoplastic run + audits
  thermoplast pp-run  --config run.toml --out out/    rate-independent run
  thermoplast sweep   --config run.toml --out out/    vanishing-viscosity sweep
  thermoplast audit   --out out/ [--config run.toml]  re-check gates of a written trajectory
  thermoplast config                                 print the reference configuration

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 audit gate failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import audits, config as cfgmod, io
from .errors import ConfigError, NonConvergenceError, PositivityError, StabilityViolationError, ThermoplastError

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_AUDIT = 0, 2, 3, 4

log = logging.getLogger("thermoplast")


def _load(args) -> cfgmod.RunConfig:
    if args.config is None:
        cfg = cfgmod.parse_config('preset = "shear2d"\n')
    else:
        cfg = cfgmod.load_config(args.config)
    data = cfg.model_dump()
    changed = False
    if getattr(args, "tau", None) is not None:
        data["time"]["tau"] = args.tau
        data["sweep"]["tau0"] = args.tau
        data["pp"]["increments"] = max(1, int(round(cfg.time.T / args.tau)))
        changed = True
    if getattr(args, "eps_list", None):
        try:
            data["sweep"]["eps_list"] = [float(x) for x in args.eps_list.split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError([("--eps-list", f"not a comma separated list of numbers: {exc}")]) from None
        changed = True
    if changed:
        cfg = cfgmod.parse_config(cfgmod.dump_toml(cfgmod.RunConfig.model_validate(data).model_dump(mode="json")))
    return cfg


def _write_json(path: Path, obj) -> None:
    with io._open(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _gate_dict(checks: dict) -> dict:
    return {k: {"value": float(v), "passed": bool(p)} for k, (v, p) in checks.items()}


def run_gates(traj, cfg: cfgmod.RunConfig) -> dict:
    """Audit gates of a viscoplastic trajectory: name -> (value, passed)."""
    a = cfg.audit
    terms = audits.energy_terms(traj)
    gate = audits.balance_gate(traj, a.c_res)
    mech = np.cumsum(audits.mechanical_step_residuals(terms))
    tot = np.cumsum(audits.total_step_slacks(terms))
    ent = audits.check_entropy_inequality(traj, 1.0, a.entropy_grid)
    flow = audits.check_flow_rule(traj, a.flow_every, a.flow_competitors, a.seed)
    margin = float(traj.theta.min() - traj.theta_bar)
    out = {
        "positivity_margin": (margin, margin >= -1e-9),
        "mech_balance": (float(np.max(np.abs(mech))), float(np.max(np.abs(mech))) <= gate),
        "total_balance": (float(np.max(np.abs(tot))), float(np.max(np.abs(tot))) <= gate),
        "entropy_slack": (ent.worst_pair, ent.worst_pair >= -a.entropy_tol * max(ent.scale, 1.0)),
        "flow_rule_competitors": (flow["competitor_slack"], flow["competitor_slack"] >= -a.flow_tol),
        "flow_rule_self": (flow["self_slack"], flow["self_slack"] >= -a.flow_tol),
    }
    return out


def cmd_run(args) -> int:
    from .stepper import run

    cfg = _load(args)
    out = Path(args.out)
    lay, mat, loads, init = cfgmod.build_run(cfg)
    opts = cfgmod.build_solver_options(cfg)
    traj = run(lay, mat, init, loads, cfg.time.T, cfg.time.tau, opts,
               progress=(lambda k, n, rep: log.debug("step %d/%d outer %d", k, n, rep.outer_iterations)))
    if cfg.initial.theta_star is not None:
        traj.theta_bar = audits.positivity_bound(traj.material, cfg.time.T, cfg.initial.theta_star)
    ledger = audits.build_ledger(traj)
    io.write_trajectory(ledger, out)
    io.write_mesh(lay.mesh, out)
    for k in io.snapshot_indices(traj.t, cfg.output.snapshot_times):
        io.write_snapshot(traj, k, out / "snapshots")
    gates = run_gates(traj, cfg)
    _write_json(out / "audit.json", {"theta_bar": traj.theta_bar, "gates": _gate_dict(gates)})
    return _report(gates)


def _report(gates: dict) -> int:
    bad = [k for k, (_, p) in gates.items() if not p]
    for k, (v, p) in gates.items():
        print(f"{'PASS' if p else 'FAIL'} {k} = {v:.6e}")
    return EXIT_AUDIT if bad else EXIT_OK


def cmd_pp(args) -> int:
    from .perfect_plasticity import PerfectPlasticity, PPOptions, energy_balance_history

    cfg = _load(args)
    out = Path(args.out)
    lay = cfgmod.build_layout(cfg)
    mat = cfgmod.build_material(cfg, lay.n_cells)
    loads = cfgmod.build_loads(cfg)
    p = cfg.pp
    solver = PerfectPlasticity(lay, mat, loads, PPOptions(p.tol, p.tol_K, regularization=p.regularization))
    traj = solver.run(cfgmod.pp_steps(cfg))
    hist = energy_balance_history(traj, "left")
    reports = [solver.stability_check(s, float(t)) for s, t in zip(traj.states, traj.t)]
    io.write_pp(traj, hist, reports, out)
    io.write_mesh(lay.mesh, out)
    gates = {
        "stress_admissible": (max(r["margin_K"] for r in reports), all(r["margin_K"] <= p.tol_K for r in reports)),
        "equilibrium": (max(r["equilibrium"] for r in reports), all(r["passed"] for r in reports)),
        "energy_residual": (float(hist[-1]), bool(np.isfinite(hist[-1]))),
    }
    _write_json(out / "audit.json", {"gates": _gate_dict(gates)})
    return _report(gates)


def cmd_sweep(args) -> int:
    from .vv_driver import run_sweep, sweep_gates

    cfg = _load(args)
    out = Path(args.out)
    vcfg = cfgmod.build_vv(cfg)
    workers = 1 if args.serial else cfg.sweep.workers
    res = run_sweep(vcfg, workers=workers,
                    progress=lambda row: log.info("eps %.3g done: %d steps", row["eps"], row["n_steps"]))
    io.write_sweep(res, out)
    if res.failure is not None:
        print(f"sweep aborted at eps = {res.failure[0]}: {res.failure[1]}", file=sys.stderr)
        return EXIT_SOLVER
    gates = sweep_gates(res)
    _write_json(out / "audit.json", {"gates": _gate_dict(gates)})
    return _report(gates)


def cmd_audit(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    path = out / "trajectory.csv" if out.suffix != ".csv" else out
    cols = io.read_trajectory(path)
    t = cols["t"]
    K = len(t) - 1
    if K < 1:
        raise ConfigError([(str(path), "trajectory has no steps")])
    tau = float(t[1] - t[0])
    gate = cfg.audit.c_res * (cfg.solver.tol_outer * K + tau)
    ent = np.diff(cols["entropy_slack_const"])
    scale = max(1.0, float(np.max(np.abs(cols["thermal"]))))
    gates = {
        "positivity_margin": (float(cols["theta_bar_margin"].min()), float(cols["theta_bar_margin"].min()) >= -1e-9),
        "mech_balance": (float(np.max(np.abs(cols["mech_residual"]))), float(np.max(np.abs(cols["mech_residual"]))) <= gate),
        "total_balance": (float(np.max(np.abs(cols["total_slack"]))), float(np.max(np.abs(cols["total_slack"]))) <= gate),
        "entropy_slack": (audits._worst_pair(ent, cfg.audit.entropy_grid),
                          audits._worst_pair(ent, cfg.audit.entropy_grid) >= -cfg.audit.entropy_tol * scale),
    }
    return _report(gates)


def cmd_config(args) -> int:
    sys.stdout.write(cfgmod.reference_config(args.preset))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="thermoplast", description="Thermo-viscoplastic FEM simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (("run", cmd_run, "viscoplastic run with audits"),
                            ("pp-run", cmd_pp, "rate-independent perfect plasticity run"),
                            ("sweep", cmd_sweep, "vanishing-viscosity sweep"),
                            ("audit", cmd_audit, "re-check the gates of a written trajectory")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, default=None, help="TOML run configuration (default: shear2d preset)")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--serial", action="store_true", help="single process, deterministic output")
        p.add_argument("--tau", type=float, default=None, help="time step (sweep: tau0; pp-run: T/increments)")
        p.add_argument("--eps-list", default=None, help="comma separated eps values for the sweep")
        p.set_defaults(func=fn)
    p = sub.add_parser("config", help="print the reference configuration")
    p.add_argument("--preset", default="shear2d", choices=sorted(cfgmod.PRESETS))
    p.set_defaults(func=cmd_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergenceError, PositivityError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except StabilityViolationError as exc:
        print(f"audit failure: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except io.OutputError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return 1
    except ThermoplastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
