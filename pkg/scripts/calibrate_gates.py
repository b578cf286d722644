"""Calibrate the balance-residual gate constant on the reference shear run.

The gate has the form C_res * (tol_outer * K + tau).  This script runs the
16x16 shear scenario for tau in {4e-3, 2e-3, 1e-3}, measures the largest
|residual| / (tol_outer * K + tau) of the mechanical and total balances over
all prefix intervals [0, t], and prints the frozen value: twice the largest
observed ratio, rounded up to one significant digit.

    python scripts/calibrate_gates.py
"""

import math

import numpy as np

from thermoplast import audits, scenarios
from thermoplast.stepper import SolverOptions, run


def measure(tau: float) -> float:
    sc = scenarios.shear2d(n=16, tau=tau)
    opts = SolverOptions()
    traj = run(sc.layout, sc.material, sc.initial, sc.loads, sc.T, tau, opts)
    terms = audits.energy_terms(traj)
    mech = np.max(np.abs(np.cumsum(audits.mechanical_step_residuals(terms))))
    tot = np.max(np.abs(np.cumsum(audits.total_step_slacks(terms))))
    scale = opts.tol_outer * traj.n_steps + tau
    print(f"tau={tau:g}  mech={mech:.3e}  total={tot:.3e}  ratio={max(mech, tot) / scale:.4f}")
    return max(mech, tot) / scale


def main():
    worst = max(measure(tau) for tau in (4e-3, 2e-3, 1e-3))
    raw = 2.0 * worst
    mag = 10.0 ** math.floor(math.log10(raw))
    frozen = math.ceil(raw / mag) * mag
    print(f"largest ratio {worst:.4f}; frozen GATE_C_RES = {frozen:g}")


if __name__ == "__main__":
    main()
