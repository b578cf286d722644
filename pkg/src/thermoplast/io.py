"""Plain-text outputs: ledgers, field snapshots, sweep tables.

Numbers are written with 17 significant digits so that every binary64
value survives a write/read round trip.  Column orders are fixed:

* trajectory.csv: ``audits.LEDGER_COLUMNS`` followed by one
  ``entropy_slack_<name>`` column per extra registered test function;
* pp_trajectory.csv: ``PP_COLUMNS``;
* sweep.csv: ``vv_driver.METRICS``;
* snapshots: nodes ``node x y u_x u_y theta`` and cells
  ``cell x y e_xx e_yy e_xy p_xx p_yy p_xy sigma_xx sigma_yy sigma_xy``
  (tensor entries are matrix components, not Mandel-scaled).
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .errors import ThermoplastError

PP_COLUMNS = ("t", "elastic", "var_R", "energy_residual", "margin_K", "equilibrium")


class OutputError(ThermoplastError):
    """Failure while writing or reading an output file; the message names the path."""


def fmt(x) -> str:
    return format(float(x), ".17g")


def _open(path, mode="w"):
    path = Path(path)
    try:
        if "w" in mode:
            path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, mode, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise OutputError(f"{path}: {exc.strerror or exc}") from exc


def write_table(path, names, rows) -> Path:
    """CSV with a header line and one row of floats per record."""
    path = Path(path)
    with _open(path) as fh:
        try:
            fh.write(",".join(names) + "\n")
            for row in rows:
                fh.write(",".join(fmt(x) for x in row) + "\n")
        except OSError as exc:
            raise OutputError(f"{path}: {exc.strerror or exc}") from exc
    return path


def read_table(path) -> tuple[list, np.ndarray]:
    """Header names and a float array (one row per record)."""
    with _open(path, "r") as fh:
        names = fh.readline().strip().split(",")
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    return names, np.array(rows, dtype=float).reshape(len(rows), len(names))


def write_trajectory(ledger, sink) -> Path:
    """Ledger CSV (one row per time node) at ``sink`` (a file path or directory)."""
    sink = Path(sink)
    path = sink / "trajectory.csv" if sink.suffix != ".csv" else sink
    names = ledger.names()
    return write_table(path, names, (ledger.row(k) for k in range(ledger.n_rows)))


def read_trajectory(path) -> dict:
    names, data = read_table(path)
    return {n: data[:, i] for i, n in enumerate(names)}


def _mat_entries(t: np.ndarray) -> np.ndarray:
    m = tc.to_matrix(t)
    return np.stack([m[..., 0, 0], m[..., 1, 1], m[..., 0, 1]], axis=-1)


def write_snapshot(traj, k: int, directory) -> tuple[Path, Path]:
    """Node and cell tables of time node k."""
    lay, mat = traj.layout, traj.material
    directory = Path(directory)
    tag = f"{k:06d}"
    x = lay.mesh.nodes
    u = traj.u[k].reshape(-1, 2)
    nodes = np.column_stack([np.arange(lay.n_nodes), x, u, traj.theta[k]])
    npath = write_table(directory / f"nodes_{tag}.csv", ["node", "x", "y", "u_x", "u_y", "theta"], nodes)
    if k > 0:
        er = (traj.e[k] - traj.e[k - 1]) / traj.tau
        sig = mat.stress(traj.e[k], er, lay.cell_mean(traj.theta[k]))
    else:
        sig = mat.stress(traj.e[0], np.zeros_like(traj.e[0]), lay.cell_mean(traj.theta[0]))
    cells = np.column_stack([np.arange(lay.n_cells), lay.mesh.barycenters(), _mat_entries(traj.e[k]),
                             _mat_entries(traj.p[k]), _mat_entries(sig)])
    cpath = write_table(directory / f"cells_{tag}.csv",
                        ["cell", "x", "y", "e_xx", "e_yy", "e_xy", "p_xx", "p_yy", "p_xy",
                         "sigma_xx", "sigma_yy", "sigma_xy"], cells)
    return npath, cpath


def snapshot_indices(t: np.ndarray, times) -> list:
    return sorted({int(np.argmin(np.abs(t - s))) for s in times})


def write_pp(traj, residuals: np.ndarray, reports: list, sink) -> Path:
    """Per-increment table of the rate-independent run."""
    from .perfect_plasticity import var_R

    sol = traj.solver
    lay, mat = sol.lay, sol.mat
    rows = []
    for k, st in enumerate(traj.states):
        q = 0.5 * float(np.dot(lay.areas, tc.inner(mat.elastic(st.e), st.e)))
        vr = var_R(lay, mat.radius, [s.p for s in traj.states[: k + 1]]) if k > 0 else 0.0
        rows.append([traj.t[k], q, vr, residuals[k], reports[k]["margin_K"], reports[k]["equilibrium"]])
    sink = Path(sink)
    path = sink / "pp_trajectory.csv" if sink.suffix != ".csv" else sink
    return write_table(path, PP_COLUMNS, rows)


def write_sweep(result, directory) -> tuple[Path, Path]:
    from .vv_driver import METRICS, config_dict

    directory = Path(directory)
    table = write_table(directory / "sweep.csv", METRICS, ([r.get(m, np.nan) for m in METRICS]
                                                           for r in result.rows))
    summary = result.summary()
    summary["config"] = config_dict(result.config)
    summary["rows"] = [{k: v for k, v in r.items() if k != "wall_time"} for r in result.rows]
    path = directory / "summary.json"
    with _open(path) as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    return table, path


def checksum(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def write_mesh(mesh, directory) -> Path:
    path = Path(directory) / "mesh.txt"
    try:
        os.makedirs(path.parent, exist_ok=True)
        mesh.write_text(path)
    except OSError as exc:
        raise OutputError(f"{path}: {exc.strerror or exc}") from exc
    return path
