"""Reference scenarios used by the CLI presets and the test suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constitutive import MaterialModel
from .mesh_fem import FieldLayout, rectangle_mesh
from .stepper import Loads, State, initial_state


@dataclass
class Scenario:
    layout: FieldLayout
    material: MaterialModel
    loads: Loads
    initial: State
    T: float
    tau: float


def shear_loads(rate: float = 0.8) -> Loads:
    """Horizontal shear u = (rate t y, 0) imposed on the Dirichlet edges."""

    def w(t, x):
        return np.stack([rate * t * x[:, 1], np.zeros(len(x))], axis=1)

    def wdot(t, x):
        return np.stack([rate * x[:, 1], np.zeros(len(x))], axis=1)

    return Loads(dirichlet=w, dirichlet_rate=wdot)


def shear2d(n: int = 16, tau: float = 1e-3, T: float = 1.0, rate: float = 0.8, theta0: float = 1.0,
            material: MaterialModel | None = None) -> Scenario:
    """Unit square, clamped-sheared on bottom/top, traction-free sides."""
    mesh = rectangle_mesh(n, n, dirichlet=("bottom", "top"))
    lay = FieldLayout(mesh)
    mat = material or MaterialModel()
    loads = shear_loads(rate)
    init = initial_state(lay, loads, theta0, tau)
    return Scenario(lay, mat, loads, init, T, tau)


def single_element(tau: float = 1e-3, T: float = 1.0, rate: float = 0.8, theta0: float = 1.0,
                   material: MaterialModel | None = None) -> Scenario:
    """One crossed square fully clamped to a homogeneous shear ramp (0-D response)."""
    mesh = rectangle_mesh(1, 1, dirichlet="all")
    lay = FieldLayout(mesh)
    mat = material or MaterialModel()
    loads = shear_loads(rate)
    init = initial_state(lay, loads, theta0, tau)
    return Scenario(lay, mat, loads, init, T, tau)
