"""Structured triangulations and P1/P0 finite element assembly.

Displacements and temperature are continuous piecewise linear (P1), strains,
plastic strains and stresses are cell-wise constant (P0, Mandel storage).
Vector dofs are interleaved: node ``i`` owns dofs ``2i`` (x) and ``2i+1`` (y).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp

from . import tensor_core as tc
from .errors import DegenerateMeshError, KornViolationError, PositivityError

SIDES = ("left", "right", "bottom", "top")
DIRICHLET = "dirichlet"
NEUMANN = "neumann"


@dataclass
class Mesh:
    """Triangulated planar domain with a labelled boundary."""

    nodes: np.ndarray
    cells: np.ndarray
    boundary_edges: np.ndarray
    edge_labels: np.ndarray
    edge_sides: np.ndarray = field(default=None)

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float)
        self.cells = np.ascontiguousarray(self.cells, dtype=np.int64)
        self.boundary_edges = np.ascontiguousarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
        self.edge_labels = np.asarray(self.edge_labels, dtype=object)
        if self.edge_sides is None:
            self.edge_sides = np.array([""] * len(self.boundary_edges), dtype=object)
        if len(self.edge_labels) != len(self.boundary_edges):
            raise ValueError("every boundary edge needs exactly one label")
        bad = [lab for lab in self.edge_labels if lab not in (DIRICHLET, NEUMANN)]
        if bad:
            raise ValueError(f"unknown boundary labels {sorted(set(bad))}")
        if not np.any(self.edge_labels == DIRICHLET):
            raise ValueError("the Dirichlet part of the boundary must be nonempty")
        areas = self.signed_areas()
        if np.any(areas <= 0.0):
            k = int(np.argmin(areas))
            raise DegenerateMeshError(f"cell {k} has nonpositive signed area {areas[k]:.3e}")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    def signed_areas(self) -> np.ndarray:
        x = self.nodes[self.cells]
        d1 = x[:, 1] - x[:, 0]
        d2 = x[:, 2] - x[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_lengths(self) -> np.ndarray:
        x = self.nodes[self.boundary_edges]
        return np.linalg.norm(x[:, 1] - x[:, 0], axis=1)

    def edge_normals(self) -> np.ndarray:
        """Outward unit normals; boundary edges are stored counter-clockwise."""
        x = self.nodes[self.boundary_edges]
        t = x[:, 1] - x[:, 0]
        n = np.stack([t[:, 1], -t[:, 0]], axis=1)
        return n / np.linalg.norm(n, axis=1)[:, None]

    def dirichlet_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges[self.edge_labels == DIRICHLET])

    def barycenters(self) -> np.ndarray:
        return self.nodes[self.cells].mean(axis=1)

    def write_text(self, path) -> None:
        """Plain-text listing: node records, then cell records."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# nodes {self.n_nodes}\n")
            for i, (x, y) in enumerate(self.nodes):
                fh.write(f"node {i} {x!r} {y!r}\n")
            fh.write(f"# cells {self.n_cells}\n")
            for k, (a, b, c) in enumerate(self.cells):
                fh.write(f"cell {k} {a} {b} {c}\n")


def _side_selector(dirichlet) -> set:
    if isinstance(dirichlet, str):
        dirichlet = SIDES if dirichlet == "all" else (dirichlet,)
    sel = set(dirichlet)
    unknown = sel - set(SIDES)
    if unknown:
        raise ValueError(f"unknown boundary sides {sorted(unknown)}; expected a subset of {SIDES}")
    return sel


def rectangle_mesh(nx: int, ny: int, lx: float = 1.0, ly: float = 1.0,
                   dirichlet: str | Iterable[str] = ("left",)) -> Mesh:
    """Crossed-triangle mesh of [0, lx] x [0, ly].

    Every grid rectangle is split into four triangles through its center.  For
    square cells all triangles are right isosceles, so the P1 stiffness matrix
    has nonpositive off-diagonals (discrete maximum principle).
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be positive")
    sel = _side_selector(dirichlet)
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    cx, cy = np.meshgrid(0.5 * (xs[:-1] + xs[1:]), 0.5 * (ys[:-1] + ys[1:]), indexing="xy")
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)
    nodes = np.vstack([grid, centers])

    def g(i, j):
        return j * (nx + 1) + i

    n_grid = (nx + 1) * (ny + 1)
    cells = []
    for j in range(ny):
        for i in range(nx):
            c = n_grid + j * nx + i
            a, b, d, e = g(i, j), g(i + 1, j), g(i + 1, j + 1), g(i, j + 1)
            cells += [(a, b, c), (b, d, c), (d, e, c), (e, a, c)]

    edges, sides = [], []
    for i in range(nx):
        edges.append((g(i, 0), g(i + 1, 0)))
        sides.append("bottom")
    for j in range(ny):
        edges.append((g(nx, j), g(nx, j + 1)))
        sides.append("right")
    for i in range(nx, 0, -1):
        edges.append((g(i, ny), g(i - 1, ny)))
        sides.append("top")
    for j in range(ny, 0, -1):
        edges.append((g(0, j), g(0, j - 1)))
        sides.append("left")
    labels = [DIRICHLET if s in sel else NEUMANN for s in sides]
    return Mesh(nodes, np.array(cells), np.array(edges), np.array(labels, dtype=object),
                np.array(sides, dtype=object))


class _Pattern:
    """Fixed CSR sparsity pattern with deterministic scatter-add."""

    def __init__(self, rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]):
        key = rows.astype(np.int64) * shape[1] + cols.astype(np.int64)
        uniq, self.inv = np.unique(key, return_inverse=True)
        self.indices = (uniq % shape[1]).astype(np.int32)
        r = uniq // shape[1]
        self.indptr = np.zeros(shape[0] + 1, dtype=np.int32)
        np.add.at(self.indptr, r + 1, 1)
        self.indptr = np.cumsum(self.indptr).astype(np.int32)
        self.shape = shape
        self.nnz = len(uniq)

    def build(self, values: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.inv, weights=values.ravel(), minlength=self.nnz)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)


class FieldLayout:
    """P1 vector / P1 scalar / P0 tensor spaces on a mesh, with assembly."""

    def __init__(self, mesh: Mesh):
        if mesh.dim != 2:
            raise NotImplementedError("only planar meshes are supported")
        self.mesh = mesh
        self.d = 2
        self.ns = tc.nsym(2)
        self.n_nodes = mesh.n_nodes
        self.n_cells = mesh.n_cells
        self.ndof = self.d * self.n_nodes
        self.quadrature = "barycenter (one point per cell)"
        self.areas = mesh.signed_areas()
        self.volume = float(self.areas.sum())

        x = mesh.nodes[mesh.cells]
        # grad phi_a = rot90(opposite edge) / (2A)
        e0 = x[:, 2] - x[:, 1]
        e1 = x[:, 0] - x[:, 2]
        e2 = x[:, 1] - x[:, 0]
        edges = np.stack([e0, e1, e2], axis=1)
        self.grads = np.stack([-edges[..., 1], edges[..., 0]], axis=-1) / (2.0 * self.areas[:, None, None])

        # element strain operator B_e: (m, ns, 6) acting on [u0x,u0y,u1x,u1y,u2x,u2y]
        m = self.n_cells
        be = np.zeros((m, 3, 6))
        gx, gy = self.grads[..., 0], self.grads[..., 1]
        be[:, 0, 0::2] = gx
        be[:, 1, 1::2] = gy
        be[:, 2, 0::2] = gy / np.sqrt(2.0)
        be[:, 2, 1::2] = gx / np.sqrt(2.0)
        self.be = be
        c = mesh.cells
        self.cell_dofs = np.stack([2 * c[:, 0], 2 * c[:, 0] + 1, 2 * c[:, 1], 2 * c[:, 1] + 1,
                                   2 * c[:, 2], 2 * c[:, 2] + 1], axis=1)
        rows = np.repeat(np.arange(m * 3), 6)
        cols = np.repeat(self.cell_dofs[:, None, :], 3, axis=1).ravel()
        self.B = sp.csr_matrix((be.ravel(), (rows, cols)), shape=(m * 3, self.ndof))
        self.BtA = (self.B.T @ sp.diags(np.repeat(self.areas, 3))).tocsr()

        self._vec_pattern = _Pattern(np.repeat(self.cell_dofs, 6, axis=1).ravel(),
                                     np.tile(self.cell_dofs, (1, 6)).ravel(),
                                     (self.ndof, self.ndof))
        self._sc_pattern = _Pattern(np.repeat(c, 3, axis=1).ravel(), np.tile(c, (1, 3)).ravel(),
                                    (self.n_nodes, self.n_nodes))

        # scalar consistent and lumped mass
        mloc = (np.ones((3, 3)) + np.eye(3)) / 12.0
        self.mass = self._sc_pattern.build(self.areas[:, None, None] * mloc[None])
        self.mass_lumped = np.bincount(c.ravel(), weights=np.repeat(self.areas / 3.0, 3),
                                       minlength=self.n_nodes)
        vloc = np.kron(mloc, np.eye(2))
        self.mass_vec = self._vec_pattern.build(self.areas[:, None, None] * vloc[None])
        self.gg = np.einsum("cai,cbi->cab", self.grads, self.grads)
        self.stiffness_unit = self._sc_pattern.build(self.areas[:, None, None] * self.gg)

        # Dirichlet bookkeeping
        dn = mesh.dirichlet_nodes()
        self.dirichlet_node_set = dn
        self.dirichlet_dofs = np.sort(np.concatenate([2 * dn, 2 * dn + 1]))
        mask = np.ones(self.ndof, dtype=bool)
        mask[self.dirichlet_dofs] = False
        self.free_mask = mask
        self.free_dofs = np.flatnonzero(mask)
        free_index = np.full(self.ndof, -1)
        free_index[self.free_dofs] = np.arange(len(self.free_dofs))
        fr = free_index[np.repeat(self.cell_dofs, 6, axis=1).ravel()]
        fc = free_index[np.tile(self.cell_dofs, (1, 6)).ravel()]
        self._ff_keep = (fr >= 0) & (fc >= 0)
        nf = len(self.free_dofs)
        self._ff_pattern = _Pattern(fr[self._ff_keep], fc[self._ff_keep], (nf, nf))
        self.mass_vec_ff = self.mass_vec[self.free_dofs][:, self.free_dofs].tocsr()

        # boundary data
        self.edge_len = mesh.edge_lengths()
        self.neumann_edges = mesh.boundary_edges[mesh.edge_labels == NEUMANN]
        self.neumann_len = self.edge_len[mesh.edge_labels == NEUMANN]
        self.boundary_lumped = np.bincount(mesh.boundary_edges.ravel(),
                                           weights=np.repeat(self.edge_len / 2.0, 2),
                                           minlength=self.n_nodes)

    # ----- pointwise maps -----
    def sym_grad(self, u: np.ndarray) -> np.ndarray:
        return (self.B @ np.asarray(u, dtype=float)).reshape(self.n_cells, self.ns)

    def grad_scalar(self, theta: np.ndarray) -> np.ndarray:
        return np.matmul(np.asarray(theta)[self.mesh.cells][:, None, :], self.grads)[:, 0, :]

    def cell_mean(self, theta: np.ndarray) -> np.ndarray:
        return np.asarray(theta)[self.mesh.cells].mean(axis=1)

    def node_field(self, f: Callable, t: float) -> np.ndarray:
        """Interpolate a vector field f(t, x) -> (n, 2) into P1 dof order."""
        v = np.asarray(f(t, self.mesh.nodes), dtype=float).reshape(self.n_nodes, self.d)
        return v.ravel()

    def cell_to_node_lumped(self, q: np.ndarray) -> np.ndarray:
        """Lumped P1 load of a P0 density q: sum over cells of A/3 q."""
        return np.bincount(self.mesh.cells.ravel(), weights=np.repeat(self.areas * q / 3.0, 3),
                           minlength=self.n_nodes)

    # ----- assembly -----
    def assemble_div_sigma(self, sigma: np.ndarray, restrict: bool = True) -> np.ndarray:
        """Dual vector v -> int sigma : eps(v) dx (free dofs only if ``restrict``)."""
        full = self.BtA @ np.asarray(sigma, dtype=float).reshape(-1)
        return full[self.free_dofs] if restrict else full

    def assemble_tangent(self, d_cells: np.ndarray, free_only: bool = False) -> sp.csr_matrix:
        """Sparse matrix of int D eps(u) : eps(v) for cell-wise Mandel matrices D.

        With ``free_only`` the block acting between non-Dirichlet dofs is returned.
        """
        d_cells = np.broadcast_to(d_cells, (self.n_cells, self.ns, self.ns))
        ke = np.matmul(np.swapaxes(self.be, 1, 2), np.matmul(d_cells, self.be)) * self.areas[:, None, None]
        if free_only:
            return self._ff_pattern.build(ke.reshape(-1)[self._ff_keep])
        return self._vec_pattern.build(ke)

    def stiffness(self, coef: np.ndarray | float = 1.0) -> sp.csr_matrix:
        """Scalar P1 stiffness with cell-wise constant coefficient."""
        coef = np.broadcast_to(np.asarray(coef, dtype=float), (self.n_cells,))
        return self._sc_pattern.build((coef * self.areas)[:, None, None] * self.gg)

    def assemble_nonlinear_heat(self, theta: np.ndarray, kappa: Callable, dkappa: Callable | None = None,
                                jacobian: bool = True):
        """Conduction operator v -> int kappa(theta) grad theta . grad v.

        kappa is evaluated at the barycentric value of theta (one-point rule).
        Returns (value, jacobian) where jacobian is None if not requested.
        """
        theta = np.asarray(theta, dtype=float)
        if np.any(theta <= 0.0):
            i = int(np.argmin(theta))
            raise PositivityError(f"nonpositive nodal temperature {theta[i]:.3e} at node {i}")
        tc_ = self.cell_mean(theta)
        gth = self.grad_scalar(theta)
        kap = kappa(tc_)
        flux = (kap * self.areas)[:, None] * gth
        loc = np.matmul(self.grads, flux[:, :, None])[:, :, 0]
        value = np.bincount(self.mesh.cells.ravel(), weights=loc.ravel(), minlength=self.n_nodes)
        if not jacobian:
            return value, None
        ke = (kap * self.areas)[:, None, None] * self.gg
        if dkappa is not None:
            dk = dkappa(tc_)
            ke = ke + np.repeat(((dk / (3.0 * kap))[:, None] * loc)[:, :, None], 3, axis=2)
        return value, self._sc_pattern.build(ke)

    def traction_load(self, g_nodes: np.ndarray) -> np.ndarray:
        """int_{Gamma_Neu} g . v dS for g linear on each edge (nodal values (n, 2))."""
        g_nodes = np.asarray(g_nodes, dtype=float).reshape(self.n_nodes, self.d)
        out = np.zeros((self.n_nodes, self.d))
        a, b = self.neumann_edges[:, 0], self.neumann_edges[:, 1]
        w = self.neumann_len[:, None] / 6.0
        np.add.at(out, a, w * (2.0 * g_nodes[a] + g_nodes[b]))
        np.add.at(out, b, w * (g_nodes[a] + 2.0 * g_nodes[b]))
        return out.ravel()

    def body_load(self, f_nodes: np.ndarray) -> np.ndarray:
        return self.mass_vec @ np.asarray(f_nodes, dtype=float).reshape(-1)

    # ----- norms -----
    def l2_cells(self, q: np.ndarray) -> float:
        q = np.asarray(q, dtype=float)
        sq = q * q if q.ndim == 1 else np.sum(q * q, axis=-1)
        return float(np.sqrt(np.dot(self.areas, sq)))

    def h1_vector(self, u: np.ndarray) -> float:
        u = np.asarray(u, dtype=float)
        ux, uy = u[0::2], u[1::2]
        l2 = u @ (self.mass_vec @ u)
        semi = np.dot(self.areas, np.sum(self.grad_scalar(ux) ** 2 + self.grad_scalar(uy) ** 2, axis=1))
        return float(np.sqrt(l2 + semi))

    def h1_scalar(self, th: np.ndarray) -> float:
        th = np.asarray(th, dtype=float)
        return float(np.sqrt(th @ (self.mass @ th) + th @ (self.stiffness_unit @ th)))

    def korn_check(self, u: np.ndarray) -> float:
        """Ratio ||u||_{H1} / ||eps(u)||_{L2} for a field vanishing on Gamma_Dir."""
        u = np.asarray(u, dtype=float)
        if np.any(u[self.dirichlet_dofs] != 0.0):
            raise ValueError("korn_check expects a field vanishing on the Dirichlet dofs")
        num = self.h1_vector(u)
        if num == 0.0:
            return 0.0
        den = self.l2_cells(self.sym_grad(u))
        if den <= 1e-14 * num:
            raise KornViolationError("nonzero Dirichlet field with vanishing strain")
        return num / den
